//! Cohort ingestion: feature files, manifests, splitting, batching, frame
//! masking and the synthetic cohort generator.

pub mod batch;
pub mod features;
pub mod manifest;
pub mod masking;
pub mod split;
pub mod synth;
pub mod transcript;

use std::path::Path;

pub use batch::batch_patients;
pub use features::{read_feature_file, read_feature_header, write_feature_file, FeatureMatrix};
pub use manifest::{is_vowel, load_manifest, parse_manifest, AlignmentSegment, CohortManifest, OnsetType, PatientRecords, SessionRecord, NUM_CLASSES};
pub use masking::mask_frames;
pub use split::split_by_patient;
pub use synth::{generate_cohort, synthesize_cohort, SignalPlacement, SynthConfig, SynthStats, SyntheticCohort};

use crate::error::{Error, Result};

/// A manifest with every feature file in memory. `features[p][s]` belongs
/// to `manifest.patients[p].records[s]`.
#[derive(Clone, Debug)]
pub struct LoadedCohort {
    pub manifest: CohortManifest,
    pub features: Vec<Vec<FeatureMatrix>>,
}

impl LoadedCohort {
    pub fn load(manifest: CohortManifest) -> Result<Self> {
        let features = manifest
            .patients
            .iter()
            .map(|p| p.records.iter().map(|r| read_feature_file(&manifest.feature_path(r))).collect())
            .collect::<Result<_>>()?;
        Self::new(manifest, features)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::load(load_manifest(path)?)
    }

    /// Builds from in-memory parts, checking alignment and dimensions.
    pub fn new(manifest: CohortManifest, features: Vec<Vec<FeatureMatrix>>) -> Result<Self> {
        if features.len() != manifest.patients.len()
            || features.iter().zip(&manifest.patients).any(|(f, p)| f.len() != p.records.len())
        {
            return Err(Error::Data("features do not line up with manifest records".into()));
        }
        let mut dim = None;
        for (p, fs) in manifest.patients.iter().zip(&features) {
            for (r, f) in p.records.iter().zip(fs) {
                if *dim.get_or_insert(f.dim()) != f.dim() {
                    return Err(Error::Data(format!("utterance {} has feature dim {}", r.utterance_id, f.dim())));
                }
                if let Some(seg) = r.alignment.iter().find(|s| s.end_frame_exclusive > f.frames()) {
                    return Err(Error::Data(format!(
                        "utterance {}: segment {} ends past frame {}",
                        r.utterance_id,
                        seg.phoneme,
                        f.frames()
                    )));
                }
            }
        }
        Ok(LoadedCohort { manifest, features })
    }

    /// Groups a flat synthetic cohort the same way a manifest load would.
    pub fn from_synthetic(cohort: SyntheticCohort) -> Result<Self> {
        let mut by_id: std::collections::HashMap<String, FeatureMatrix> = cohort
            .records
            .iter()
            .map(|r| r.utterance_id.clone())
            .zip(cohort.features)
            .collect();
        let manifest = CohortManifest::from_records("", cohort.records)?;
        let features = manifest
            .patients
            .iter()
            .map(|p| p.records.iter().map(|r| by_id.remove(&r.utterance_id).expect("unique ids")).collect())
            .collect();
        Self::new(manifest, features)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.iter().flatten().next().map(FeatureMatrix::dim)
    }

    pub fn num_patients(&self) -> usize {
        self.manifest.patients.len()
    }

    /// Restricts to the patients of `other`, matching by patient id.
    pub fn select(&self, other: &CohortManifest) -> Result<LoadedCohort> {
        let mut manifest = other.clone();
        manifest.root = self.manifest.root.clone();
        let mut features = Vec::new();
        for p in &other.patients {
            let idx = self
                .manifest
                .patients
                .binary_search_by(|q| q.patient_id.cmp(&p.patient_id))
                .map_err(|_| Error::Data(format!("patient {} not in cohort", p.patient_id)))?;
            features.push(self.features[idx].clone());
        }
        LoadedCohort::new(manifest, features)
    }

    /// Patient-level split of an in-memory cohort.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LoadedCohort, LoadedCohort)> {
        let (train, test) = split_by_patient(&self.manifest, test_fraction, seed)?;
        Ok((self.select(&train)?, self.select(&test)?))
    }
}
