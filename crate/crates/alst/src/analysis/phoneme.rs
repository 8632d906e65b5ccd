//! Single-phoneme importance: keep one segment of a phoneme, zero every
//! other frame of the utterance, and score the masked cohort.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{mask_frames, AlignmentSegment, FeatureMatrix, LoadedCohort, PatientRecords};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{AlstParams, Branch, PoolingMode};
use crate::train::evaluate;

/// Labels scored as one bucket: the second vowel of "today" is aligned to
/// either depending on the speaker.
pub const MERGED_PHONEMES: [&str; 2] = ["AH0", "UW0"];

/// Which segment survives when a phoneme occurs more than once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    #[default]
    First,
    Longest,
    /// One evaluation per occurrence index, F1 averaged over them.
    AllSeparatelyAveraged,
    /// No masking at all. Useful as a reference.
    KeepAll,
}

impl SegmentPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SegmentPolicy::First => "first",
            SegmentPolicy::Longest => "longest",
            SegmentPolicy::AllSeparatelyAveraged => "all_separately_averaged",
            SegmentPolicy::KeepAll => "keep_all",
        }
    }
}

impl fmt::Display for SegmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SegmentPolicy::First,
            SegmentPolicy::Longest,
            SegmentPolicy::AllSeparatelyAveraged,
            SegmentPolicy::KeepAll,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown segment policy {s:?}")))
    }
}

/// Bucket label a phoneme is reported under.
pub fn phoneme_bucket(label: &str) -> String {
    if MERGED_PHONEMES.contains(&label) {
        MERGED_PHONEMES.join("/")
    } else {
        label.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeScore {
    pub phoneme: String,
    /// Utterances containing the phoneme.
    pub utterances: usize,
    /// `None` when the phoneme never occurs.
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeImportanceResult {
    pub policy: SegmentPolicy,
    pub branch: Branch,
    /// Macro F1 of the same model on the unmasked cohort.
    pub unmasked_f1: Option<f64>,
    /// Sorted by F1 descending; absent phonemes last, by label.
    pub scores: Vec<PhonemeScore>,
}

impl PhonemeImportanceResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phoneme,utterances,macro_f1,policy\n");
        for s in &self.scores {
            let f1 = s.macro_f1.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", s.phoneme, s.utterances, f1, self.policy));
        }
        out
    }

    pub fn get(&self, phoneme: &str) -> Option<&PhonemeScore> {
        self.scores.iter().find(|s| s.phoneme == phoneme)
    }
}

fn occurrences<'a>(alignment: &'a [AlignmentSegment], bucket: &str) -> Vec<&'a AlignmentSegment> {
    alignment.iter().filter(|s| phoneme_bucket(&s.phoneme) == bucket).collect()
}

/// The segment kept in evaluation round `round`, or `None` when the
/// utterance does not take part in that round.
fn kept_segment(segs: &[&AlignmentSegment], policy: SegmentPolicy, round: usize) -> Option<Range<usize>> {
    let range = |s: &AlignmentSegment| s.start_frame..s.end_frame_exclusive;
    match policy {
        SegmentPolicy::First | SegmentPolicy::KeepAll => segs.first().map(|s| range(s)),
        SegmentPolicy::Longest => segs
            .iter()
            .enumerate()
            .max_by_key(|(i, s)| (s.end_frame_exclusive - s.start_frame, std::cmp::Reverse(*i)))
            .map(|(_, s)| range(s)),
        SegmentPolicy::AllSeparatelyAveraged => segs.get(round).map(|s| range(s)),
    }
}

/// Cohort restricted to utterances containing `bucket`, each masked to its
/// kept segment. `None` when no utterance takes part.
fn masked_cohort(cohort: &LoadedCohort, bucket: &str, policy: SegmentPolicy, round: usize) -> Result<Option<LoadedCohort>> {
    let mut manifest = cohort.manifest.clone();
    manifest.patients.clear();
    let mut features: Vec<Vec<FeatureMatrix>> = Vec::new();
    for (p, feats) in cohort.manifest.patients.iter().zip(&cohort.features) {
        let mut records = Vec::new();
        let mut kept = Vec::new();
        for (rec, f) in p.records.iter().zip(feats) {
            let segs = occurrences(&rec.alignment, bucket);
            let Some(seg) = kept_segment(&segs, policy, round) else {
                continue;
            };
            records.push(rec.clone());
            kept.push(match policy {
                SegmentPolicy::KeepAll => f.clone(),
                _ => mask_frames(f, &[seg])?,
            });
        }
        if !records.is_empty() {
            manifest.patients.push(PatientRecords {
                patient_id: p.patient_id.clone(),
                records,
            });
            features.push(kept);
        }
    }
    if manifest.patients.is_empty() {
        return Ok(None);
    }
    LoadedCohort::new(manifest, features).map(Some)
}

/// Scores every phoneme of the model vocabulary and of the cohort. Each
/// phoneme's F1 is computed on the pooled predictions over all masked
/// utterances.
pub fn phoneme_importance(
    params: &AlstParams,
    cohort: &LoadedCohort,
    policy: SegmentPolicy,
    branch: Branch,
    tie_epsilon: f64,
) -> Result<PhonemeImportanceResult> {
    if params.config.pooling_mode != PoolingMode::Phoneme {
        return Err(Error::Config("phoneme importance needs a model trained with phoneme pooling".into()));
    }
    let buckets: BTreeSet<String> = params
        .config
        .phoneme_vocab
        .iter()
        .chain(&cohort.manifest.phoneme_vocab)
        .map(|p| phoneme_bucket(p))
        .collect();
    let unmasked_f1 = evaluate(params, cohort, branch, tie_epsilon)?.macro_f1;

    let mut scores = Vec::with_capacity(buckets.len());
    for bucket in buckets {
        let utterances = cohort
            .manifest
            .records()
            .filter(|r| !occurrences(&r.alignment, &bucket).is_empty())
            .count();
        let rounds = match policy {
            SegmentPolicy::AllSeparatelyAveraged => cohort
                .manifest
                .records()
                .map(|r| occurrences(&r.alignment, &bucket).len())
                .max()
                .unwrap_or(0),
            _ => usize::from(utterances > 0),
        };
        let mut f1s = Vec::with_capacity(rounds);
        for round in 0..rounds {
            if let Some(masked) = masked_cohort(cohort, &bucket, policy, round)? {
                let report: MetricReport = evaluate(params, &masked, branch, tie_epsilon)?;
                f1s.extend(report.macro_f1);
            }
        }
        let macro_f1 = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
        log::debug!("phoneme {bucket}: {utterances} utterances, F1 {macro_f1:?}");
        scores.push(PhonemeScore {
            phoneme: bucket,
            utterances,
            macro_f1,
        });
    }
    scores.sort_by(|a, b| match (a.macro_f1, b.macro_f1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.phoneme.cmp(&b.phoneme)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.phoneme.cmp(&b.phoneme),
    });
    Ok(PhonemeImportanceResult {
        policy,
        branch,
        unmasked_f1,
        scores,
    })
}
