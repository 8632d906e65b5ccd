//! Synthetic longitudinal cohorts standing in for private clinical data.
//!
//! Each patient starts from a baseline score and declines one level per
//! session with probability `decline_hazard`. Each session reads the prompt
//! [`PROMPT_REPEATS`] times. A frame inside a phoneme segment is
//!
//! ```text
//! phoneme vector + class mean of the score + patient offset + session noise + frame noise
//! ```
//!
//! Class means sit along one shared ordinal direction plus a smaller
//! class-specific component, so both regression and classification heads
//! have something to learn.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{write_feature_file, FeatureMatrix};
use super::manifest::{is_vowel, AlignmentSegment, CohortManifest, OnsetType, SessionRecord, NUM_CLASSES};
use super::split::split_by_patient;
use super::transcript::{parse_transcript, transcript_labels, PhonemeSlot, DEFAULT_TRANSCRIPT, PROMPT_REPEATS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPlacement {
    /// Class signal on every frame, silence included.
    All,
    /// Class signal only inside vowel segments.
    Vowels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_patients: usize,
    /// Inclusive `[min, max]` sessions per patient.
    pub sessions_per_patient: [usize; 2],
    pub mean_gap_days: f64,
    /// First session falls uniformly in `[0, first_visit_max_days]`.
    pub first_visit_max_days: i64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub baseline_score_distribution: [f64; NUM_CLASSES],
    pub decline_hazard: f64,
    pub noise_scale: f64,
    pub patient_offset_scale: f64,
    pub session_noise_scale: f64,
    pub phoneme_scale: f64,
    /// Probability that a patient rates themself one level off (up or down)
    /// from what their speech shows, for every session.
    pub rating_offset_prob: f64,
    pub bulbar_onset_prob: f64,
    pub signal_placement: SignalPlacement,
    /// Inclusive `[min, max]` frames per phoneme segment.
    pub phoneme_frames: [usize; 2],
    /// Inclusive `[min, max]` silence frames before, between and after repeats.
    pub silence_frames: [usize; 2],
    /// When set, also writes `train.jsonl` / `test.jsonl` split by patient.
    pub test_fraction: Option<f64>,
    /// Transcript text; `None` uses the built-in prompt.
    pub transcript: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_patients: 100,
            sessions_per_patient: [2, 10],
            mean_gap_days: 50.0,
            first_visit_max_days: 365,
            feature_dim: 32,
            class_separation: 1.0,
            baseline_score_distribution: [0.02, 0.05, 0.13, 0.25, 0.55],
            decline_hazard: 0.2,
            noise_scale: 1.0,
            patient_offset_scale: 0.3,
            session_noise_scale: 0.1,
            phoneme_scale: 1.0,
            rating_offset_prob: 0.0,
            bulbar_onset_prob: 0.3,
            signal_placement: SignalPlacement::All,
            phoneme_frames: [2, 7],
            silence_frames: [2, 6],
            test_fraction: Some(0.2),
            transcript: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth: {m}")));
        let total: f64 = self.baseline_score_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.baseline_score_distribution.iter().any(|&p| p < 0.0) {
            return fail(format!("baseline_score_distribution must be a probability vector, sums to {total}"));
        }
        if self.feature_dim < 2 {
            return fail(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        for (name, p) in [
            ("decline_hazard", self.decline_hazard),
            ("rating_offset_prob", self.rating_offset_prob),
            ("bulbar_onset_prob", self.bulbar_onset_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.num_patients == 0 {
            return fail("num_patients must be positive".into());
        }
        for (name, [lo, hi]) in [
            ("sessions_per_patient", self.sessions_per_patient),
            ("phoneme_frames", self.phoneme_frames),
        ] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} must be a range [min, max] with 1 <= min <= max"));
            }
        }
        if self.silence_frames[0] > self.silence_frames[1] {
            return fail("silence_frames must satisfy min <= max".into());
        }
        for (name, v) in [
            ("mean_gap_days", self.mean_gap_days),
            ("class_separation", self.class_separation),
            ("noise_scale", self.noise_scale),
            ("patient_offset_scale", self.patient_offset_scale),
            ("session_noise_scale", self.session_noise_scale),
            ("phoneme_scale", self.phoneme_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.first_visit_max_days < 0 {
            return fail("first_visit_max_days must be non-negative".into());
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return fail(format!("test_fraction must lie in (0, 1), got {f}"));
            }
        }
        Ok(())
    }

    fn slots(&self) -> Result<Vec<PhonemeSlot>> {
        parse_transcript(self.transcript.as_deref().unwrap_or(DEFAULT_TRANSCRIPT))
    }
}

/// Summary written next to a synthesized cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub num_patients: usize,
    pub num_utterances: usize,
    pub mean_sessions_per_patient: f64,
    pub mean_gap_days: f64,
    pub mean_baseline_score: f64,
    pub score_histogram: [usize; NUM_CLASSES],
    pub declining_patients: usize,
    pub rating_offset_patients: usize,
    pub total_frames: usize,
}

/// A generated cohort held in memory. `features[i]` belongs to `records[i]`.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub records: Vec<SessionRecord>,
    pub features: Vec<FeatureMatrix>,
    pub stats: SynthStats,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; dim];
    }
    let n = Normal::new(0.0, scale).expect("scale is finite");
    (0..dim).map(|_| n.sample(rng)).collect()
}

/// Class means `sep * ((c - 2) * a + 0.5 * r_c)` with `a, r_c ~ N(0, I)`.
fn class_means(rng: &mut ChaCha8Rng, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    let axis = gaussian_vec(rng, dim, 1.0);
    (0..NUM_CLASSES)
        .map(|c| {
            let r = gaussian_vec(rng, dim, 1.0);
            axis.iter()
                .zip(&r)
                .map(|(a, r)| sep * ((c as f64 - 2.0) * a + 0.5 * r))
                .collect()
        })
        .collect()
}

pub fn generate_cohort(config: &SynthConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let slots = config.slots()?;
    let labels = transcript_labels(&slots);
    let dim = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let phoneme_vecs: Vec<Vec<f64>> = labels
        .iter()
        .map(|_| gaussian_vec(&mut rng, dim, config.phoneme_scale))
        .collect();
    let silence_vec = gaussian_vec(&mut rng, dim, config.phoneme_scale);
    let means = class_means(&mut rng, dim, config.class_separation);
    let baseline = WeightedIndex::new(config.baseline_score_distribution).map_err(|e| Error::Config(e.to_string()))?;
    let frame_noise = Normal::new(0.0, config.noise_scale).expect("validated");

    let mut records = Vec::new();
    let mut features = Vec::new();
    let mut gaps = Vec::new();
    let mut baseline_sum = 0.0;
    let mut declining = 0;
    let mut offset_patients = 0;

    let width = (config.num_patients.max(1) - 1).to_string().len().max(3);
    for p in 0..config.num_patients {
        let patient_id = format!("P{p:0width$}");
        let n_sessions = rng.random_range(config.sessions_per_patient[0]..=config.sessions_per_patient[1]);
        let onset = if rng.random_bool(config.bulbar_onset_prob) {
            OnsetType::Bulbar
        } else {
            OnsetType::Limb
        };
        let mut day = rng.random_range(0..=config.first_visit_max_days);
        let mut latent = baseline.sample(&mut rng) as i64;
        let offset = if rng.random_bool(config.rating_offset_prob) {
            offset_patients += 1;
            if rng.random_bool(0.5) { 1 } else { -1 }
        } else {
            0
        };
        let patient_offset = gaussian_vec(&mut rng, dim, config.patient_offset_scale);
        let first_score = (latent + offset).clamp(0, 4);
        baseline_sum += first_score as f64;
        let mut declined = false;

        for s in 0..n_sessions {
            if s > 0 {
                let gap = (config.mean_gap_days * rng.random_range(0.5..1.5)).round().max(1.0) as i64;
                gaps.push(gap as f64);
                day += gap;
                if latent > 0 && rng.random_bool(config.decline_hazard) {
                    latent -= 1;
                    declined = true;
                }
            }
            let score = (latent + offset).clamp(0, 4);
            let session_offset: Vec<f64> = gaussian_vec(&mut rng, dim, config.session_noise_scale)
                .iter()
                .zip(&patient_offset)
                .map(|(a, b)| a + b)
                .collect();
            let signal = &means[latent as usize];
            let mut frames: Vec<f32> = Vec::new();
            let mut alignment = Vec::new();
            let mut frame_count = 0usize;
            let emit = |base: &[f64], with_signal: bool, n: usize, rng: &mut ChaCha8Rng, frames: &mut Vec<f32>| {
                for _ in 0..n {
                    for d in 0..dim {
                        let sig = if with_signal { signal[d] } else { 0.0 };
                        let v = base[d] + sig + session_offset[d] + frame_noise.sample(rng);
                        frames.push(v as f32);
                    }
                }
            };
            let silence = |rng: &mut ChaCha8Rng| rng.random_range(config.silence_frames[0]..=config.silence_frames[1]);
            let signal_on_silence = config.signal_placement == SignalPlacement::All;

            let n = silence(&mut rng);
            emit(&silence_vec, signal_on_silence, n, &mut rng, &mut frames);
            frame_count += n;
            for _ in 0..PROMPT_REPEATS {
                for slot in &slots {
                    let label = if slot.variants.len() == 1 {
                        &slot.variants[0]
                    } else {
                        &slot.variants[rng.random_range(0..slot.variants.len())]
                    };
                    let idx = labels.binary_search(label).expect("label from transcript");
                    let dur = rng.random_range(config.phoneme_frames[0]..=config.phoneme_frames[1]);
                    let with_signal = match config.signal_placement {
                        SignalPlacement::All => true,
                        SignalPlacement::Vowels => is_vowel(label),
                    };
                    emit(&phoneme_vecs[idx], with_signal, dur, &mut rng, &mut frames);
                    alignment.push(AlignmentSegment {
                        phoneme: label.clone(),
                        start_frame: frame_count,
                        end_frame_exclusive: frame_count + dur,
                    });
                    frame_count += dur;
                }
                let n = silence(&mut rng);
                emit(&silence_vec, signal_on_silence, n, &mut rng, &mut frames);
                frame_count += n;
            }

            let utterance_id = format!("{patient_id}_S{s:02}");
            records.push(SessionRecord {
                patient_id: patient_id.clone(),
                utterance_id: utterance_id.clone(),
                date_days: day,
                score,
                feature_path: format!("features/{utterance_id}.alstf"),
                alignment,
                onset_type: Some(onset),
            });
            features.push(FeatureMatrix::new(frame_count, dim, frames)?);
        }
        if declined {
            declining += 1;
        }
    }

    let mut histogram = [0usize; NUM_CLASSES];
    for r in &records {
        histogram[r.class()] += 1;
    }
    let stats = SynthStats {
        num_patients: config.num_patients,
        num_utterances: records.len(),
        mean_sessions_per_patient: records.len() as f64 / config.num_patients as f64,
        mean_gap_days: if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 },
        mean_baseline_score: baseline_sum / config.num_patients as f64,
        score_histogram: histogram,
        declining_patients: declining,
        rating_offset_patients: offset_patients,
        total_frames: features.iter().map(FeatureMatrix::frames).sum(),
    };
    Ok(SyntheticCohort {
        records,
        features,
        stats,
    })
}

/// Writes a synthetic cohort under `out_dir`: `manifest.jsonl`,
/// `features/*.alstf`, `stats.json`, and `train.jsonl` / `test.jsonl` when a
/// test fraction is configured.
pub fn synthesize_cohort(config: &SynthConfig, out_dir: &Path) -> Result<CohortManifest> {
    let cohort = generate_cohort(config)?;
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for (rec, feats) in cohort.records.iter().zip(&cohort.features) {
        write_feature_file(&out_dir.join(&rec.feature_path), feats)?;
    }
    let manifest = CohortManifest::from_records(out_dir, cohort.records)?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    if let Some(fraction) = config.test_fraction {
        let (train, test) = split_by_patient(&manifest, fraction, config.seed)?;
        train.write(&out_dir.join("train.jsonl"))?;
        test.write(&out_dir.join("test.jsonl"))?;
    }
    let stats_path = out_dir.join("stats.json");
    let json = serde_json::to_string_pretty(&cohort.stats).expect("stats serialize");
    fs::write(&stats_path, json + "\n").map_err(|e| Error::io(&stats_path, e))?;
    Ok(manifest)
}
