use std::collections::HashSet;

use rand::seq::SliceRandom;

use super::manifest::CohortManifest;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_SPLIT};

/// Number of test patients for `n` patients: `round(n * fraction)` kept
/// inside `[1, n - 1]` so neither side is empty.
pub fn test_patient_count(n: usize, test_fraction: f64) -> usize {
    ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1)
}

/// Patient-level split. Every record of a patient lands on the same side.
pub fn split_by_patient(
    manifest: &CohortManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(CohortManifest, CohortManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} must lie in (0, 1)")));
    }
    let n = manifest.num_patients();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} patient(s) into train and test")));
    }
    let mut ids = manifest.patient_ids();
    ids.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let n_test = test_patient_count(n, test_fraction);
    let test: HashSet<&str> = ids[..n_test].iter().copied().collect();
    let train: HashSet<&str> = ids[n_test..].iter().copied().collect();
    Ok((manifest.subset(&train), manifest.subset(&test)))
}
