use std::ops::Range;

use super::features::FeatureMatrix;
use crate::error::{Error, Result};

/// Zeroes every frame outside `keep`. Ranges must be in bounds and must not
/// overlap; their order does not matter.
pub fn mask_frames(features: &FeatureMatrix, keep: &[Range<usize>]) -> Result<FeatureMatrix> {
    let n = features.frames();
    let mut sorted: Vec<&Range<usize>> = keep.iter().collect();
    sorted.sort_by_key(|r| r.start);
    let mut prev_end = 0;
    for r in &sorted {
        if r.start > r.end || r.end > n {
            return Err(Error::Data(format!(
                "keep range [{}, {}) outside {n} frames",
                r.start, r.end
            )));
        }
        if r.start < prev_end {
            return Err(Error::Data(format!("keep range [{}, {}) overlaps another", r.start, r.end)));
        }
        prev_end = r.end;
    }
    let mut out = FeatureMatrix::zeros(n, features.dim());
    for r in sorted {
        for t in r.clone() {
            out.frame_mut(t).copy_from_slice(features.frame(t));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> FeatureMatrix {
        let rows: Vec<Vec<f32>> = (0..frames).map(|t| vec![t as f32 + 1.0, -(t as f32) - 1.0]).collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn full_range_is_identity() {
        let m = ramp(4);
        assert_eq!(mask_frames(&m, &[0..4]).unwrap(), m);
    }

    #[test]
    fn empty_keep_zeroes_everything() {
        let m = mask_frames(&ramp(3), &[]).unwrap();
        assert_eq!((m.frames(), m.dim()), (3, 2));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn middle_range_kept() {
        let src = ramp(6);
        let m = mask_frames(&src, &[2..4]).unwrap();
        for t in 0..6 {
            if (2..4).contains(&t) {
                assert_eq!(m.frame(t), src.frame(t));
            } else {
                assert_eq!(m.frame(t), &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        assert!(mask_frames(&ramp(3), &[2..4]).is_err());
        assert!(mask_frames(&ramp(6), &[0..3, 2..5]).is_err());
    }
}
