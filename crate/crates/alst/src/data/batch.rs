use rand::seq::SliceRandom;

use crate::rng::shuffle_rng;

/// Patient indices for one epoch, shuffled with a stream derived from
/// `(seed, epoch)` and cut into consecutive batches of at most `batch_size`.
pub fn batch_patients(num_patients: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..num_patients).collect();
    order.shuffle(&mut shuffle_rng(seed, epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_patients_batch_two() {
        let b = batch_patients(5, 2, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn deterministic_per_epoch_and_reshuffled_across_epochs() {
        assert_eq!(batch_patients(30, 4, 9, 3), batch_patients(30, 4, 9, 3));
        assert_ne!(batch_patients(30, 30, 9, 3), batch_patients(30, 30, 9, 4));
    }
}
