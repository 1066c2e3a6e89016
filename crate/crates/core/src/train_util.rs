//! Small pieces shared by every training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Permutation of `0..n` for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Full batches only; a trailing partial batch is dropped.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks_exact(size.max(1))
}

pub fn check_finite(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: what.to_string(),
        })
    }
}

/// Index of the largest entry in each row.
pub fn argmax_rows(data: &[f32], cols: usize) -> Vec<usize> {
    data.chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
