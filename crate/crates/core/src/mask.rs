use rand::seq::SliceRandom;

use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Partition of token positions `0..n` into kept and masked sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
}

/// `round(ratio · n)` (half away from zero), clamped so at least one token is
/// masked and one kept.
pub fn masked_count(n: usize, ratio: f64) -> Result<usize> {
    ensure!(n >= 2, "masking needs at least 2 tokens, got {n}");
    ensure!(ratio > 0.0 && ratio < 1.0, "mask ratio {ratio} must lie in (0, 1)");
    Ok(((ratio * n as f64).round() as usize).clamp(1, n - 1))
}

pub fn sample_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    let n_masked = masked_count(n, ratio)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut kept = idx[..n - n_masked].to_vec();
    let mut masked = idx[n - n_masked..].to_vec();
    kept.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan { n, kept, masked })
}
