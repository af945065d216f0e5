//! Low-rank adapters over frozen linear weights.
//!
//! An adapter contributes `gamma * B * A` on top of a frozen weight
//! `W [d_out, d_in]`, with `A [rank, d_in]` seeded and `B [d_out, rank]`
//! zero-initialized so a fresh adapter changes nothing.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::rng::{fnv1a, CounterRng};

/// One low-rank adapter attached to a named linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub down: Mat,
    pub up: Mat,
    pub gamma: f64,
}

impl LoraAdapter {
    /// Null-initialized adapter: `A` seeded scaled-uniform, `B = 0`.
    pub fn new(target: &str, d_out: usize, d_in: usize, rank: usize, gamma: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("adapter rank must be >= 1"));
        }
        let rng = CounterRng::new(seed).derive(fnv1a(target));
        let bound = 1.0 / (d_in as f64).sqrt();
        let down = Mat::new(
            rank,
            d_in,
            (0..rank * d_in)
                .map(|i| rng.uniform_symmetric(i as u64, bound))
                .collect(),
        )?;
        Ok(Self {
            target: target.to_string(),
            down,
            up: Mat::zeros(d_out, rank),
            gamma,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// `gamma * B * A`, the adapter's weight delta.
    pub fn delta(&self) -> Mat {
        self.up.matmul(&self.down).scaled(self.gamma)
    }
}

/// Adapters keyed by target layer name.
pub type LoraSet = BTreeMap<String, LoraAdapter>;

/// Effective weight `W + gamma * B * A`.
pub fn lora_apply(weight: &Mat, adapter: &LoraAdapter) -> Result<Mat> {
    if adapter.down.cols() != weight.cols() || adapter.up.rows() != weight.rows() {
        return Err(invalid(format!(
            "adapter {}x{} -> {}x{} does not fit weight {}x{}",
            adapter.down.rows(),
            adapter.down.cols(),
            adapter.up.rows(),
            adapter.up.cols(),
            weight.rows(),
            weight.cols()
        )));
    }
    let mut out = weight.clone();
    out.add_assign(&adapter.delta());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mat(seed: u64, r: usize, c: usize) -> Mat {
        Mat::new(r, c, CounterRng::new(seed).normal_vec(r * c)).unwrap()
    }

    #[test]
    fn fresh_adapter_leaves_weight_bitwise_unchanged() {
        let w = random_mat(1, 6, 4);
        let a = LoraAdapter::new("layer", 6, 4, 2, 1.0, 9).unwrap();
        let eff = lora_apply(&w, &a).unwrap();
        assert!(w
            .data()
            .iter()
            .zip(eff.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_gamma_leaves_weight_unchanged() {
        let w = random_mat(2, 4, 4);
        let mut a = LoraAdapter::new("layer", 4, 4, 2, 0.0, 9).unwrap();
        // Even with a trained (nonzero) B, gamma = 0 nullifies the delta.
        a.up = random_mat(3, 4, 2);
        let eff = lora_apply(&w, &a).unwrap();
        assert_eq!(w.data(), eff.data());
    }

    #[test]
    fn full_rank_factorization_reconstructs_delta() {
        // rank = d_in with A = I and B = delta is an exact factorization.
        let w = random_mat(4, 5, 3);
        let delta = random_mat(5, 5, 3);
        let mut a = LoraAdapter::new("layer", 5, 3, 3, 1.0, 9).unwrap();
        a.down = Mat::identity(3);
        a.up = delta.clone();
        let eff = lora_apply(&w, &a).unwrap();
        for i in 0..w.data().len() {
            let want = w.data()[i] + delta.data()[i];
            assert!((eff.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let w = random_mat(6, 4, 4);
        let a = LoraAdapter::new("layer", 5, 4, 2, 1.0, 9).unwrap();
        assert!(lora_apply(&w, &a).is_err());
        assert!(LoraAdapter::new("layer", 4, 4, 0, 1.0, 9).is_err());
    }
}
