use serde::Serialize;

use super::{fuse_block, BranchedConvBlock, ReparamError, Result};
use crate::tensor::{Tensor, TensorError};
use crate::weights::SplitMix64;

/// Full-block equivalence tolerance in f32 arithmetic.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Runs both forwards on `trials` inputs drawn from U(-1, 1) and compares
/// them elementwise. Inputs depend only on `seed`.
pub fn verify_equivalence<F, G>(
    branched: F,
    fused: G,
    input_shape: &[usize],
    trials: usize,
    seed: u64,
    tolerance: f64,
) -> Result<EquivalenceReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let mut rng = SplitMix64::new(seed);
    let mut max_abs: f64 = 0.0;
    let mut sum_abs = 0.0f64;
    let mut count = 0usize;
    for _ in 0..trials {
        let x = Tensor::from_fn(input_shape.to_vec(), |_| rng.uniform(-1.0, 1.0));
        let a = branched(&x)?;
        let b = fused(&x)?;
        if a.shape() != b.shape() {
            return Err(ReparamError::Tensor(TensorError::Invalid {
                op: "verify_equivalence",
                msg: format!("output shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            }));
        }
        for (&p, &q) in a.data().iter().zip(b.data()) {
            let d = (p as f64 - q as f64).abs();
            // NaN must fail the check, so compare explicitly.
            if d.is_nan() || d > max_abs {
                max_abs = if d.is_nan() { f64::INFINITY } else { d };
            }
            sum_abs += d;
        }
        count += a.len();
    }
    Ok(EquivalenceReport {
        trials,
        max_abs_diff: max_abs,
        mean_abs_diff: if count == 0 { 0.0 } else { sum_abs / count as f64 },
        tolerance,
        pass: max_abs <= tolerance,
    })
}

/// Fuses `block` and checks it against its own branched forward.
pub fn verify_block(
    block: &BranchedConvBlock,
    input_shape: &[usize],
    trials: usize,
    seed: u64,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    let fused = fuse_block(block)?;
    verify_equivalence(|x| block.forward(x), |x| fused.forward(x), input_shape, trials, seed, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_callables_have_zero_difference() {
        let f = |x: &Tensor| Ok(x.scale(2.0));
        let r = verify_equivalence(f, f, &[1, 2, 3, 3], 4, 9, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn constant_offset_fails() {
        let r = verify_equivalence(
            |x: &Tensor| Ok(x.clone()),
            |x: &Tensor| Ok(x.map(|v| v + 1e-3)),
            &[1, 1, 4, 4],
            3,
            1,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_abs_diff - 1e-3).abs() < 1e-6);
        assert!((r.mean_abs_diff - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn deterministic_in_seed() {
        let g = |x: &Tensor| Ok(x.map(|v| v * v));
        let id = |x: &Tensor| Ok(x.clone());
        let a = verify_equivalence(id, g, &[1, 1, 5, 5], 3, 77, 1.0).unwrap();
        let b = verify_equivalence(id, g, &[1, 1, 5, 5], 3, 77, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_shape_mismatch_is_an_error() {
        let r = verify_equivalence(
            |x: &Tensor| Ok(x.clone()),
            |_: &Tensor| Ok(Tensor::zeros([1])),
            &[1, 1, 2, 2],
            1,
            0,
            DEFAULT_TOLERANCE,
        );
        assert!(r.is_err());
    }

    #[test]
    fn nan_never_passes() {
        let r = verify_equivalence(
            |x: &Tensor| Ok(x.clone()),
            |x: &Tensor| Ok(x.map(|_| f32::NAN)),
            &[1, 1, 2, 2],
            1,
            0,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!r.pass);
    }
}
