use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

/// Exact-erf GELU: `0.5 x (1 + erf(x / sqrt 2))`, evaluated in f64.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

pub fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (1.0 / (1.0 + (-x).exp())) as f32
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Gelu => input.map(gelu),
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::SplitMix64;

    #[test]
    fn fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        let t = Tensor::new([1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(activation(&t, Activation::Relu).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_at_one() {
        // 0.5 * (1 + erf(1/sqrt 2)) evaluated with 30-digit arithmetic.
        const GELU_ONE: f64 = 0.841_344_746_068_542_9;
        assert!((gelu(1.0) as f64 - GELU_ONE).abs() <= 1e-5);
        assert!((gelu(1.0) as f64 - GELU_ONE).abs() <= 1e-7);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..1000 {
            let x = rng.uniform(-30.0, 30.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn saturation_stays_finite() {
        for x in [-1e4f32, -100.0, 100.0, 1e4] {
            assert!(gelu(x).is_finite());
            assert!(sigmoid(x).is_finite());
        }
    }
}
