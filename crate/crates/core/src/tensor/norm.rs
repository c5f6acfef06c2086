use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Inference-mode batch normalization statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormStats {
    /// gamma 1, beta 0, mean 0, var 1.
    pub fn neutral(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (dim, len) in [
            ("gamma length", self.gamma.len()),
            ("beta length", self.beta.len()),
            ("mean length", self.mean.len()),
            ("var length", self.var.len()),
        ] {
            if len != channels {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    dim,
                    expected: channels,
                    actual: len,
                });
            }
        }
        if !(self.eps >= 0.0) {
            return Err(TensorError::Invalid {
                op: "batchnorm2d",
                msg: format!("eps must be non-negative, got {}", self.eps),
            });
        }
        for (channel, &v) in self.var.iter().enumerate() {
            if v < 0.0 {
                return Err(TensorError::NegativeVariance { channel, value: v });
            }
            if v + self.eps <= 0.0 {
                return Err(TensorError::Invalid {
                    op: "batchnorm2d",
                    msg: format!("var + eps is zero in channel {channel}"),
                });
            }
        }
        Ok(())
    }
}

/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn batchnorm2d(input: &Tensor, stats: &BatchNormStats) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    stats.validate(c)?;
    let plane = h * w;
    let mut out = input.data().to_vec();
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, p)| {
        let ch = idx % c;
        let m = stats.mean[ch] as f64;
        let scale = stats.gamma[ch] as f64 / (stats.var[ch] as f64 + stats.eps as f64).sqrt();
        let b = stats.beta[ch] as f64;
        p.iter_mut().for_each(|v| *v = ((*v as f64 - m) * scale + b) as f32);
    });
    Tensor::new([n, c, h, w], out)
}

/// Per-row normalization of a token matrix followed by a per-column affine.
/// Row statistics are accumulated in f64.
pub fn layernorm(tokens: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let (rows, dim) = tokens.dims2()?;
    for (d, len) in [("gamma length", gamma.len()), ("beta length", beta.len())] {
        if len != dim {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                dim: d,
                expected: dim,
                actual: len,
            });
        }
    }
    let mut out = tokens.data().to_vec();
    out.par_chunks_mut(dim.max(1)).with_min_len(64).for_each(|row| {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (((*v as f64 - mean) * inv) as f32) * gamma[j] + beta[j];
        }
    });
    Tensor::new([rows, dim], out)
}
