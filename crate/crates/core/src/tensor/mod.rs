//! Dense f32 tensors and the deterministic kernels every other module is
//! built from.
//!
//! Feature maps are rank-4 `(N, C, H, W)`; token matrices are rank-2
//! `(rows, dim)`. Storage is row-major and contiguous. Every kernel fixes the
//! accumulation order of each output element, so results do not depend on
//! how many worker threads rayon happens to use.

mod activation;
mod conv;
mod linalg;
mod norm;
mod resample;

pub use activation::{activation, gelu, sigmoid, Activation};
pub use conv::{conv2d, conv_output_size, ConvSpec};
pub use linalg::{add_row_bias, concat_channels, linear, matmul, softmax_rows, transpose};
pub use norm::{batchnorm2d, layernorm, BatchNormStats};
pub use resample::{global_avg_pool, resize_bilinear};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("batchnorm2d: negative variance {value} in channel {channel}")]
    NegativeVariance { channel: usize, value: f32 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                dim: "element count",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` of a feature map.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op: "dims4",
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Invalid {
                op,
                msg: format!("shape {:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    /// Multiplies a `(N, C, H, W)` map by a `(N, C, 1, 1)` gate.
    pub fn mul_channelwise(&self, gate: &Tensor) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let (gn, gc, gh, gw) = gate.dims4()?;
        if gn != n || gc != c || gh != 1 || gw != 1 {
            return Err(TensorError::Invalid {
                op: "mul_channelwise",
                msg: format!("gate {:?} does not broadcast over {:?}", gate.shape, self.shape),
            });
        }
        let plane = h * w;
        let mut out = self.data.clone();
        for (chunk, &g) in out.chunks_mut(plane).zip(&gate.data) {
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Largest absolute elementwise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::Invalid {
                op: "max_abs_diff",
                msg: format!("shape {:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a feature map flattened to tokens: `(N, C, H, W)` → `(N·H·W, C)`.
    pub fn map_to_tokens(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = &self.data[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (p, &v) in src.iter().enumerate() {
                    out[(b * plane + p) * c + ch] = v;
                }
            }
        }
        Tensor::new([n * plane, c], out)
    }

    /// Inverse of [`Tensor::map_to_tokens`].
    pub fn tokens_to_map(&self, n: usize, h: usize, w: usize) -> Result<Tensor> {
        let (rows, c) = self.dims2()?;
        let plane = h * w;
        if rows != n * plane {
            return Err(TensorError::ShapeMismatch {
                op: "tokens_to_map",
                dim: "rows",
                expected: n * plane,
                actual: rows,
            });
        }
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for p in 0..plane {
                let row = &self.data[(b * plane + p) * c..(b * plane + p + 1) * c];
                for (ch, &v) in row.iter().enumerate() {
                    out[(b * c + ch) * plane + p] = v;
                }
            }
        }
        Tensor::new([n, c, h, w], out)
    }

    /// Slice of consecutive samples along the batch axis of a rank-4 tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + count > n {
            return Err(TensorError::Invalid {
                op: "batch_slice",
                msg: format!("samples {start}..{} out of {n}", start + count),
            });
        }
        let per = c * h * w;
        Tensor::new(
            [count, c, h, w],
            self.data[start * per..(start + count) * per].to_vec(),
        )
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "stack_batch",
            msg: "no inputs".into(),
        })?;
        let (_, c, h, w) = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(TensorError::Invalid {
                    op: "stack_batch",
                    msg: format!("sample shape {:?} vs {:?}", p.shape, first.shape),
                });
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor::new([n, c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn tokens_round_trip() {
        let t = Tensor::from_fn([2, 3, 2, 4], |i| i as f32);
        let tok = t.map_to_tokens().unwrap();
        assert_eq!(tok.shape(), &[16, 3]);
        // sample 0, pixel 1, channel 2 -> flat (0*3+2)*8+1
        assert_eq!(tok.data()[3 + 2], 17.0);
        assert_eq!(tok.tokens_to_map(2, 2, 4).unwrap(), t);
    }

    #[test]
    fn channelwise_gate() {
        let t = Tensor::full([1, 2, 2, 2], 2.0);
        let g = Tensor::new([1, 2, 1, 1], vec![0.5, 3.0]).unwrap();
        let out = t.mul_channelwise(&g).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0, 6.0, 6.0, 6.0, 6.0]);
    }
}
