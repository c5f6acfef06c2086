use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

// Rows per parallel task in `matmul`.
const ROW_BLOCK: usize = 16;

/// `(r, k) x (k, c) -> (r, c)`. Each output element sums over `k` in order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = a.dims2()?;
    let (k2, c) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            dim: "inner dimension",
            expected: k,
            actual: k2,
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; r * c];
    if c > 0 {
        out.par_chunks_mut(c * ROW_BLOCK).enumerate().for_each(|(blk, rows)| {
            for (r, row) in rows.chunks_mut(c).enumerate() {
                let i = blk * ROW_BLOCK + r;
                let arow = &ad[i * k..(i + 1) * k];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &bd[kk * c..(kk + 1) * c];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        });
    }
    Tensor::new([r, c], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new([c, r], out)
}

/// Adds `bias[j]` to column `j` of every row.
pub fn add_row_bias(a: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    if bias.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "add_row_bias",
            dim: "bias length",
            expected: c,
            actual: bias.len(),
        });
    }
    let mut out = a.clone();
    if c > 0 {
        out.data_mut().par_chunks_mut(c).with_min_len(64).for_each(|row| {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        });
    }
    Ok(out)
}

/// Fully connected layer `x W^T + b` with `W` stored as `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (_, inp) = x.dims2()?;
    let (_, w_in) = weight.dims2()?;
    if inp != w_in {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            dim: "input features",
            expected: w_in,
            actual: inp,
        });
    }
    let y = matmul(x, &transpose(weight)?)?;
    match bias {
        Some(b) => add_row_bias(&y, b),
        None => Ok(y),
    }
}

/// Row softmax with max subtraction; the normalizer is accumulated in f64.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, c) = a.dims2()?;
    let mut out = a.clone();
    if c == 0 {
        return Ok(out);
    }
    out.data_mut().par_chunks_mut(c).with_min_len(64).for_each(|row| {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    });
    Ok(out)
}

/// Concatenates `(N, C_i, H, W)` maps along channels, in argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat_channels",
        msg: "no inputs".into(),
    })?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        for (dim, exp, act) in [("batch", n, pn), ("height", h, ph), ("width", w, pw)] {
            if exp != act {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected: exp,
                    actual: act,
                });
            }
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Tensor::new([n, total_c, h, w], out)
}
