use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Per-channel spatial mean, `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(TensorError::Invalid {
            op: "global_avg_pool",
            msg: "empty spatial extent".into(),
        });
    }
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

/// Source coordinate with half-pixel centers, clamped to the valid range:
/// `(dst + 0.5) * in/out - 0.5`. Returns (lower index, upper index, weight of upper).
fn source_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Bilinear resize with `align_corners = false` semantics.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(TensorError::Invalid {
            op: "resize_bilinear",
            msg: format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
        });
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|y| source_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_taps(x, w, out_w)).collect();
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(idx, plane)| {
        let src = &input.data()[idx * h * w..(idx + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                plane[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    });
    Tensor::new([n, c, out_h, out_w], out)
}
