use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Geometry of a 2-D convolution with square kernels and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Odd kernel with `(k - 1) / 2` padding, so stride 1 keeps the grid.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding: kernel_size.saturating_sub(1) / 2,
            groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "conv2d", msg });
        if self.kernel_size == 0 || self.stride == 0 || self.groups == 0 {
            return bad(format!("kernel, stride and groups must be positive: {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_size,
            self.kernel_size,
        ]
    }
}

/// `floor((size + 2p - k) / s) + 1`.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel {kernel} larger than padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

// Largest unfolded input, in elements, before falling back to the direct path.
const IM2COL_LIMIT: usize = 1 << 24;
// Output pixels handled per tile in the 1x1 path.
const PIXEL_TILE: usize = 1024;
// Output channels sharing each input load in the 1x1 path.
const CHANNEL_TILE: usize = 4;

/// Direct 2-D cross-correlation (no kernel flip).
///
/// Each output element accumulates input-channel-major, then kernel row,
/// then kernel column, starting from zero; the bias is added last.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: spec.in_channels,
            actual: c,
        });
    }
    let expected_w = spec.weight_shape();
    let (wo, wi, wh, ww) = weight.dims4()?;
    for (dim, exp, act) in [
        ("weight out channels", expected_w[0], wo),
        ("weight in channels per group", expected_w[1], wi),
        ("weight kernel height", expected_w[2], wh),
        ("weight kernel width", expected_w[3], ww),
    ] {
        if exp != act {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim,
                expected: exp,
                actual: act,
            });
        }
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: spec.out_channels,
                actual: b.len(),
            });
        }
    }
    let k = spec.kernel_size;
    let oh = conv_output_size(h, k, spec.stride, spec.padding)?;
    let ow = conv_output_size(w, k, spec.stride, spec.padding)?;
    let mut out = vec![0.0f32; n * spec.out_channels * oh * ow];

    if k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1 {
        pointwise(input.data(), weight.data(), &mut out, c, spec.out_channels, h * w);
    } else if spec.groups == 1 && c * k * k * oh * ow <= IM2COL_LIMIT {
        let plane = oh * ow;
        let per_sample = spec.out_channels * plane;
        for b in 0..n {
            let sample = &input.data()[b * c * h * w..(b + 1) * c * h * w];
            let cols = im2col(sample, (c, h, w), (oh, ow), spec);
            pointwise(&cols, weight.data(), &mut out[b * per_sample..(b + 1) * per_sample], c * k * k, spec.out_channels, plane);
        }
    } else {
        direct(input.data(), weight.data(), &mut out, (n, c, h, w), (oh, ow), spec);
    }

    if let Some(b) = bias {
        let plane = oh * ow;
        let oc = spec.out_channels;
        out.par_chunks_mut(plane).enumerate().for_each(|(idx, p)| {
            let bv = b.data()[idx % oc];
            p.iter_mut().for_each(|v| *v += bv);
        });
    }
    Tensor::new([n, spec.out_channels, oh, ow], out)
}

fn direct(
    input: &[f32],
    weight: &[f32],
    out: &mut [f32],
    (_n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    spec: &ConvSpec,
) {
    let k = spec.kernel_size;
    let s = spec.stride;
    let p = spec.padding;
    let oc = spec.out_channels;
    let icg = spec.in_channels / spec.groups;
    let ocg = oc / spec.groups;

    // Range of output indices whose input index `o*s + kk - p` lands in [0, len).
    let valid = |kk: usize, len: usize, olen: usize| -> (usize, usize) {
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if len + p > kk { ((len + p - kk - 1) / s + 1).min(olen) } else { 0 };
        (lo, hi.max(lo))
    };

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, plane)| {
        let b = idx / oc;
        let o = idx % oc;
        let g = o / ocg;
        for ci in 0..icg {
            let ch = g * icg + ci;
            let src = &input[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let kern = &weight[(o * icg + ci) * k * k..(o * icg + ci + 1) * k * k];
            for ky in 0..k {
                let (y_lo, y_hi) = valid(ky, h, oh);
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let (x_lo, x_hi) = valid(kx, w, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * s + ky - p;
                        let row = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow + x_lo..oy * ow + x_hi];
                        let ix0 = x_lo * s + kx - p;
                        if s == 1 {
                            for (o_el, &x) in orow.iter_mut().zip(&row[ix0..]) {
                                *o_el += wv * x;
                            }
                        } else {
                            for (o_el, &x) in orow.iter_mut().zip(row[ix0..].iter().step_by(s)) {
                                *o_el += wv * x;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Unfolds one sample into a `(c·k·k, oh·ow)` matrix, rows ordered by input
/// channel, kernel row, kernel column; out-of-bounds taps are zero. Running
/// the 1x1 kernel on it reproduces the direct path exactly, since adding a
/// zero product never changes a partial sum.
fn im2col(src: &[f32], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize), spec: &ConvSpec) -> Vec<f32> {
    let (k, s, p) = (spec.kernel_size, spec.stride, spec.padding);
    let plane = oh * ow;
    let mut cols = vec![0.0f32; c * k * k * plane];
    cols.par_chunks_mut(plane).enumerate().for_each(|(r, row)| {
        let (ch, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        let img = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - p as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let line = &img[iy as usize * w..(iy as usize + 1) * w];
            for (ox, v) in row[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                let ix = (ox * s + kx) as isize - p as isize;
                if ix >= 0 && ix < w as isize {
                    *v = line[ix as usize];
                }
            }
        }
    });
    cols
}

/// Dense 1x1 stride-1 convolution as channel mixing. Output channels are
/// processed in small tiles that share each input load; every output element
/// still accumulates over input channels in ascending order.
fn pointwise(input: &[f32], weight: &[f32], out: &mut [f32], c: usize, oc: usize, plane: usize) {
    out.par_chunks_mut(plane * oc).enumerate().for_each(|(b, sample_out)| {
        sample_out
            .par_chunks_mut(plane * CHANNEL_TILE)
            .enumerate()
            .for_each(|(t, chunk)| {
            let o0 = t * CHANNEL_TILE;
            let rows = chunk.len() / plane;
            let src = &input[b * c * plane..(b + 1) * c * plane];
            let mut start = 0;
            while start < plane {
                let end = (start + PIXEL_TILE).min(plane);
                for ci in 0..c {
                    let xs = &src[ci * plane + start..ci * plane + end];
                    if rows == CHANNEL_TILE {
                        let w0 = weight[o0 * c + ci];
                        let w1 = weight[(o0 + 1) * c + ci];
                        let w2 = weight[(o0 + 2) * c + ci];
                        let w3 = weight[(o0 + 3) * c + ci];
                        let (r0, rest) = chunk.split_at_mut(plane);
                        let (r1, rest) = rest.split_at_mut(plane);
                        let (r2, r3) = rest.split_at_mut(plane);
                        let r0 = &mut r0[start..end];
                        let r1 = &mut r1[start..end];
                        let r2 = &mut r2[start..end];
                        let r3 = &mut r3[start..end];
                        for i in 0..xs.len() {
                            let x = xs[i];
                            r0[i] += w0 * x;
                            r1[i] += w1 * x;
                            r2[i] += w2 * x;
                            r3[i] += w3 * x;
                        }
                    } else {
                        for r in 0..rows {
                            let wv = weight[(o0 + r) * c + ci];
                            let orow = &mut chunk[r * plane + start..r * plane + end];
                            for (o_el, &x) in orow.iter_mut().zip(xs) {
                                *o_el += wv * x;
                            }
                        }
                    }
                }
                start = end;
            }
        });
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::SplitMix64;

    fn rand_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    /// Naive sliding-window reference, f64 accumulation, written without
    /// reference to the optimized kernel.
    fn conv_oracle(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let k = spec.kernel_size as isize;
        let (s, p) = (spec.stride as isize, spec.padding as isize);
        let oh = ((h as isize + 2 * p - k) / s + 1) as usize;
        let ow = ((w as isize + 2 * p - k) / s + 1) as usize;
        let icg = c / spec.groups;
        let ocg = spec.out_channels / spec.groups;
        let mut out = Tensor::zeros([n, spec.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..icg {
                            let ch = (o / ocg) * icg + ci;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize * s + ky - p;
                                    let ix = ox as isize * s + kx - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data()[((o * icg + ci) * k as usize + ky as usize) * k as usize + kx as usize];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        if let Some(bb) = bias {
                            acc += bb.data()[o] as f64;
                        }
                        out.data_mut()[((b * spec.out_channels + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_scaling() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let wt = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &wt, None, &ConvSpec::same(1, 1, 1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut rng = SplitMix64::new(3);
        let x = rand_tensor(&[2, 1, 5, 7], &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let wt = Tensor::new([1, 1, 3, 3], k).unwrap();
        let y = conv2d(&x, &wt, None, &ConvSpec::same(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let spec = ConvSpec::same(2, 2, 3, 1, 1);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let wt = rand_tensor(&spec.weight_shape(), &mut rng);
        let y = conv2d(&x, &wt, None, &spec).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&x, &wt, None, &spec)).unwrap() <= 1e-6);
    }

    #[test]
    fn oracle_sweep_over_geometries() {
        let mut rng = SplitMix64::new(12);
        // (in, out, k, stride, pad, groups, h, w)
        let cases = [
            (3, 4, 7, 4, 3, 1, 16, 12),
            (4, 6, 3, 2, 1, 2, 9, 9),
            (5, 5, 3, 1, 1, 5, 6, 8),
            (6, 3, 1, 1, 0, 1, 7, 5),
            (6, 9, 1, 1, 0, 1, 40, 40),
            (4, 4, 2, 2, 0, 1, 8, 8),
            (4, 4, 8, 8, 0, 1, 16, 16),
            (2, 2, 3, 3, 2, 1, 5, 5),
        ];
        for (ci, co, k, s, p, g, h, w) in cases {
            let spec = ConvSpec { in_channels: ci, out_channels: co, kernel_size: k, stride: s, padding: p, groups: g };
            let x = rand_tensor(&[2, ci, h, w], &mut rng);
            let wt = rand_tensor(&spec.weight_shape(), &mut rng);
            let b = rand_tensor(&[co], &mut rng);
            let y = conv2d(&x, &wt, Some(&b), &spec).unwrap();
            let want = conv_oracle(&x, &wt, Some(&b), &spec);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want).unwrap() <= 1e-5, "{spec:?}");
        }
    }

    #[test]
    fn pointwise_path_is_bitwise_equal_to_direct_path() {
        let mut rng = SplitMix64::new(5);
        let (n, c, oc, hw) = (2, 7, 10, 33 * 35);
        let x = rand_tensor(&[n, c, 33, 35], &mut rng);
        let wt = rand_tensor(&[oc, c, 1, 1], &mut rng);
        let spec = ConvSpec::same(c, oc, 1, 1, 1);
        let mut a = vec![0.0; n * oc * hw];
        let mut b = vec![0.0; n * oc * hw];
        pointwise(x.data(), wt.data(), &mut a, c, oc, hw);
        direct(x.data(), wt.data(), &mut b, (n, c, 33, 35), (33, 35), &spec);
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn unfolded_path_is_bitwise_equal_to_direct_path() {
        let mut rng = SplitMix64::new(6);
        for (c, oc, k, s, h, w) in [(3, 5, 7, 4, 19, 16), (4, 6, 3, 2, 9, 8), (3, 4, 3, 1, 6, 7), (2, 3, 4, 4, 8, 12)] {
            let spec = ConvSpec { in_channels: c, out_channels: oc, kernel_size: k, stride: s, padding: (k - 1) / 2, groups: 1 };
            let x = rand_tensor(&[1, c, h, w], &mut rng);
            let wt = rand_tensor(&spec.weight_shape(), &mut rng);
            let (oh, ow) = (
                conv_output_size(h, k, s, spec.padding).unwrap(),
                conv_output_size(w, k, s, spec.padding).unwrap(),
            );
            let mut a = vec![0.0; oc * oh * ow];
            let mut b = vec![0.0; oc * oh * ow];
            let cols = im2col(x.data(), (c, h, w), (oh, ow), &spec);
            pointwise(&cols, wt.data(), &mut a, c * k * k, oc, oh * ow);
            direct(x.data(), wt.data(), &mut b, (1, c, h, w), (oh, ow), &spec);
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()), "{spec:?}");
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolutions() {
        let mut rng = SplitMix64::new(21);
        let c = 4;
        let x = rand_tensor(&[1, c, 6, 6], &mut rng);
        let wt = rand_tensor(&[c, 1, 3, 3], &mut rng);
        let dw = conv2d(&x, &wt, None, &ConvSpec::same(c, c, 3, 1, c)).unwrap();
        for ch in 0..c {
            let xc = Tensor::new([1, 1, 6, 6], x.data()[ch * 36..(ch + 1) * 36].to_vec()).unwrap();
            let wc = Tensor::new([1, 1, 3, 3], wt.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let yc = conv2d(&xc, &wc, None, &ConvSpec::same(1, 1, 3, 1, 1)).unwrap();
            assert_eq!(yc.data(), &dw.data()[ch * 36..(ch + 1) * 36]);
        }
    }

    #[test]
    fn linearity() {
        let mut rng = SplitMix64::new(8);
        let spec = ConvSpec::same(3, 5, 3, 2, 1);
        let wt = rand_tensor(&spec.weight_shape(), &mut rng);
        let x = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let y = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &wt, None, &spec).unwrap();
        let rhs = conv2d(&x, &wt, None, &spec)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &wt, None, &spec).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
    }

    #[test]
    fn output_size_formula_for_model_geometries() {
        // (size, k, s, p) -> expected, from floor((H + 2p - k)/s) + 1
        for (size, k, s, p, want) in [
            (512, 7, 4, 3, 128),
            (512, 3, 4, 1, 128),
            (512, 1, 4, 0, 128),
            (128, 3, 2, 1, 64),
            (128, 1, 2, 0, 64),
            (128, 7, 2, 3, 64),
            (128, 8, 8, 0, 16),
            (64, 4, 4, 0, 16),
            (32, 2, 2, 0, 16),
            (16, 3, 1, 1, 16),
            (16, 1, 1, 0, 16),
        ] {
            assert_eq!(conv_output_size(size, k, s, p).unwrap(), want);
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let wt = Tensor::zeros([2, 3, 3, 3]);
        let err = conv2d(&x, &wt, None, &ConvSpec::same(4, 2, 3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels"));
        let err = conv2d(&x, &wt, None, &ConvSpec::same(3, 2, 5, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("kernel height"));
        let err = conv2d(&x, &wt, Some(&Tensor::zeros([3])), &ConvSpec::same(3, 2, 3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("bias length"));
        assert!(ConvSpec::same(3, 4, 3, 1, 2).validate().is_err());
    }
}
