//! Structural reparameterization: collapsing a multi-branch linear block
//! into one convolution.
//!
//! A training-time [`BranchedConvBlock`] computes
//!
//! ```text
//! y = ls ⊙ ( Σ_b bn_b(conv_b(x)) + bn_id(x) )
//! ```
//!
//! where every branch kernel is centered inside the block's target kernel and
//! shares its stride. Because every term is affine in `x`, the sum is itself a
//! single convolution with the target kernel: [`fuse_block`] builds it.
//! All kernels use the cross-correlation convention of
//! [`conv2d`](crate::tensor::conv2d); centering a smaller kernel inside a
//! larger one with zero fill is only equivalent under that convention with
//! `(k - 1) / 2` padding on both sides.

mod verify;

pub use verify::{verify_block, verify_equivalence, EquivalenceReport, DEFAULT_TOLERANCE};

use thiserror::Error;

use crate::tensor::{batchnorm2d, conv2d, BatchNormStats, ConvSpec, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReparamError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("kernel size {0} is not odd")]
    EvenKernel(usize),
    #[error("source kernel {source_k} larger than target kernel {target}")]
    KernelTooLarge { source_k: usize, target: usize },
    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("identity branch needs matching channels and stride 1 (in {in_channels}, out {out_channels}, stride {stride})")]
    IdentityShape {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    #[error("block has no branches")]
    Empty,
}

pub type Result<T> = std::result::Result<T, ReparamError>;

/// One convolution branch with its optional bias and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    /// `(out, in / groups, k, k)`, `k` odd.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNormStats>,
}

impl ConvBranch {
    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Skip connection, optionally normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBranch {
    pub bn: Option<BatchNormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchedConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub target_kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub branches: Vec<ConvBranch>,
    pub identity: Option<IdentityBranch>,
    pub layer_scale: Option<Vec<f32>>,
}

/// Deployment-time single convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub spec: ConvSpec,
}

impl FusedConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = Tensor::new([self.bias.len()], self.bias.clone())?;
        Ok(conv2d(x, &self.weight, Some(&bias), &self.spec)?)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(ReparamError::EvenKernel(k))
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ReparamError::LengthMismatch { what, expected, actual })
    }
}

impl BranchedConvBlock {
    pub fn target_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.out_channels, self.target_kernel, self.stride, self.groups)
    }

    fn branch_spec(&self, k: usize) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.out_channels, k, self.stride, self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        check_odd(self.target_kernel)?;
        self.target_spec().validate()?;
        if self.branches.is_empty() && self.identity.is_none() {
            return Err(ReparamError::Empty);
        }
        for br in &self.branches {
            let k = br.kernel_size();
            check_odd(k)?;
            if k > self.target_kernel {
                return Err(ReparamError::KernelTooLarge {
                    source_k: k,
                    target: self.target_kernel,
                });
            }
            let want = self.branch_spec(k).weight_shape();
            if br.weight.shape() != want {
                return Err(TensorError::ShapeMismatch {
                    op: "BranchedConvBlock",
                    dim: "branch weight elements",
                    expected: want.iter().product(),
                    actual: br.weight.len(),
                }
                .into());
            }
            if let Some(b) = &br.bias {
                check_len("branch bias", self.out_channels, b.len())?;
            }
            if let Some(bn) = &br.bn {
                bn.validate(self.out_channels)?;
            }
        }
        if let Some(id) = &self.identity {
            if self.in_channels != self.out_channels || self.stride != 1 {
                return Err(ReparamError::IdentityShape {
                    in_channels: self.in_channels,
                    out_channels: self.out_channels,
                    stride: self.stride,
                });
            }
            if let Some(bn) = &id.bn {
                bn.validate(self.out_channels)?;
            }
        }
        if let Some(ls) = &self.layer_scale {
            check_len("layer scale", self.out_channels, ls.len())?;
        }
        Ok(())
    }

    /// Training-graph forward: every branch evaluated separately and summed.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let mut acc: Option<Tensor> = None;
        let mut accumulate = |t: Tensor| -> Result<()> {
            acc = Some(match acc.take() {
                None => t,
                Some(a) => a.add(&t)?,
            });
            Ok(())
        };
        for br in &self.branches {
            let bias = br.bias.as_ref().map(|b| Tensor::new([b.len()], b.clone())).transpose()?;
            let mut y = conv2d(x, &br.weight, bias.as_ref(), &self.branch_spec(br.kernel_size()))?;
            if let Some(bn) = &br.bn {
                y = batchnorm2d(&y, bn)?;
            }
            accumulate(y)?;
        }
        if let Some(id) = &self.identity {
            let y = match &id.bn {
                Some(bn) => batchnorm2d(x, bn)?,
                None => x.clone(),
            };
            accumulate(y)?;
        }
        let mut y = acc.ok_or(ReparamError::Empty)?;
        if let Some(ls) = &self.layer_scale {
            let (n, c, _, _) = y.dims4()?;
            let gate = Tensor::new([n, c, 1, 1], (0..n).flat_map(|_| ls.iter().copied()).collect())?;
            y = y.mul_channelwise(&gate)?;
        }
        Ok(y)
    }

    /// Number of stored parameters across all branches.
    pub fn param_count(&self) -> usize {
        let bn_count = |bn: &Option<BatchNormStats>| bn.as_ref().map_or(0, |b| 4 * b.channels());
        self.branches
            .iter()
            .map(|b| b.weight.len() + b.bias.as_ref().map_or(0, Vec::len) + bn_count(&b.bn))
            .sum::<usize>()
            + self.identity.as_ref().map_or(0, |id| bn_count(&id.bn))
            + self.layer_scale.as_ref().map_or(0, Vec::len)
    }
}

/// Absorbs an inference-mode batch norm into the preceding convolution:
/// `scale = gamma / sqrt(var + eps)`, `w' = w * scale`,
/// `b' = (b - mean) * scale + beta`. Arithmetic runs in f64.
pub fn fuse_conv_bn(weight: &Tensor, bias: Option<&[f32]>, bn: &BatchNormStats) -> Result<(Tensor, Vec<f32>)> {
    let out = weight.shape().first().copied().unwrap_or(0);
    bn.validate(out)?;
    if let Some(b) = bias {
        check_len("conv bias", out, b.len())?;
    }
    let per_out = if out == 0 { 0 } else { weight.len() / out };
    let scale: Vec<f64> = (0..out)
        .map(|o| bn.gamma[o] as f64 / (bn.var[o] as f64 + bn.eps as f64).sqrt())
        .collect();
    let mut w = weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per_out.max(1)).enumerate().take(out) {
        chunk.iter_mut().for_each(|v| *v = (*v as f64 * scale[o]) as f32);
    }
    let b = (0..out)
        .map(|o| {
            let b0 = bias.map_or(0.0, |b| b[o] as f64);
            ((b0 - bn.mean[o] as f64) * scale[o] + bn.beta[o] as f64) as f32
        })
        .collect();
    Ok((w, b))
}

/// Zero-pads a `(o, i, k_s, k_s)` kernel to `(o, i, k_t, k_t)` with the
/// source centered at offset `(k_t - k_s) / 2`.
pub fn embed_kernel(weight: &Tensor, target: usize) -> Result<Tensor> {
    let (o, i, ks, ks2) = weight.dims4()?;
    if ks != ks2 {
        return Err(TensorError::ShapeMismatch {
            op: "embed_kernel",
            dim: "kernel width",
            expected: ks,
            actual: ks2,
        }
        .into());
    }
    check_odd(ks)?;
    check_odd(target)?;
    if ks > target {
        return Err(ReparamError::KernelTooLarge { source_k: ks, target });
    }
    if ks == target {
        return Ok(weight.clone());
    }
    let off = (target - ks) / 2;
    let mut out = Tensor::zeros([o, i, target, target]);
    let src = weight.data();
    let dst = out.data_mut();
    for plane in 0..o * i {
        for y in 0..ks {
            for x in 0..ks {
                dst[(plane * target + y + off) * target + x + off] = src[(plane * ks + y) * ks + x];
            }
        }
    }
    Ok(out)
}

/// Kernel whose convolution (stride 1, `(k - 1) / 2` padding) reproduces its
/// input: a centered 1 linking each output channel to itself.
pub fn identity_to_kernel(in_channels: usize, out_channels: usize, groups: usize, target: usize) -> Result<Tensor> {
    if in_channels != out_channels {
        return Err(ReparamError::IdentityShape {
            in_channels,
            out_channels,
            stride: 1,
        });
    }
    check_odd(target)?;
    ConvSpec::same(in_channels, out_channels, target, 1, groups).validate()?;
    let per_group = in_channels / groups;
    let center = target / 2;
    let mut k = Tensor::zeros([out_channels, per_group, target, target]);
    let d = k.data_mut();
    for o in 0..out_channels {
        let i = o % per_group;
        d[((o * per_group + i) * target + center) * target + center] = 1.0;
    }
    Ok(k)
}

/// Multiplies output channel `o` of weight and bias by `ls[o]`.
pub fn fold_layer_scale(weight: &Tensor, bias: &[f32], ls: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    let out = weight.shape().first().copied().unwrap_or(0);
    check_len("layer scale", out, ls.len())?;
    check_len("bias", out, bias.len())?;
    let per_out = if out == 0 { 0 } else { weight.len() / out };
    let mut w = weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per_out.max(1)).enumerate().take(out) {
        chunk.iter_mut().for_each(|v| *v *= ls[o]);
    }
    let b = bias.iter().zip(ls).map(|(b, s)| b * s).collect();
    Ok((w, b))
}

fn accumulate(acc: &mut Option<(Tensor, Vec<f32>)>, w: Tensor, b: Vec<f32>) -> Result<()> {
    match acc {
        None => *acc = Some((w, b)),
        Some((aw, ab)) => {
            *aw = aw.add(&w)?;
            ab.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
    }
    Ok(())
}

/// Collapses a branched block into one convolution computing
/// `ls ⊙ (Σ_b bn_b(conv_b(x)) + bn_id(x))`.
///
/// Branches are summed in declaration order, the identity last; the layer
/// scale is folded after the sum.
pub fn fuse_block(block: &BranchedConvBlock) -> Result<FusedConv> {
    block.validate()?;
    let mut acc = None;
    for br in &block.branches {
        let (w, b) = match &br.bn {
            Some(bn) => fuse_conv_bn(&br.weight, br.bias.as_deref(), bn)?,
            None => (
                br.weight.clone(),
                br.bias.clone().unwrap_or_else(|| vec![0.0; block.out_channels]),
            ),
        };
        accumulate(&mut acc, embed_kernel(&w, block.target_kernel)?, b)?;
    }
    if let Some(id) = &block.identity {
        let k = identity_to_kernel(block.in_channels, block.out_channels, block.groups, block.target_kernel)?;
        let (w, b) = match &id.bn {
            Some(bn) => fuse_conv_bn(&k, None, bn)?,
            None => (k, vec![0.0; block.out_channels]),
        };
        accumulate(&mut acc, w, b)?;
    }
    let (mut w, mut b) = acc.ok_or(ReparamError::Empty)?;
    if let Some(ls) = &block.layer_scale {
        (w, b) = fold_layer_scale(&w, &b, ls)?;
    }
    Ok(FusedConv {
        weight: w,
        bias: b,
        spec: block.target_spec(),
    })
}

/// A reparameterizable convolution in either of its two forms.
#[derive(Debug, Clone, PartialEq)]
pub enum RepConv {
    Branched(BranchedConvBlock),
    Fused(FusedConv),
}

impl RepConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            RepConv::Branched(b) => b.forward(x),
            RepConv::Fused(f) => f.forward(x),
        }
    }

    /// Fused copy; fusing an already fused conv is a clone.
    pub fn fuse(&self) -> Result<RepConv> {
        Ok(match self {
            RepConv::Branched(b) => RepConv::Fused(fuse_block(b)?),
            RepConv::Fused(f) => RepConv::Fused(f.clone()),
        })
    }

    pub fn spec(&self) -> ConvSpec {
        match self {
            RepConv::Branched(b) => b.target_spec(),
            RepConv::Fused(f) => f.spec,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RepConv::Branched(b) => b.param_count(),
            RepConv::Fused(f) => f.param_count(),
        }
    }

    /// Multiply-accumulates for an `h x w` input, one MAC per kernel tap per
    /// output element, summed over every convolution branch that runs.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let spec = self.spec();
        let kernels: Vec<usize> = match self {
            RepConv::Branched(b) => b.branches.iter().map(ConvBranch::kernel_size).collect(),
            RepConv::Fused(f) => vec![f.spec.kernel_size],
        };
        kernels
            .into_iter()
            .map(|k| {
                let p = (k - 1) / 2;
                let oh = (h + 2 * p - k) / spec.stride + 1;
                let ow = (w + 2 * p - k) / spec.stride + 1;
                (oh * ow * spec.out_channels * k * k * (spec.in_channels / spec.groups)) as u64
            })
            .sum()
    }
}
