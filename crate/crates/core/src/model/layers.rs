use crate::error::Result;
use crate::model::Mode;
use crate::reparam::{BranchedConvBlock, ConvBranch, FusedConv, IdentityBranch, RepConv};
use crate::tensor::{self, BatchNormStats, ConvSpec, Tensor};
use crate::weights::{ParamKind, ParamSource, WeightContainer};

/// Fully connected layer, weight stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn build(src: &mut dyn ParamSource, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            weight: src.take(&format!("{name}.weight"), &[out, inp], ParamKind::Weight { fan_in: inp })?,
            bias: src.take(&format!("{name}.bias"), &[out], ParamKind::Bias)?.into_data(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::linear(x, &self.weight, Some(&self.bias))?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn export(&self, name: &str, c: &mut WeightContainer) -> Result<()> {
        c.insert(format!("{name}.weight"), self.weight.clone())?;
        c.insert(format!("{name}.bias"), Tensor::new([self.bias.len()], self.bias.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn build(src: &mut dyn ParamSource, name: &str, dim: usize, eps: f32) -> Result<Self> {
        Ok(Self {
            gamma: src.take(&format!("{name}.weight"), &[dim], ParamKind::NormWeight)?.into_data(),
            beta: src.take(&format!("{name}.bias"), &[dim], ParamKind::NormBias)?.into_data(),
            eps,
        })
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(tensor::layernorm(tokens, &self.gamma, &self.beta, self.eps)?)
    }

    pub fn export(&self, name: &str, c: &mut WeightContainer) -> Result<()> {
        c.insert(format!("{name}.weight"), Tensor::new([self.gamma.len()], self.gamma.clone())?)?;
        c.insert(format!("{name}.bias"), Tensor::new([self.beta.len()], self.beta.clone())?)
    }
}

/// Plain convolution with bias; identical in both modes.
pub fn build_conv(src: &mut dyn ParamSource, name: &str, spec: ConvSpec) -> Result<FusedConv> {
    let shape = spec.weight_shape();
    let fan_in = shape[1] * shape[2] * shape[3];
    Ok(FusedConv {
        weight: src.take(&format!("{name}.weight"), &shape, ParamKind::Weight { fan_in })?,
        bias: src.take(&format!("{name}.bias"), &[spec.out_channels], ParamKind::Bias)?.into_data(),
        spec,
    })
}

pub fn export_conv(conv: &FusedConv, name: &str, c: &mut WeightContainer) -> Result<()> {
    c.insert(format!("{name}.weight"), conv.weight.clone())?;
    c.insert(format!("{name}.bias"), Tensor::new([conv.bias.len()], conv.bias.clone())?)
}

/// Identity branch flavour of a reparameterizable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    None,
    /// Bare skip connection.
    Plain,
    /// Skip connection through its own batch norm.
    Normalized,
}

/// Training-time topology of one reparameterizable convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RepLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub target_kernel: usize,
    pub branch_kernels: Vec<usize>,
    pub skip: Skip,
    pub layer_scale: bool,
}

impl RepLayout {
    /// K parallel 1x1 conv+BN branches with layer scale.
    pub fn conv1x1(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            groups: 1,
            stride: 1,
            target_kernel: 1,
            branch_kernels: vec![1; k],
            skip: Skip::None,
            layer_scale: true,
        }
    }

    /// K parallel 3x3 depthwise branches, a 1x1 depthwise branch, a
    /// normalized identity and layer scale.
    pub fn dw3x3(channels: usize, k: usize) -> Self {
        let mut branch_kernels = vec![3; k];
        branch_kernels.push(1);
        Self {
            in_channels: channels,
            out_channels: channels,
            groups: channels,
            stride: 1,
            target_kernel: 3,
            branch_kernels,
            skip: Skip::Normalized,
            layer_scale: true,
        }
    }

    /// `x + DWConv3x3(x)`.
    pub fn cpe(channels: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            groups: channels,
            stride: 1,
            target_kernel: 3,
            branch_kernels: vec![3],
            skip: Skip::Plain,
            layer_scale: false,
        }
    }

    /// Strided `p x p`, `3 x 3` and `1 x 1` dense branches.
    pub fn patch_embed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            groups: 1,
            stride,
            target_kernel: kernel,
            branch_kernels: vec![kernel, 3, 1],
            skip: Skip::None,
            layer_scale: false,
        }
    }

    pub fn fused_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.out_channels, self.target_kernel, self.stride, self.groups)
    }
}

fn build_bn(src: &mut dyn ParamSource, name: &str, c: usize, eps: f32) -> Result<BatchNormStats> {
    Ok(BatchNormStats {
        gamma: src.take(&format!("{name}.weight"), &[c], ParamKind::BnGamma)?.into_data(),
        beta: src.take(&format!("{name}.bias"), &[c], ParamKind::BnBeta)?.into_data(),
        mean: src.take(&format!("{name}.running_mean"), &[c], ParamKind::BnMean)?.into_data(),
        var: src.take(&format!("{name}.running_var"), &[c], ParamKind::BnVar)?.into_data(),
        eps,
    })
}

fn export_bn(bn: &BatchNormStats, name: &str, c: &mut WeightContainer) -> Result<()> {
    let n = bn.channels();
    c.insert(format!("{name}.weight"), Tensor::new([n], bn.gamma.clone())?)?;
    c.insert(format!("{name}.bias"), Tensor::new([n], bn.beta.clone())?)?;
    c.insert(format!("{name}.running_mean"), Tensor::new([n], bn.mean.clone())?)?;
    c.insert(format!("{name}.running_var"), Tensor::new([n], bn.var.clone())?)
}

/// Builds a reparameterizable conv in the requested form. Tensor names:
/// branched `{name}.branches.{i}.{weight,bn.*}`, `{name}.identity.bn.*`,
/// `{name}.layer_scale`; fused `{name}.{weight,bias}`.
pub fn build_rep(src: &mut dyn ParamSource, name: &str, layout: &RepLayout, mode: Mode, bn_eps: f32) -> Result<RepConv> {
    if mode == Mode::Fused {
        return Ok(RepConv::Fused(build_conv(src, name, layout.fused_spec())?));
    }
    let per_group = layout.in_channels / layout.groups;
    let mut branches = Vec::with_capacity(layout.branch_kernels.len());
    for (i, &k) in layout.branch_kernels.iter().enumerate() {
        let prefix = format!("{name}.branches.{i}");
        let weight = src.take(
            &format!("{prefix}.weight"),
            &[layout.out_channels, per_group, k, k],
            ParamKind::Weight { fan_in: per_group * k * k },
        )?;
        let bn = build_bn(src, &format!("{prefix}.bn"), layout.out_channels, bn_eps)?;
        branches.push(ConvBranch { weight, bias: None, bn: Some(bn) });
    }
    let identity = match layout.skip {
        Skip::None => None,
        Skip::Plain => Some(IdentityBranch { bn: None }),
        Skip::Normalized => Some(IdentityBranch {
            bn: Some(build_bn(src, &format!("{name}.identity.bn"), layout.out_channels, bn_eps)?),
        }),
    };
    let layer_scale = if layout.layer_scale {
        Some(src.take(&format!("{name}.layer_scale"), &[layout.out_channels], ParamKind::LayerScale)?.into_data())
    } else {
        None
    };
    let block = BranchedConvBlock {
        in_channels: layout.in_channels,
        out_channels: layout.out_channels,
        target_kernel: layout.target_kernel,
        stride: layout.stride,
        groups: layout.groups,
        branches,
        identity,
        layer_scale,
    };
    block.validate()?;
    Ok(RepConv::Branched(block))
}

pub fn export_rep(rep: &RepConv, name: &str, c: &mut WeightContainer) -> Result<()> {
    match rep {
        RepConv::Fused(f) => export_conv(f, name, c),
        RepConv::Branched(b) => {
            for (i, br) in b.branches.iter().enumerate() {
                let prefix = format!("{name}.branches.{i}");
                c.insert(format!("{prefix}.weight"), br.weight.clone())?;
                if let Some(bias) = &br.bias {
                    c.insert(format!("{prefix}.bias"), Tensor::new([bias.len()], bias.clone())?)?;
                }
                if let Some(bn) = &br.bn {
                    export_bn(bn, &format!("{prefix}.bn"), c)?;
                }
            }
            if let Some(IdentityBranch { bn: Some(bn) }) = &b.identity {
                export_bn(bn, &format!("{name}.identity.bn"), c)?;
            }
            if let Some(ls) = &b.layer_scale {
                c.insert(format!("{name}.layer_scale"), Tensor::new([ls.len()], ls.clone())?)?;
            }
            Ok(())
        }
    }
}
