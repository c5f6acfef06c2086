//! Segmentation decoder and classification head, both fed by the pyramid.

use crate::config::{ClsHeadKind, DecoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::backbone::FeaturePyramid;
use crate::model::layers::{build_conv, build_rep, export_conv, export_rep, Linear, RepLayout};
use crate::model::Mode;
use crate::reparam::{FusedConv, RepConv};
use crate::tensor::{self, Activation, ConvSpec, Tensor};
use crate::weights::{ParamSource, WeightContainer};

/// Lite R-ASPP style decoder: a globally gated projection of F4, refined
/// top-down with laterals from F3, F2 and F1.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub project: RepConv,
    pub gate: RepConv,
    /// Laterals for F3, F2, F1 in that order.
    pub laterals: Vec<RepConv>,
    pub fuses: Vec<RepConv>,
    pub classifier: FusedConv,
}

impl Decoder {
    pub fn build(cfg: &ModelConfig, dec: &DecoderConfig, mode: Mode, src: &mut dyn ParamSource) -> Result<Self> {
        let (c, k, eps) = (dec.fusion_channels, cfg.branches, cfg.bn_eps);
        let c4 = cfg.embed_dims[3];
        let mut laterals = Vec::with_capacity(3);
        let mut fuses = Vec::with_capacity(3);
        for (i, level) in [2usize, 1, 0].into_iter().enumerate() {
            let lat = RepLayout::conv1x1(cfg.embed_dims[level], c, k);
            laterals.push(build_rep(src, &format!("decoder.lateral.{i}"), &lat, mode, eps)?);
            fuses.push(build_rep(src, &format!("decoder.fuse.{i}"), &RepLayout::conv1x1(2 * c, c, k), mode, eps)?);
        }
        Ok(Self {
            project: build_rep(src, "decoder.project", &RepLayout::conv1x1(c4, c, k), mode, eps)?,
            gate: build_rep(src, "decoder.gate", &RepLayout::conv1x1(c4, c, k), mode, eps)?,
            laterals,
            fuses,
            classifier: build_conv(src, "decoder.classifier", ConvSpec::same(c, cfg.num_seg_classes, 1, 1, 1))?,
        })
    }

    /// `project(f4) * sigmoid(gate(GAP(f4)))`.
    pub fn context(&self, f4: &Tensor) -> Result<Tensor> {
        let g = tensor::activation(&self.gate.forward(&tensor::global_avg_pool(f4)?)?, Activation::Sigmoid);
        Ok(self.project.forward(f4)?.mul_channelwise(&g)?)
    }

    /// Segmentation logits at `out_h x out_w`.
    pub fn forward(&self, pyr: &FeaturePyramid, out_h: usize, out_w: usize) -> Result<Tensor> {
        if pyr.levels.len() != 4 {
            return Err(Error::Invalid(format!("pyramid has {} levels, expected 4", pyr.levels.len())));
        }
        let mut x = self.context(pyr.f(4))?;
        for (i, level) in [3usize, 2, 1].into_iter().enumerate() {
            let lateral = pyr.f(level);
            let (_, _, h, w) = lateral.dims4()?;
            let up = tensor::resize_bilinear(&x, h, w)?;
            let lat = self.laterals[i].forward(lateral)?;
            x = self.fuses[i].forward(&tensor::concat_channels(&[&up, &lat])?)?;
        }
        let logits = self.classifier.forward(&x)?;
        Ok(tensor::resize_bilinear(&logits, out_h, out_w)?)
    }

    pub fn export(&self, c: &mut WeightContainer) -> Result<()> {
        export_rep(&self.project, "decoder.project", c)?;
        export_rep(&self.gate, "decoder.gate", c)?;
        for (i, (lat, fuse)) in self.laterals.iter().zip(&self.fuses).enumerate() {
            export_rep(lat, &format!("decoder.lateral.{i}"), c)?;
            export_rep(fuse, &format!("decoder.fuse.{i}"), c)?;
        }
        export_conv(&self.classifier, "decoder.classifier", c)
    }

    pub fn reps(&self) -> Vec<(String, &RepConv)> {
        let mut out = vec![("decoder.project".to_string(), &self.project), ("decoder.gate".to_string(), &self.gate)];
        for (i, (lat, fuse)) in self.laterals.iter().zip(&self.fuses).enumerate() {
            out.push((format!("decoder.lateral.{i}"), lat));
            out.push((format!("decoder.fuse.{i}"), fuse));
        }
        out
    }

    pub fn reps_mut(&mut self) -> Vec<&mut RepConv> {
        let mut out = vec![&mut self.project, &mut self.gate];
        out.extend(self.laterals.iter_mut());
        out.extend(self.fuses.iter_mut());
        out
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SeGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeGate {
    pub fn build(src: &mut dyn ParamSource, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!("SE reduction {reduction} must divide {channels} channels")));
        }
        Ok(Self {
            fc1: Linear::build(src, &format!("{name}.fc1"), channels, channels / reduction)?,
            fc2: Linear::build(src, &format!("{name}.fc2"), channels / reduction, channels)?,
        })
    }

    /// Per-channel gate values in (0, 1), shaped `(N, C, 1, 1)`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        let pooled = tensor::global_avg_pool(x)?.reshape([n, c])?;
        let hidden = tensor::activation(&self.fc1.forward(&pooled)?, Activation::Relu);
        let g = tensor::activation(&self.fc2.forward(&hidden)?, Activation::Sigmoid);
        Ok(g.reshape([n, c, 1, 1])?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.mul_channelwise(&self.gate(x)?)?)
    }
}

/// Optional depthwise refinement and SE gate on F4, then pooling and a
/// two-layer MLP. Dropout is the identity at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    pub refine: Option<RepConv>,
    pub se: Option<SeGate>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClsHead {
    pub fn build(cfg: &ModelConfig, mode: Mode, src: &mut dyn ParamSource) -> Result<Self> {
        let c4 = cfg.embed_dims[3];
        let refine = match cfg.components.cls_head {
            ClsHeadKind::Rep => Some(build_rep(
                src,
                "cls_head.refine",
                &RepLayout::dw3x3(c4, cfg.branches),
                mode,
                cfg.bn_eps,
            )?),
            ClsHeadKind::Mlp => None,
        };
        let se = if cfg.use_se {
            Some(SeGate::build(src, "cls_head.se", c4, cfg.se_reduction)?)
        } else {
            None
        };
        Ok(Self {
            refine,
            se,
            fc1: Linear::build(src, "cls_head.fc1", c4, cfg.cls_hidden)?,
            fc2: Linear::build(src, "cls_head.fc2", cfg.cls_hidden, cfg.num_cls_classes)?,
        })
    }

    /// Pooled `(N, C)` feature fed to the MLP.
    pub fn pooled(&self, f4: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = f4.dims4()?;
        let expected = self.fc1.in_features();
        if c != expected {
            return Err(Error::Invalid(format!("classification head expects {expected} channels, got {c}")));
        }
        let mut x = match &self.refine {
            Some(r) => r.forward(f4)?,
            None => f4.clone(),
        };
        if let Some(se) = &self.se {
            x = se.forward(&x)?;
        }
        Ok(tensor::global_avg_pool(&x)?.reshape([n, c])?)
    }

    pub fn forward(&self, f4: &Tensor) -> Result<Tensor> {
        let hidden = tensor::activation(&self.fc1.forward(&self.pooled(f4)?)?, Activation::Gelu);
        self.fc2.forward(&hidden)
    }

    pub fn export(&self, c: &mut WeightContainer) -> Result<()> {
        if let Some(r) = &self.refine {
            export_rep(r, "cls_head.refine", c)?;
        }
        if let Some(se) = &self.se {
            se.fc1.export("cls_head.se.fc1", c)?;
            se.fc2.export("cls_head.se.fc2", c)?;
        }
        self.fc1.export("cls_head.fc1", c)?;
        self.fc2.export("cls_head.fc2", c)
    }

    pub fn reps(&self) -> Vec<(String, &RepConv)> {
        self.refine.iter().map(|r| ("cls_head.refine".to_string(), r)).collect()
    }

    pub fn reps_mut(&mut self) -> Vec<&mut RepConv> {
        self.refine.iter_mut().collect()
    }
}
