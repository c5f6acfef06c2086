use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::reparam::RepConv;
use crate::tensor::{conv_output_size, ConvSpec};

pub const FLOP_CONVENTION: &str = "1 MAC = 1 FLOP; elementwise, activation and normalization ops excluded";

/// FLOPs split by how they scale with input area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopBreakdown {
    /// Convolutions over feature maps; exactly proportional to H·W.
    pub conv: u64,
    /// Per-token linear layers; exactly proportional to H·W.
    pub linear: u64,
    /// Query-key and attention-value products.
    pub attention: u64,
    /// Layers applied after global pooling; independent of H·W.
    pub pooled: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.attention + self.pooled
    }

    fn scale(self, n: u64) -> Self {
        Self {
            conv: self.conv * n,
            linear: self.linear * n,
            attention: self.attention * n,
            pooled: self.pooled * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub mode: Mode,
    pub input_shape: [usize; 4],
    pub params: u64,
    pub flops: u64,
    pub breakdown: FlopBreakdown,
    pub convention: &'static str,
}

impl ComplexityReport {
    pub fn to_kv(&self) -> String {
        let s = self.input_shape;
        [
            format!("mode={}", self.mode),
            format!("input={}x{}x{}x{}", s[0], s[1], s[2], s[3]),
            format!("params={}", self.params),
            format!("params_m={:.3}", self.params as f64 / 1e6),
            format!("flops={}", self.flops),
            format!("gflops={:.3}", self.flops as f64 / 1e9),
            format!("flops_conv={}", self.breakdown.conv),
            format!("flops_linear={}", self.breakdown.linear),
            format!("flops_attention={}", self.breakdown.attention),
            format!("flops_pooled={}", self.breakdown.pooled),
            format!("convention={}", self.convention),
        ]
        .join("\n")
    }
}

/// Scalar parameters stored by the model in its current mode.
pub fn count_params(model: &Model) -> Result<u64> {
    Ok(model.param_count()? as u64)
}

fn conv_macs(spec: &ConvSpec, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let oh = conv_output_size(h, spec.kernel_size, spec.stride, spec.padding)?;
    let ow = conv_output_size(w, spec.kernel_size, spec.stride, spec.padding)?;
    let per = spec.kernel_size * spec.kernel_size * (spec.in_channels / spec.groups);
    Ok(((oh * ow * spec.out_channels * per) as u64, oh, ow))
}

fn rep_macs(rep: &RepConv, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let (_, oh, ow) = conv_macs(&rep.spec(), h, w)?;
    Ok((rep.macs(h, w), oh, ow))
}

/// Analytic FLOP count for one forward pass over `input_shape`
/// (`N, C, H, W`), counting every branch that runs in the model's mode.
pub fn count_flops(model: &Model, input_shape: [usize; 4]) -> Result<FlopBreakdown> {
    let [n, _, h0, w0] = input_shape;
    let stride = model.config.model.total_stride();
    if h0 == 0 || w0 == 0 || h0 % stride != 0 || w0 % stride != 0 {
        return Err(Error::Invalid(format!("input {h0}x{w0} is not divisible by {stride}")));
    }
    let mut f = FlopBreakdown::default();
    let (mut h, mut w) = (h0, w0);
    let mut sizes = Vec::with_capacity(4);
    for stage in &model.backbone.stages {
        let (m, oh, ow) = rep_macs(&stage.patch_embed.conv, h, w)?;
        f.conv += m;
        (h, w) = (oh, ow);
        if let Some(cpe) = &stage.cpe {
            f.conv += cpe.macs(h, w);
        }
        let t = (h * w) as u64;
        for blk in &stage.blocks {
            let a = &blk.attn;
            let d = a.dim() as u64;
            let (sr, rh, rw) = conv_macs(&a.sr.spec, h, w)?;
            let m = (rh * rw) as u64;
            f.conv += sr;
            f.linear += t * d * d + m * d * 2 * d + t * d * d;
            f.attention += 2 * t * m * d;
            let hd = blk.ffn.fc1.out_features() as u64;
            f.linear += 2 * t * d * hd;
            f.conv += blk.ffn.dw.macs(h, w);
        }
        sizes.push((h, w));
    }

    let dec = &model.decoder;
    let (h4, w4) = sizes[3];
    f.conv += dec.project.macs(h4, w4);
    f.pooled += dec.gate.macs(1, 1);
    for (i, level) in [2usize, 1, 0].into_iter().enumerate() {
        let (lh, lw) = sizes[level];
        f.conv += dec.laterals[i].macs(lh, lw) + dec.fuses[i].macs(lh, lw);
    }
    let (h1, w1) = sizes[0];
    f.conv += conv_macs(&dec.classifier.spec, h1, w1)?.0;

    let head = &model.cls_head;
    if let Some(r) = &head.refine {
        f.conv += r.macs(h4, w4);
    }
    let linear = |l: &crate::model::layers::Linear| (l.in_features() * l.out_features()) as u64;
    if let Some(se) = &head.se {
        f.pooled += linear(&se.fc1) + linear(&se.fc2);
    }
    f.pooled += linear(&head.fc1) + linear(&head.fc2);
    Ok(f.scale(n as u64))
}

pub fn complexity(model: &Model, input_shape: [usize; 4]) -> Result<ComplexityReport> {
    let breakdown = count_flops(model, input_shape)?;
    Ok(ComplexityReport {
        mode: model.mode,
        input_shape,
        params: count_params(model)?,
        flops: breakdown.total(),
        breakdown,
        convention: FLOP_CONVENTION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_formula() {
        let spec = ConvSpec::same(32, 64, 1, 1, 1);
        assert_eq!(conv_macs(&spec, 128, 128).unwrap().0, 33_554_432);
    }

    #[test]
    fn reduction_conv_uses_its_own_padding() {
        let spec = ConvSpec {
            in_channels: 4,
            out_channels: 4,
            kernel_size: 8,
            stride: 8,
            padding: 0,
            groups: 1,
        };
        let (m, oh, ow) = conv_macs(&spec, 16, 24).unwrap();
        assert_eq!((oh, ow), (2, 3));
        assert_eq!(m, 6 * 4 * 64 * 4);
    }
}
