//! Four-stage hierarchical transformer encoder.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::layers::{build_conv, build_rep, export_conv, export_rep, LayerNorm, Linear, RepLayout};
use crate::model::Mode;
use crate::reparam::{FusedConv, RepConv};
use crate::tensor::{self, Activation, ConvSpec, Tensor};
use crate::weights::{ParamSource, WeightContainer};

/// Batch size and spatial extent of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Worst deviation of any attention row sum from 1 seen during a traced
/// forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttentionStats {
    pub rows: usize,
    pub max_row_sum_error: f64,
}

/// The four stage outputs, from stride 4 down to stride 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Level `i` in 1..=4.
    pub fn f(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub conv: RepConv,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    /// Downsampled tokens and their grid.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Grid)> {
        let y = self.conv.forward(x)?;
        let (n, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&y.map_to_tokens()?)?, Grid { n, h, w }))
    }
}

/// Keys and values come from a copy of the map reduced by a conv with
/// kernel = stride = `sr`, followed by layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub kv: Linear,
    pub sr: FusedConv,
    pub sr_norm: LayerNorm,
    pub proj: Linear,
}

fn cols(t: &Tensor, row0: usize, rows: usize, col0: usize, width: usize) -> Result<Tensor> {
    let c = t.shape()[1];
    let mut out = Vec::with_capacity(rows * width);
    for r in row0..row0 + rows {
        out.extend_from_slice(&t.data()[r * c + col0..r * c + col0 + width]);
    }
    Ok(Tensor::new([rows, width], out)?)
}

impl Attention {
    pub fn dim(&self) -> usize {
        self.q.out_features()
    }

    pub fn sr_ratio(&self) -> usize {
        self.sr.spec.stride
    }

    pub fn forward(&self, x: &Tensor, grid: Grid, mut stats: Option<&mut AttentionStats>) -> Result<Tensor> {
        let dim = self.dim();
        if dim % self.heads != 0 {
            return Err(Error::Invalid(format!("dim {dim} not divisible by {} heads", self.heads)));
        }
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let q = self.q.forward(x)?;
        let reduced = self.sr.forward(&x.tokens_to_map(grid.n, grid.h, grid.w)?)?;
        let (_, _, rh, rw) = reduced.dims4()?;
        let kv = self.kv.forward(&self.sr_norm.forward(&reduced.map_to_tokens()?)?)?;

        let (nq, nk) = (grid.h * grid.w, rh * rw);
        let mut out = vec![0.0f32; grid.tokens() * dim];
        for b in 0..grid.n {
            for h in 0..self.heads {
                let qh = cols(&q, b * nq, nq, h * dh, dh)?;
                let kh = cols(&kv, b * nk, nk, h * dh, dh)?;
                let vh = cols(&kv, b * nk, nk, dim + h * dh, dh)?;
                let scores = tensor::matmul(&qh, &tensor::transpose(&kh)?)?.scale(scale);
                let p = tensor::softmax_rows(&scores)?;
                if let Some(s) = stats.as_deref_mut() {
                    for row in p.data().chunks(nk) {
                        let sum: f64 = row.iter().map(|&v| v as f64).sum();
                        s.max_row_sum_error = s.max_row_sum_error.max((sum - 1.0).abs());
                        s.rows += 1;
                    }
                }
                let oh = tensor::matmul(&p, &vh)?;
                for (r, row) in oh.data().chunks(dh).enumerate() {
                    let at = (b * nq + r) * dim + h * dh;
                    out[at..at + dh].copy_from_slice(row);
                }
            }
        }
        self.proj.forward(&Tensor::new([grid.tokens(), dim], out)?)
    }
}

/// Pointwise expand, depthwise 3x3, GELU, pointwise project.
#[derive(Debug, Clone, PartialEq)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: RepConv,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn forward(&self, x: &Tensor, grid: Grid) -> Result<Tensor> {
        let hidden = self.fc1.forward(x)?.tokens_to_map(grid.n, grid.h, grid.w)?;
        let mixed = tensor::activation(&self.dw.forward(&hidden)?, Activation::Gelu);
        self.fc2.forward(&mixed.map_to_tokens()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    pub fn forward(&self, x: &Tensor, grid: Grid, stats: Option<&mut AttentionStats>) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)?, grid, stats)?)?;
        Ok(x.add(&self.ffn.forward(&self.norm2.forward(&x)?, grid)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub patch_embed: PatchEmbed,
    pub cpe: Option<RepConv>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Stage {
    pub fn forward(&self, x: &Tensor, mut stats: Option<&mut AttentionStats>) -> Result<Tensor> {
        let (mut t, grid) = self.patch_embed.forward(x)?;
        if let Some(cpe) = &self.cpe {
            t = cpe.forward(&t.tokens_to_map(grid.n, grid.h, grid.w)?)?.map_to_tokens()?;
        }
        for block in &self.blocks {
            t = block.forward(&t, grid, stats.as_deref_mut())?;
        }
        Ok(self.norm.forward(&t)?.tokens_to_map(grid.n, grid.h, grid.w)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Stage>,
}

fn maybe_rep(
    src: &mut dyn ParamSource,
    name: &str,
    layout: RepLayout,
    rep: bool,
    mode: Mode,
    bn_eps: f32,
) -> Result<RepConv> {
    if rep {
        build_rep(src, name, &layout, mode, bn_eps)
    } else {
        Ok(RepConv::Fused(build_conv(src, name, layout.fused_spec())?))
    }
}

impl Backbone {
    pub fn build(cfg: &ModelConfig, mode: Mode, src: &mut dyn ParamSource) -> Result<Self> {
        let comp = cfg.components;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = cfg.in_channels;
        for s in 0..4 {
            let p = format!("backbone.stages.{s}");
            let dim = cfg.embed_dims[s];
            let pe_layout = RepLayout::patch_embed(in_ch, dim, cfg.patch_kernels[s], cfg.patch_strides[s]);
            let patch_embed = PatchEmbed {
                conv: maybe_rep(src, &format!("{p}.patch_embed"), pe_layout, comp.rep_patch_embed, mode, cfg.bn_eps)?,
                norm: LayerNorm::build(src, &format!("{p}.patch_norm"), dim, cfg.ln_eps)?,
            };
            let cpe = if cfg.cpe_enabled(s) {
                Some(build_rep(src, &format!("{p}.cpe"), &RepLayout::cpe(dim), mode, cfg.bn_eps)?)
            } else {
                None
            };
            let hidden = dim * cfg.mlp_ratios[s];
            let sr = cfg.sr_ratios[s];
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for j in 0..cfg.depths[s] {
                let b = format!("{p}.blocks.{j}");
                blocks.push(Block {
                    norm1: LayerNorm::build(src, &format!("{b}.norm1"), dim, cfg.ln_eps)?,
                    attn: Attention {
                        heads: cfg.num_heads[s],
                        q: Linear::build(src, &format!("{b}.attn.q"), dim, dim)?,
                        kv: Linear::build(src, &format!("{b}.attn.kv"), dim, 2 * dim)?,
                        sr: build_conv(
                            src,
                            &format!("{b}.attn.sr"),
                            ConvSpec {
                                in_channels: dim,
                                out_channels: dim,
                                kernel_size: sr,
                                stride: sr,
                                padding: 0,
                                groups: 1,
                            },
                        )?,
                        sr_norm: LayerNorm::build(src, &format!("{b}.attn.sr_norm"), dim, cfg.ln_eps)?,
                        proj: Linear::build(src, &format!("{b}.attn.proj"), dim, dim)?,
                    },
                    norm2: LayerNorm::build(src, &format!("{b}.norm2"), dim, cfg.ln_eps)?,
                    ffn: MixFfn {
                        fc1: Linear::build(src, &format!("{b}.ffn.fc1"), dim, hidden)?,
                        dw: maybe_rep(
                            src,
                            &format!("{b}.ffn.dw"),
                            RepLayout::dw3x3(hidden, cfg.branches),
                            comp.rep_mix_ffn,
                            mode,
                            cfg.bn_eps,
                        )?,
                        fc2: Linear::build(src, &format!("{b}.ffn.fc2"), hidden, dim)?,
                    },
                });
            }
            stages.push(Stage {
                patch_embed,
                cpe,
                blocks,
                norm: LayerNorm::build(src, &format!("{p}.norm"), dim, cfg.ln_eps)?,
            });
            in_ch = dim;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, image: &Tensor, mut stats: Option<&mut AttentionStats>) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x, stats.as_deref_mut())?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn export(&self, c: &mut WeightContainer) -> Result<()> {
        for (s, stage) in self.stages.iter().enumerate() {
            let p = format!("backbone.stages.{s}");
            export_rep(&stage.patch_embed.conv, &format!("{p}.patch_embed"), c)?;
            stage.patch_embed.norm.export(&format!("{p}.patch_norm"), c)?;
            if let Some(cpe) = &stage.cpe {
                export_rep(cpe, &format!("{p}.cpe"), c)?;
            }
            for (j, blk) in stage.blocks.iter().enumerate() {
                let b = format!("{p}.blocks.{j}");
                blk.norm1.export(&format!("{b}.norm1"), c)?;
                blk.attn.q.export(&format!("{b}.attn.q"), c)?;
                blk.attn.kv.export(&format!("{b}.attn.kv"), c)?;
                export_conv(&blk.attn.sr, &format!("{b}.attn.sr"), c)?;
                blk.attn.sr_norm.export(&format!("{b}.attn.sr_norm"), c)?;
                blk.attn.proj.export(&format!("{b}.attn.proj"), c)?;
                blk.norm2.export(&format!("{b}.norm2"), c)?;
                blk.ffn.fc1.export(&format!("{b}.ffn.fc1"), c)?;
                export_rep(&blk.ffn.dw, &format!("{b}.ffn.dw"), c)?;
                blk.ffn.fc2.export(&format!("{b}.ffn.fc2"), c)?;
            }
            stage.norm.export(&format!("{p}.norm"), c)?;
        }
        Ok(())
    }

    /// Every reparameterizable conv with its tensor-name prefix.
    pub fn reps(&self) -> Vec<(String, &RepConv)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let p = format!("backbone.stages.{s}");
            out.push((format!("{p}.patch_embed"), &stage.patch_embed.conv));
            if let Some(cpe) = &stage.cpe {
                out.push((format!("{p}.cpe"), cpe));
            }
            for (j, blk) in stage.blocks.iter().enumerate() {
                out.push((format!("{p}.blocks.{j}.ffn.dw"), &blk.ffn.dw));
            }
        }
        out
    }

    pub fn reps_mut(&mut self) -> Vec<&mut RepConv> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(&mut stage.patch_embed.conv);
            if let Some(cpe) = &mut stage.cpe {
                out.push(cpe);
            }
            for blk in &mut stage.blocks {
                out.push(&mut blk.ffn.dw);
            }
        }
        out
    }
}
