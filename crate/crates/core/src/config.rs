//! Architecture and run configuration, serialized as JSON with unknown keys
//! rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::fnv1a64;

/// Classification head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsHeadKind {
    /// Reparameterizable depthwise refinement, then pooling and MLP.
    Rep,
    /// Pooling and MLP only.
    Mlp,
}

/// Which backbone parts carry training-time branches. A disabled
/// reparameterizable part falls back to a plain convolution (patch embed,
/// FFN depthwise conv) or is removed (CPE).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub rep_patch_embed: bool,
    pub rep_cpe: bool,
    pub rep_mix_ffn: bool,
    pub cls_head: ClsHeadKind,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            rep_patch_embed: true,
            rep_cpe: true,
            rep_mix_ffn: true,
            cls_head: ClsHeadKind::Rep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratios: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub cpe_stages: Vec<bool>,
    /// Parallel 3x3 (or 1x1) branches per reparameterizable block.
    pub branches: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub lambda_cls: f32,
    pub num_seg_classes: usize,
    pub num_cls_classes: usize,
    pub cls_hidden: usize,
    /// Stored for reference only; dropout is the identity at inference.
    pub cls_dropout: f32,
    pub layer_scale_init: f32,
    pub bn_eps: f32,
    pub ln_eps: f32,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            embed_dims: vec![32, 64, 160, 256],
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 5, 8],
            mlp_ratios: vec![4, 4, 4, 4],
            sr_ratios: vec![8, 4, 2, 1],
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            cpe_stages: vec![false, false, true, true],
            branches: 2,
            use_se: false,
            se_reduction: 4,
            lambda_cls: 0.5,
            num_seg_classes: 2,
            num_cls_classes: 2,
            cls_hidden: 256,
            cls_dropout: 0.5,
            layer_scale_init: 1e-5,
            bn_eps: 1e-5,
            ln_eps: 1e-6,
            components: Components::default(),
        }
    }
}

/// Side length the sr-ratio divisibility rule is checked against.
pub const REFERENCE_INPUT: usize = 512;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, len) in [
            ("embed_dims", self.embed_dims.len()),
            ("depths", self.depths.len()),
            ("num_heads", self.num_heads.len()),
            ("mlp_ratios", self.mlp_ratios.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("patch_kernels", self.patch_kernels.len()),
            ("patch_strides", self.patch_strides.len()),
            ("cpe_stages", self.cpe_stages.len()),
        ] {
            if len != 4 {
                return bad(format!("{name} must have 4 entries, got {len}"));
            }
        }
        if self.branches == 0 {
            return bad("branches (K) must be at least 1".into());
        }
        if self.in_channels == 0 || self.num_seg_classes == 0 || self.num_cls_classes == 0 || self.cls_hidden == 0 {
            return bad("channel and class counts must be positive".into());
        }
        let mut side = REFERENCE_INPUT;
        for s in 0..4 {
            let (dim, heads, sr, k, stride) = (
                self.embed_dims[s],
                self.num_heads[s],
                self.sr_ratios[s],
                self.patch_kernels[s],
                self.patch_strides[s],
            );
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return bad(format!("stage {}: dim {dim} not divisible by {heads} heads", s + 1));
            }
            if k % 2 == 0 || k < 3 {
                return bad(format!("stage {}: patch kernel {k} must be odd and at least 3", s + 1));
            }
            if stride == 0 || sr == 0 || self.mlp_ratios[s] == 0 {
                return bad(format!("stage {}: stride, sr ratio and mlp ratio must be positive", s + 1));
            }
            side /= stride;
            if side % sr != 0 {
                return bad(format!("stage {}: sr ratio {sr} does not divide side {side}", s + 1));
            }
        }
        if self.use_se && (self.se_reduction == 0 || self.embed_dims[3] % self.se_reduction != 0) {
            return bad(format!(
                "se_reduction {} must divide {} channels",
                self.se_reduction, self.embed_dims[3]
            ));
        }
        if !(self.lambda_cls >= 0.0) {
            return bad(format!("lambda_cls must be non-negative, got {}", self.lambda_cls));
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0) {
            return bad("normalization eps must be positive".into());
        }
        Ok(())
    }

    /// Total downsampling factor at the deepest stage.
    pub fn total_stride(&self) -> usize {
        self.patch_strides.iter().product()
    }

    pub fn cpe_enabled(&self, stage: usize) -> bool {
        self.components.rep_cpe && self.cpe_stages[stage]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub fusion_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { fusion_channels: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub weights: Option<String>,
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
    /// Square side images are resized to before inference.
    pub input_size: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            decoder: DecoderConfig::default(),
            seed: 0,
            input_size: REFERENCE_INPUT,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.decoder.fusion_channels < self.model.num_seg_classes {
            return Err(Error::Config(format!(
                "fusion_channels {} smaller than num_seg_classes {}",
                self.decoder.fusion_channels, self.model.num_seg_classes
            )));
        }
        let stride = self.model.total_stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fingerprint of the architecture (model and decoder sections).
    pub fn architecture_hash(&self) -> u64 {
        let json = serde_json::to_string(&(&self.model, &self.decoder)).expect("config serializes");
        fnv1a64(json.as_bytes())
    }

    /// Every ablation configuration reachable by config edits alone, keyed by
    /// a short row label.
    pub fn ablation_rows() -> Vec<(String, RunConfig)> {
        let base = RunConfig::default();
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c.model);
            c
        };
        let mut rows = Vec::new();

        // Backbone component subsets; single-branch blocks and the plain MLP head.
        let subsets = [
            ("components/mixffn", (false, false, true)),
            ("components/patch-embed", (true, false, false)),
            ("components/cpe", (false, true, false)),
            ("components/cpe+mixffn", (false, true, true)),
            ("components/cpe+patch-embed", (true, true, false)),
            ("components/mixffn+patch-embed", (true, false, true)),
            ("components/all", (true, true, true)),
        ];
        for (label, (pe, cpe, ffn)) in subsets {
            rows.push((
                label.to_string(),
                with(&|m| {
                    m.branches = 1;
                    m.components = Components {
                        rep_patch_embed: pe,
                        rep_cpe: cpe,
                        rep_mix_ffn: ffn,
                        cls_head: ClsHeadKind::Mlp,
                    };
                }),
            ));
        }
        for k in [1, 2] {
            for head in [ClsHeadKind::Mlp, ClsHeadKind::Rep] {
                let name = if head == ClsHeadKind::Rep { "rep" } else { "mlp" };
                rows.push((
                    format!("head/k{k}-{name}"),
                    with(&|m| {
                        m.branches = k;
                        m.components.cls_head = head;
                    }),
                ));
            }
        }
        for k in 1..=4 {
            rows.push((format!("branches/k{k}"), with(&|m| m.branches = k)));
        }
        let masks = [
            [true, true, true, true],
            [true, true, false, false],
            [false, false, true, true],
            [true, false, true, false],
            [false, true, false, true],
        ];
        for mask in masks {
            let label: String = mask.iter().map(|&b| if b { 'T' } else { 'F' }).collect();
            rows.push((format!("cpe/{label}"), with(&|m| m.cpe_stages = mask.to_vec())));
        }
        for kernels in [[7, 3, 3, 3], [7, 7, 7, 7]] {
            let label = kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("");
            rows.push((format!("kernels/{label}"), with(&|m| m.patch_kernels = kernels.to_vec())));
        }
        for se in [false, true] {
            rows.push((format!("se/{}", if se { "on" } else { "off" }), with(&|m| m.use_se = se)));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let m = ModelConfig::default();
        assert_eq!(m.embed_dims, vec![32, 64, 160, 256]);
        assert_eq!(m.sr_ratios, vec![8, 4, 2, 1]);
        assert_eq!(m.patch_kernels, vec![7, 3, 3, 3]);
        assert_eq!(m.cpe_stages, vec![false, false, true, true]);
        assert_eq!(m.branches, 2);
        assert!(!m.use_se);
        assert_eq!(m.lambda_cls, 0.5);
        assert_eq!(m.layer_scale_init, 1e-5);
        assert_eq!(m.cls_hidden, 256);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let err = RunConfig::from_json(r#"{"model": {"embed_dim": [1]}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err = RunConfig::from_json(r#"{"colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"branches": 3}, "seed": 9}"#).unwrap();
        assert_eq!(cfg.model.branches, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.embed_dims, vec![32, 64, 160, 256]);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = RunConfig::default();
        c.model.depths = vec![2, 2, 2];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.branches = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.sr_ratios = vec![8, 4, 2, 3];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.num_heads[2] = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.input_size = 100;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.decoder.fusion_channels = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_rows_are_valid_and_distinct() {
        let rows = RunConfig::ablation_rows();
        assert!(rows.len() >= 20);
        for (label, cfg) in &rows {
            cfg.validate().unwrap_or_else(|e| panic!("{label}: {e}"));
        }
        let labels: std::collections::HashSet<_> = rows.iter().map(|(l, _)| l.clone()).collect();
        assert_eq!(labels.len(), rows.len());
    }

    #[test]
    fn architecture_hash_ignores_seed() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        b.model.branches = 3;
        assert_ne!(a.architecture_hash(), b.architecture_hash());
    }
}
