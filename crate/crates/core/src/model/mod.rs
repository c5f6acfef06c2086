//! The full multi-task network: backbone, segmentation decoder and
//! classification head, in branched or fused form.

pub mod backbone;
pub mod heads;
pub mod layers;
pub mod loss;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use backbone::{AttentionStats, Backbone, FeaturePyramid, Grid};
pub use heads::{ClsHead, Decoder, SeGate};
pub use loss::{multi_task_loss, LossBreakdown};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::reparam::RepConv;
use crate::tensor::Tensor;
use crate::weights::{ContainerSource, ParamSource, RandomInit, WeightContainer};

/// Training-time multi-branch weights or deployment single-path weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u32)]
pub enum Mode {
    Branched = 0,
    Fused = 1,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Branched => "branched",
            Mode::Fused => "fused",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "branched" => Ok(Mode::Branched),
            "fused" => Ok(Mode::Fused),
            other => Err(format!("unknown mode `{other}` (expected branched or fused)")),
        }
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    /// `(N, seg_classes, H, W)` at input resolution.
    pub seg_logits: Tensor,
    /// `(N, cls_classes)`.
    pub cls_logits: Tensor,
}

impl PredictionBundle {
    /// Largest elementwise difference over both outputs.
    pub fn max_abs_diff(&self, other: &PredictionBundle) -> Result<f64> {
        let a = self.seg_logits.max_abs_diff(&other.seg_logits)?;
        let b = self.cls_logits.max_abs_diff(&other.cls_logits)?;
        Ok(a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub mode: Mode,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub cls_head: ClsHead,
}

impl Model {
    /// Assembles the network, pulling every parameter from `src`.
    pub fn build(config: &RunConfig, mode: Mode, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        Ok(Self {
            config: config.clone(),
            mode,
            backbone: Backbone::build(m, mode, src)?,
            decoder: Decoder::build(m, &config.decoder, mode, src)?,
            cls_head: ClsHead::build(m, mode, src)?,
        })
    }

    /// Branched model with deterministic standard initialization.
    pub fn random(config: &RunConfig, seed: u64) -> Result<Self> {
        Self::build(config, Mode::Branched, &mut RandomInit::new(seed, config.model.layer_scale_init))
    }

    /// Loads a container, requiring it to hold exactly the tensors the
    /// config calls for in the container's mode.
    pub fn from_container(config: &RunConfig, container: &WeightContainer) -> Result<Self> {
        let mut src = ContainerSource::new(container);
        let model = Self::build(config, container.mode, &mut src)?;
        src.finish()?;
        Ok(model)
    }

    pub fn to_container(&self) -> Result<WeightContainer> {
        let mut c = WeightContainer::new(self.mode);
        self.backbone.export(&mut c)?;
        self.decoder.export(&mut c)?;
        self.cls_head.export(&mut c)?;
        Ok(c)
    }

    /// Deployment copy with every reparameterizable conv collapsed.
    pub fn fuse(&self) -> Result<Self> {
        let mut out = self.clone();
        for rep in out.reps_mut() {
            *rep = rep.fuse()?;
        }
        out.mode = Mode::Fused;
        Ok(out)
    }

    /// Every reparameterizable conv with its tensor-name prefix.
    pub fn reps(&self) -> Vec<(String, &RepConv)> {
        let mut out = self.backbone.reps();
        out.extend(self.decoder.reps());
        out.extend(self.cls_head.reps());
        out
    }

    fn reps_mut(&mut self) -> Vec<&mut RepConv> {
        let mut out = self.backbone.reps_mut();
        out.extend(self.decoder.reps_mut());
        out.extend(self.cls_head.reps_mut());
        out
    }

    /// Number of scalar parameters stored in this mode.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.to_container()?.element_count())
    }

    fn check_input(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = image.dims4()?;
        let stride = self.config.model.total_stride();
        if c != self.config.model.in_channels {
            return Err(Error::Invalid(format!(
                "input has {c} channels, expected {}",
                self.config.model.in_channels
            )));
        }
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Invalid(format!("input {h}x{w} is not divisible by {stride}")));
        }
        Ok((h, w))
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        self.backbone.forward(image, None)
    }

    pub fn forward(&self, image: &Tensor) -> Result<PredictionBundle> {
        self.forward_traced(image, None)
    }

    /// Forward pass that also records attention row-sum statistics.
    pub fn forward_traced(&self, image: &Tensor, stats: Option<&mut AttentionStats>) -> Result<PredictionBundle> {
        let (h, w) = self.check_input(image)?;
        let pyr = self.backbone.forward(image, stats)?;
        Ok(PredictionBundle {
            seg_logits: self.decoder.forward(&pyr, h, w)?,
            cls_logits: self.cls_head.forward(pyr.f(4))?,
        })
    }
}

/// Converts a branched container into the equivalent fused container.
pub fn fuse_weights(config: &RunConfig, branched: &WeightContainer) -> Result<WeightContainer> {
    if branched.mode != Mode::Branched {
        return Err(Error::WrongMode {
            expected: Mode::Branched.to_string(),
            found: branched.mode.to_string(),
        });
    }
    Model::from_container(config, branched)?.fuse()?.to_container()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::SplitMix64;

    fn small() -> RunConfig {
        RunConfig::default()
    }

    fn input(seed: u64, side: usize) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn([1, 3, side, side], |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [Mode::Branched, Mode::Fused] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("other".parse::<Mode>().is_err());
        assert_eq!(Mode::Branched as u32, 0);
        assert_eq!(Mode::Fused as u32, 1);
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let m = Model::random(&small(), 1).unwrap();
        let p = m.pyramid(&input(0, 64)).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 160, 4, 4], vec![1, 256, 2, 2]]
        );
    }

    #[test]
    fn bundle_shapes() {
        let m = Model::random(&small(), 1).unwrap();
        let b = m.forward(&input(0, 64)).unwrap();
        assert_eq!(b.seg_logits.shape(), &[1, 2, 64, 64]);
        assert_eq!(b.cls_logits.shape(), &[1, 2]);
        assert!(b.seg_logits.all_finite() && b.cls_logits.all_finite());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = Model::random(&small(), 1).unwrap();
        assert!(m.forward(&input(0, 48)).is_err());
        assert!(m.forward(&Tensor::zeros([1, 1, 64, 64])).is_err());
    }

    #[test]
    fn fused_model_matches_branched() {
        let m = Model::random(&small(), 3).unwrap();
        let f = m.fuse().unwrap();
        assert_eq!(f.mode, Mode::Fused);
        let x = input(5, 64);
        let d = m.forward(&x).unwrap().max_abs_diff(&f.forward(&x).unwrap()).unwrap();
        assert!(d <= 1e-4, "{d}");
    }

    #[test]
    fn container_round_trip_rebuilds_identical_model() {
        let cfg = small();
        let m = Model::random(&cfg, 8).unwrap();
        let c = m.to_container().unwrap();
        let back = Model::from_container(&cfg, &c).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fused_container_has_no_norm_or_scale_records() {
        let cfg = small();
        let branched = Model::random(&cfg, 2).unwrap().to_container().unwrap();
        let fused = fuse_weights(&cfg, &branched).unwrap();
        assert_eq!(fused.mode, Mode::Fused);
        for name in fused.names() {
            assert!(!name.contains(".bn.") && !name.ends_with("layer_scale") && !name.contains(".branches."), "{name}");
        }
        for name in fused.names().filter(|n| n.contains(".attn.") || n.contains("ffn.fc") || n.starts_with("cls_head.fc")) {
            assert_eq!(fused.get(name), branched.get(name), "{name}");
        }
        assert!(fuse_weights(&cfg, &fused).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Model::random(&small(), 4).unwrap();
        let mut stats = AttentionStats::default();
        m.forward_traced(&input(1, 64), Some(&mut stats)).unwrap();
        assert!(stats.rows > 0);
        assert!(stats.max_row_sum_error <= 1e-6, "{}", stats.max_row_sum_error);
    }

    #[test]
    fn extra_or_missing_tensors_are_rejected() {
        let cfg = small();
        let mut c = Model::random(&cfg, 1).unwrap().to_container().unwrap();
        c.insert("stray".to_string(), Tensor::zeros([1])).unwrap();
        assert!(matches!(Model::from_container(&cfg, &c), Err(Error::UnexpectedTensors(_))));

        let mut k1 = cfg.clone();
        k1.model.branches = 3;
        let c2 = Model::random(&cfg, 1).unwrap().to_container().unwrap();
        assert!(matches!(
            Model::from_container(&k1, &c2),
            Err(Error::MissingTensor(_) | Error::TensorShape { .. })
        ));
        let mut deeper = cfg.clone();
        deeper.model.depths[3] = 3;
        assert!(matches!(Model::from_container(&deeper, &c2), Err(Error::MissingTensor(_))));
    }
}
