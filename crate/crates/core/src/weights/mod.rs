//! Parameter sources for model construction: deterministic random
//! initialization and the on-disk weight container.

mod container;
mod rng;

pub use container::{WeightContainer, FORMAT_VERSION, MAGIC};
pub use rng::{fnv1a64, SplitMix64};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Role of a parameter, which decides how it is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    /// Convolution or linear weight with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    LayerScale,
    NormWeight,
    NormBias,
}

/// Supplies named tensors while a model is being assembled.
pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Kaiming-uniform weights, zero biases, unit BN gamma, zero BN beta,
    /// non-neutral BN running statistics and the configured layer scale.
    Standard,
    /// As `Standard`, but biases, BN affine terms and layer scales are also
    /// random and of order one, so no branch is numerically negligible.
    Stress,
}

/// Deterministic initializer; every tensor draws from its own SplitMix64
/// stream keyed by `(seed, name)`.
#[derive(Debug, Clone)]
pub struct RandomInit {
    pub seed: u64,
    pub layer_scale_init: f32,
    pub scheme: InitScheme,
}

impl RandomInit {
    pub fn new(seed: u64, layer_scale_init: f32) -> Self {
        Self {
            seed,
            layer_scale_init,
            scheme: InitScheme::Standard,
        }
    }

    pub fn stress(seed: u64) -> Self {
        Self {
            seed,
            layer_scale_init: 1.0,
            scheme: InitScheme::Stress,
        }
    }
}

impl ParamSource for RandomInit {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor> {
        let mut rng = SplitMix64::for_tensor(self.seed, name);
        let stress = self.scheme == InitScheme::Stress;
        let mut draw = |lo: f32, hi: f32| Tensor::from_fn(shape.to_vec(), |_| rng.uniform(lo, hi));
        Ok(match kind {
            ParamKind::Weight { fan_in } => {
                let a = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
                draw(-a, a)
            }
            ParamKind::BnMean => draw(-0.1, 0.1),
            ParamKind::BnVar => draw(0.5, 1.5),
            ParamKind::Bias | ParamKind::BnBeta if stress => draw(-0.1, 0.1),
            ParamKind::BnGamma | ParamKind::LayerScale if stress => draw(0.5, 1.5),
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::NormBias => Tensor::zeros(shape.to_vec()),
            ParamKind::BnGamma | ParamKind::NormWeight => Tensor::full(shape.to_vec(), 1.0),
            ParamKind::LayerScale => Tensor::full(shape.to_vec(), self.layer_scale_init),
        })
    }
}

/// Reads tensors out of a container and remembers which ones were used.
pub struct ContainerSource<'a> {
    container: &'a WeightContainer,
    used: HashSet<String>,
}

impl<'a> ContainerSource<'a> {
    pub fn new(container: &'a WeightContainer) -> Self {
        Self {
            container,
            used: HashSet::new(),
        }
    }

    /// Fails if the container holds tensors the model never asked for.
    pub fn finish(self) -> Result<()> {
        let extra: Vec<String> = self
            .container
            .names()
            .filter(|n| !self.used.contains(*n))
            .map(str::to_string)
            .collect();
        if extra.is_empty() {
            Ok(())
        } else {
            Err(Error::UnexpectedTensors(extra))
        }
    }
}

impl ParamSource for ContainerSource<'_> {
    fn take(&mut self, name: &str, shape: &[usize], _kind: ParamKind) -> Result<Tensor> {
        let t = self
            .container
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        self.used.insert(name.to_string());
        Ok(t.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn standard_init_values() {
        let mut init = RandomInit::new(3, 1e-5);
        let ls = init.take("x.layer_scale", &[4], ParamKind::LayerScale).unwrap();
        assert!(ls.data().iter().all(|&v| v == 1e-5));
        let var = init.take("x.bn.running_var", &[64], ParamKind::BnVar).unwrap();
        assert!(var.data().iter().all(|&v| (0.5..1.5).contains(&v)));
        let w = init.take("x.weight", &[16, 6], ParamKind::Weight { fan_in: 6 }).unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= 1.0));
        assert!(init.take("x.bias", &[3], ParamKind::Bias).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn container_source_tracks_usage() {
        let mut c = WeightContainer::new(Mode::Fused);
        c.insert("a", Tensor::zeros([2])).unwrap();
        c.insert("b", Tensor::zeros([3])).unwrap();
        let mut src = ContainerSource::new(&c);
        assert!(src.take("a", &[2], ParamKind::Bias).is_ok());
        assert!(matches!(src.take("a", &[3], ParamKind::Bias), Err(Error::TensorShape { .. })));
        assert!(matches!(src.take("z", &[1], ParamKind::Bias), Err(Error::MissingTensor(_))));
        assert!(matches!(src.finish(), Err(Error::UnexpectedTensors(v)) if v == vec!["b".to_string()]));
    }
}
