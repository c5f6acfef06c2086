use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::PredictionBundle;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub cls: f64,
}

fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn check_target(t: usize, classes: usize, what: &str) -> Result<()> {
    if t >= classes {
        return Err(Error::Invalid(format!("{what} label {t} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy of `(N, C, H, W)` logits against `N·H·W`
/// labels in sample-major, row-major order.
pub fn seg_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::Invalid(format!(
            "segmentation labels: expected {} entries, got {}",
            n * plane,
            labels.len()
        )));
    }
    let data = logits.data();
    let mut sum = 0.0;
    let mut z = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..plane {
            let t = labels[b * plane + p];
            check_target(t, c, "segmentation")?;
            for (ch, zc) in z.iter_mut().enumerate() {
                *zc = data[(b * c + ch) * plane + p] as f64;
            }
            sum += nll(&z, t);
        }
    }
    Ok(sum / labels.len() as f64)
}

/// Mean cross-entropy of `(N, C)` logits against `N` labels.
pub fn cls_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Invalid(format!("class labels: expected {n} entries, got {}", labels.len())));
    }
    let mut sum = 0.0;
    for (row, &t) in logits.data().chunks(c).zip(labels) {
        check_target(t, c, "classification")?;
        let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        sum += nll(&z, t);
    }
    Ok(sum / n as f64)
}

/// `seg + lambda * cls`.
pub fn multi_task_loss(
    bundle: &PredictionBundle,
    seg_labels: &[usize],
    cls_labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let seg = seg_cross_entropy(&bundle.seg_logits, seg_labels)?;
    let cls = cls_cross_entropy(&bundle.cls_logits, cls_labels)?;
    Ok(LossBreakdown {
        total: seg + lambda * cls,
        seg,
        cls,
    })
}
