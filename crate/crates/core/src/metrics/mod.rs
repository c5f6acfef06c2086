//! Evaluation metrics, complexity accounting and latency benchmarking.

mod bench;
mod complexity;

pub use bench::{bench_latency, BenchReport};
pub use complexity::{complexity, count_flops, count_params, ComplexityReport, FlopBreakdown, FLOP_CONVENTION};

use serde::Serialize;

use crate::error::{Error, Result};

/// Square count matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From nested rows; every row must have as many entries as there are rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: n,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.classes || pred >= self.classes {
            return Err(Error::Invalid(format!(
                "label pair ({gt}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[gt * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Invalid(format!(
                "{} ground-truth labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        gt.iter().zip(pred).try_for_each(|(&g, &p)| self.add(g, p))
    }

    /// Elementwise sum, so shards can be evaluated independently.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Invalid(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// Per-class and macro-averaged scores. A class with no ground-truth
    /// samples gets `None` everywhere and is left out of the means.
    pub fn metrics(&self) -> Result<SegMetrics> {
        if self.total() == 0 {
            return Err(Error::Invalid("confusion matrix is empty".into()));
        }
        let mut m = SegMetrics::default();
        for c in 0..self.classes {
            let (tp, fp, fn_) = self.tp_fp_fn(c);
            if tp + fn_ == 0 {
                m.undefined_classes.push(c);
                m.per_class_iou.push(None);
                m.per_class_fscore.push(None);
                m.per_class_acc.push(None);
                continue;
            }
            let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
            m.per_class_iou.push(Some(tp / (tp + fp + fn_)));
            // Harmonic mean of precision and recall, written so that zero
            // precision with zero predictions stays defined.
            m.per_class_fscore.push(Some(2.0 * tp / (2.0 * tp + fp + fn_)));
            m.per_class_acc.push(Some(tp / (tp + fn_)));
        }
        m.miou = macro_mean(&m.per_class_iou);
        m.mfscore = macro_mean(&m.per_class_fscore);
        m.macc = macro_mean(&m.per_class_acc);
        Ok(m)
    }
}

fn macro_mean(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Scores as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SegMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_fscore: Vec<Option<f64>>,
    pub mfscore: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub macc: f64,
    pub undefined_classes: Vec<usize>,
}

/// Pixel-level segmentation scores plus sample-level classification F1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pixels: u64,
    pub samples: u64,
    pub miou: f64,
    pub mfscore: f64,
    pub macc: f64,
    pub mf1: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_fscore: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub undefined_seg_classes: Vec<usize>,
    pub undefined_cls_classes: Vec<usize>,
}

impl EvalReport {
    /// `cls` may be empty when no classification labels were given.
    pub fn new(seg: &ConfusionMatrix, cls: &ConfusionMatrix) -> Result<Self> {
        let s = seg.metrics()?;
        let c = if cls.total() > 0 { Some(cls.metrics()?) } else { None };
        Ok(Self {
            pixels: seg.total(),
            samples: cls.total(),
            miou: s.miou,
            mfscore: s.mfscore,
            macc: s.macc,
            mf1: c.as_ref().map(|c| c.mfscore),
            per_class_iou: s.per_class_iou,
            per_class_fscore: s.per_class_fscore,
            per_class_acc: s.per_class_acc,
            per_class_f1: c.as_ref().map(|c| c.per_class_fscore.clone()).unwrap_or_default(),
            undefined_seg_classes: s.undefined_classes,
            undefined_cls_classes: c.map(|c| c.undefined_classes).unwrap_or_default(),
        })
    }

    /// `key=value` lines, scores as percentages.
    pub fn to_kv(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let opt = |v: &Option<f64>| v.map(pct).unwrap_or_else(|| "undefined".into());
        let mut out = vec![
            format!("pixels={}", self.pixels),
            format!("samples={}", self.samples),
            format!("miou={}", pct(self.miou)),
            format!("mfscore={}", pct(self.mfscore)),
            format!("macc={}", pct(self.macc)),
            format!("mf1={}", opt(&self.mf1)),
        ];
        for (name, v) in [
            ("iou", &self.per_class_iou),
            ("fscore", &self.per_class_fscore),
            ("acc", &self.per_class_acc),
            ("f1", &self.per_class_f1),
        ] {
            for (c, x) in v.iter().enumerate() {
                out.push(format!("{name}.{c}={}", opt(x)));
            }
        }
        if !self.undefined_seg_classes.is_empty() {
            out.push(format!("undefined_seg_classes={:?}", self.undefined_seg_classes));
        }
        if !self.undefined_cls_classes.is_empty() {
            out.push(format!("undefined_cls_classes={:?}", self.undefined_cls_classes));
        }
        out.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = cm(&[[5, 0], [0, 7]]).metrics().unwrap();
        assert_eq!((m.miou, m.mfscore, m.macc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn symmetric_errors() {
        let m = cm(&[[3, 1], [1, 3]]).metrics().unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.6), Some(0.6)]);
        assert_eq!(m.per_class_fscore, vec![Some(0.75), Some(0.75)]);
        assert!((m.miou - 0.6).abs() < 1e-15);
        assert!((m.mfscore - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_predictor() {
        let m = cm(&[[4, 0], [4, 0]]).metrics().unwrap();
        assert_eq!(m.per_class_acc, vec![Some(1.0), Some(0.0)]);
        assert_eq!(m.macc, 0.5);
        assert_eq!(m.per_class_fscore[1], Some(0.0));
    }

    #[test]
    fn zero_support_class_is_flagged_and_excluded() {
        let m = cm(&[[6, 2], [0, 0]]).metrics().unwrap();
        assert_eq!(m.undefined_classes, vec![1]);
        assert_eq!(m.per_class_iou[1], None);
        assert_eq!(m.macc, 0.75);
        assert_eq!(m.miou, 0.75);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(ConfusionMatrix::new(2).metrics().is_err());
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = ConfusionMatrix::new(2);
        a.add_all(&[0, 1, 1], &[0, 0, 1]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.add_all(&[1, 0], &[1, 1]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, cm(&[[1, 1], [1, 2]]));
        assert_eq!(a.total(), 5);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
        assert!(a.add(2, 0).is_err());
    }

    #[test]
    fn kv_report_uses_percentages() {
        let seg = cm(&[[3, 1], [1, 3]]);
        let cls = cm(&[[1, 0], [0, 1]]);
        let kv = EvalReport::new(&seg, &cls).unwrap().to_kv();
        assert!(kv.contains("miou=60.00"));
        assert!(kv.contains("mfscore=75.00"));
        assert!(kv.contains("mf1=100.00"));
    }
}
