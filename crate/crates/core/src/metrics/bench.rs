use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::Tensor;
use crate::weights::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub input_shape: [usize; 4],
    pub warmup_iters: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub fps: f64,
    /// Sum of all output logits of the first timed run.
    pub checksum: f64,
    /// Whether every timed run produced bit-identical outputs.
    pub deterministic: bool,
}

impl BenchReport {
    pub fn to_kv(&self) -> String {
        let s = self.input_shape;
        [
            format!("mode={}", self.mode),
            format!("input={}x{}x{}x{}", s[0], s[1], s[2], s[3]),
            format!("warmup_iters={}", self.warmup_iters),
            format!("iters={}", self.iters),
            format!("mean_ms={:.3}", self.mean_ms),
            format!("p50_ms={:.3}", self.p50_ms),
            format!("p90_ms={:.3}", self.p90_ms),
            format!("fps={:.2}", self.fps),
            format!("checksum={:.6e}", self.checksum),
            format!("deterministic={}", self.deterministic),
        ]
        .join("\n")
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `iters` forward passes on one fixed U(-1, 1) input drawn from
/// `seed`, after `warmup` untimed passes.
pub fn bench_latency(
    model: &Model,
    input_shape: [usize; 4],
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    if iters < 10 {
        return Err(Error::Invalid(format!("benchmark needs at least 10 iterations, got {iters}")));
    }
    let mut rng = SplitMix64::new(seed);
    let x = Tensor::from_fn(input_shape.to_vec(), |_| rng.uniform(-1.0, 1.0));
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut times = Vec::with_capacity(iters);
    let mut first = None;
    let mut deterministic = true;
    for _ in 0..iters {
        let t0 = Instant::now();
        let out = model.forward(&x)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        match &first {
            None => first = Some(out),
            Some(f) => deterministic &= *f == out,
        }
    }
    let first = first.expect("iters >= 10");
    let checksum = first
        .seg_logits
        .data()
        .iter()
        .chain(first.cls_logits.data())
        .map(|&v| v as f64)
        .sum();
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mode: model.mode,
        input_shape,
        warmup_iters: warmup,
        iters,
        mean_ms,
        p50_ms: percentile(&times, 0.5),
        p90_ms: percentile(&times, 0.9),
        fps: 1000.0 / mean_ms,
        checksum,
        deterministic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }
}
