//! Command-line front end. Exit codes: 0 success, 1 verification failure,
//! 2 usage or format error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{mask_from_logits, preprocess, Image};
use crate::metrics::{bench_latency, complexity, ConfusionMatrix, EvalReport};
use crate::model::{fuse_weights, Mode, Model};
use crate::reparam::{verify_equivalence, RepConv, DEFAULT_TOLERANCE};
use crate::tensor::{resize_bilinear, softmax_rows, Tensor};
use crate::weights::{RandomInit, SplitMix64, WeightContainer};

pub const CLS_LABELS: [&str; 2] = ["male", "female"];

#[derive(Debug, Parser)]
#[command(name = "weedrep", version, about = "Reparameterizable multi-task ViT: inference, fusion and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default run configuration as JSON.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate deterministic branched-mode weights.
    RandWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Draw biases, BN affine terms and layer scales at order one.
        #[arg(long)]
        stress: bool,
    },
    /// Collapse a branched container into a fused one.
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check branched and fused weights compute the same function.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Branched-mode container.
        #[arg(long)]
        weights: PathBuf,
        /// Fused container to check; fused in memory when omitted.
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Parameter and FLOP counts in both modes.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Time forward passes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "fused")]
        mode: Mode,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Segment and classify one PPM image.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask_out: PathBuf,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Score predicted masks and labels against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// CSV with columns image,gt,pred.
        #[arg(long)]
        labels_csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

enum Outcome {
    Ok,
    VerifyFailed,
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code. Diagnostics go to stderr as a single line.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::VerifyFailed) => 1,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            2
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Loads weights, fusing when a branched container is asked for in fused mode.
fn load_model(cfg: &RunConfig, path: &Path, want: Option<Mode>) -> Result<Model> {
    let container = WeightContainer::load(path)?;
    let model = Model::from_container(cfg, &container)?;
    match (want, model.mode) {
        (Some(Mode::Fused), Mode::Branched) => model.fuse(),
        (Some(Mode::Branched), Mode::Fused) => Err(Error::WrongMode {
            expected: Mode::Branched.to_string(),
            found: Mode::Fused.to_string(),
        }),
        _ => Ok(model),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::InitConfig { out } => {
            let text = RunConfig::default().to_json();
            match out {
                Some(p) => write_text(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::RandWeights {
            config,
            seed,
            out,
            stress,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            let model = if stress {
                Model::build(&cfg, Mode::Branched, &mut RandomInit::stress(seed))?
            } else {
                Model::random(&cfg, seed)?
            };
            let c = model.to_container()?;
            c.save(&out)?;
            println!("tensors={}\nparams={}\nmode=branched", c.len(), c.element_count());
        }
        Command::Fuse { config, input, out } => {
            let cfg = load_config(config.as_deref())?;
            let fused = fuse_weights(&cfg, &WeightContainer::load(&input)?)?;
            fused.save(&out)?;
            println!("tensors={}\nparams={}\nmode=fused", fused.len(), fused.element_count());
        }
        Command::Verify {
            config,
            weights,
            fused,
            size,
            trials,
            tol,
            seed,
            json,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            let branched = load_model(&cfg, &weights, Some(Mode::Branched))?;
            let fused = match fused {
                Some(p) => load_model(&cfg, &p, None)?,
                None => branched.fuse()?,
            };
            if fused.mode != Mode::Fused {
                return Err(Error::WrongMode {
                    expected: Mode::Fused.to_string(),
                    found: fused.mode.to_string(),
                });
            }
            let report = verify_models(&branched, &fused, size, trials, seed, tol)?;
            if json {
                println!("{}", to_json(&report));
            } else {
                println!("{}", report.to_kv());
            }
            if !report.pass {
                return Ok(Outcome::VerifyFailed);
            }
        }
        Command::Count {
            config,
            weights,
            size,
            json,
        } => {
            let cfg = load_config(config.as_deref())?;
            let size = size.unwrap_or(cfg.input_size);
            let branched = match weights {
                Some(p) => load_model(&cfg, &p, Some(Mode::Branched))?,
                None => Model::random(&cfg, cfg.seed)?,
            };
            let shape = [1, cfg.model.in_channels, size, size];
            let b = complexity(&branched, shape)?;
            let f = complexity(&branched.fuse()?, shape)?;
            if json {
                println!("{}", to_json(&[&b, &f]));
            } else {
                println!("{}\n\n{}", b.to_kv(), f.to_kv());
                println!("\nflop_ratio={:.3}", b.flops as f64 / f.flops as f64);
            }
        }
        Command::Bench {
            config,
            weights,
            mode,
            size,
            iters,
            warmup,
            seed,
            json,
        } => {
            let cfg = load_config(config.as_deref())?;
            let size = size.unwrap_or(cfg.input_size);
            let seed = seed.unwrap_or(cfg.seed);
            let model = match weights {
                Some(p) => load_model(&cfg, &p, Some(mode))?,
                None => {
                    let m = Model::random(&cfg, seed)?;
                    if mode == Mode::Fused {
                        m.fuse()?
                    } else {
                        m
                    }
                }
            };
            let r = bench_latency(&model, [1, cfg.model.in_channels, size, size], warmup, iters, seed)?;
            if json {
                println!("{}", to_json(&r));
            } else {
                println!("{}", r.to_kv());
            }
        }
        Command::Infer {
            config,
            weights,
            image,
            mask_out,
            json_out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(&cfg, &weights, None)?;
            let img = Image::load(&image)?;
            let out = model.forward(&preprocess(&img, cfg.input_size)?)?;
            let logits = resize_bilinear(&out.seg_logits, img.height, img.width)?;
            mask_from_logits(&logits)?.save(&mask_out)?;
            let probs = softmax_rows(&out.cls_logits)?;
            let probabilities: Vec<f64> = probs.data().iter().map(|&p| p as f64).collect();
            let best = argmax(probs.data());
            let label = CLS_LABELS.get(best).map(|s| s.to_string()).unwrap_or_else(|| best.to_string());
            let text = to_json(&Classification { probabilities, label });
            match json_out {
                Some(p) => write_text(&p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            labels_csv,
            json,
        } => {
            let seg = eval_masks(&pred_dir, &gt_dir)?;
            let cls = match labels_csv {
                Some(p) => eval_labels(&p)?,
                None => ConfusionMatrix::new(2),
            };
            let report = EvalReport::new(&seg, &cls)?;
            if json {
                println!("{}", to_json(&report));
            } else {
                println!("{}", report.to_kv());
            }
        }
    }
    Ok(Outcome::Ok)
}

fn argmax(v: &[f32]) -> usize {
    (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Classification {
    pub probabilities: Vec<f64>,
    pub label: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub max_abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub trials: usize,
    pub blocks: Vec<CheckResult>,
    pub model: CheckResult,
    pub max_abs_diff: f64,
    pub pass: bool,
}

impl VerifyReport {
    pub fn to_kv(&self) -> String {
        let mut out: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("block.{}={:.3e} {}", b.name, b.max_abs_diff, if b.pass { "pass" } else { "FAIL" }))
            .collect();
        out.push(format!("model_max_abs_diff={:.3e}", self.model.max_abs_diff));
        out.push(format!("max_abs_diff={:.3e}", self.max_abs_diff));
        out.push(format!("tolerance={:e}", self.tolerance));
        out.push(format!("result={}", if self.pass { "pass" } else { "fail" }));
        out.join("\n")
    }
}

/// Side of the square maps the per-block checks run on.
const BLOCK_SIDE: usize = 16;

/// Compares every reparameterizable block pairwise, then the whole network
/// at `size x size`. Passes only if every check is within `tol`.
pub fn verify_models(
    branched: &Model,
    fused: &Model,
    size: usize,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<VerifyReport> {
    let a = branched.reps();
    let b = fused.reps();
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("{} vs {} reparameterizable blocks", a.len(), b.len())));
    }
    let mut blocks = Vec::with_capacity(a.len());
    for (i, ((name, ra), (nb, rb))) in a.iter().zip(&b).enumerate() {
        if name != nb {
            return Err(Error::Invalid(format!("block order differs: {name} vs {nb}")));
        }
        let shape = vec![1, ra.spec().in_channels, BLOCK_SIDE, BLOCK_SIDE];
        let r = verify_equivalence(
            |x: &Tensor| RepConv::forward(ra, x),
            |x: &Tensor| RepConv::forward(rb, x),
            &shape,
            trials,
            seed.wrapping_add(i as u64),
            tol,
        )?;
        blocks.push(CheckResult {
            name: name.clone(),
            input_shape: shape,
            max_abs_diff: r.max_abs_diff,
            pass: r.pass,
        });
    }

    let shape = vec![1, branched.config.model.in_channels, size, size];
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::from_fn(shape.clone(), |_| rng.uniform(-1.0, 1.0));
        let d = branched.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?;
        worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
    }
    let model = CheckResult {
        name: "model".into(),
        input_shape: shape,
        max_abs_diff: worst,
        pass: worst <= tol,
    };
    let max_abs_diff = blocks.iter().map(|b| b.max_abs_diff).fold(model.max_abs_diff, f64::max);
    let pass = model.pass && blocks.iter().all(|b| b.pass);
    Ok(VerifyReport {
        tolerance: tol,
        trials,
        blocks,
        model,
        max_abs_diff,
        pass,
    })
}

fn mask_classes(img: &Image, path: &Path) -> Result<Vec<usize>> {
    if img.channels != 1 {
        return Err(Error::Format(format!("{}: expected a grayscale mask", path.display())));
    }
    Ok(img.data.iter().map(|&v| usize::from(v > 127)).collect())
}

/// Pixel confusion matrix over every `.pgm` in `pred_dir` paired by file
/// name with `gt_dir`.
pub fn eval_masks(pred_dir: &Path, gt_dir: &Path) -> Result<ConfusionMatrix> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Invalid(format!("no .pgm masks in {}", pred_dir.display())));
    }
    let mut cm = ConfusionMatrix::new(2);
    for pred_path in names {
        let gt_path = gt_dir.join(pred_path.file_name().expect("file entry"));
        let pred = Image::load(&pred_path)?;
        let gt = Image::load(&gt_path)?;
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Format(format!(
                "{}: {}x{} prediction vs {}x{} ground truth",
                pred_path.display(),
                pred.width,
                pred.height,
                gt.width,
                gt.height
            )));
        }
        cm.add_all(&mask_classes(&gt, &gt_path)?, &mask_classes(&pred, &pred_path)?)?;
    }
    Ok(cm)
}

fn parse_label(s: &str) -> Result<usize> {
    let s = s.trim();
    if let Some(i) = CLS_LABELS.iter().position(|l| l.eq_ignore_ascii_case(s)) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(v) if v < CLS_LABELS.len() => Ok(v),
        _ => Err(Error::Format(format!("unknown class label `{s}`"))),
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    #[allow(dead_code)]
    image: String,
    gt: String,
    pred: String,
}

/// Sample confusion matrix from a CSV with columns `image,gt,pred`.
pub fn eval_labels(path: &Path) -> Result<ConfusionMatrix> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut cm = ConfusionMatrix::new(2);
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cm.add(parse_label(&row.gt)?, parse_label(&row.pred)?)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_by_name_or_index() {
        assert_eq!(parse_label("male").unwrap(), 0);
        assert_eq!(parse_label(" Female ").unwrap(), 1);
        assert_eq!(parse_label("1").unwrap(), 1);
        assert!(parse_label("2").is_err());
        assert!(parse_label("plant").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["weedrep", "frobnicate"]), 2);
        assert_eq!(cli_main(["weedrep", "fuse", "--bogus"]), 2);
        assert_eq!(cli_main(["weedrep", "fuse", "--in", "/nonexistent/x", "--out", "/nonexistent/y"]), 2);
    }
}
