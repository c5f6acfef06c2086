use std::path::Path;
use std::process::{Command, Output};

use weedrep::image::Image;
use weedrep::weights::WeightContainer;
use weedrep::{Mode, RunConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weedrep")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn init_config_round_trips_through_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    assert_eq!(run(&["init-config", "--out", &cfg]).status.code(), Some(0));
    let parsed = RunConfig::from_json(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(parsed, RunConfig::default());

    let printed = run(&["init-config"]);
    assert_eq!(RunConfig::from_json(&stdout(&printed)).unwrap(), parsed);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"model": {"embed_dimz": [1]}}"#).unwrap();
    let o = run(&["count", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn count_reports_both_modes() {
    let o = run(&["count", "--size", "512"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("params=3722916"), "{out}");
    assert!(out.contains("mode=branched") && out.contains("mode=fused"), "{out}");
}

#[test]
fn weights_fuse_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let (b, f) = (path(dir.path(), "b.wrf"), path(dir.path(), "f.wrf"));
    assert_eq!(run(&["rand-weights", "--seed", "4", "--out", &b]).status.code(), Some(0));
    assert_eq!(run(&["fuse", "--in", &b, "--out", &f]).status.code(), Some(0));
    assert_eq!(WeightContainer::load(Path::new(&f)).unwrap().mode, Mode::Fused);

    let o = run(&["verify", "--weights", &b, "--fused", &f, "--trials", "2", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["pass"], true);

    // A fused container cannot be fused again.
    assert_eq!(run(&["fuse", "--in", &f, "--out", &b]).status.code(), Some(2));
}

#[test]
fn infer_on_black_image_writes_matching_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (w, img, mask, js) = (
        path(dir.path(), "w.wrf"),
        path(dir.path(), "in.ppm"),
        path(dir.path(), "mask.pgm"),
        path(dir.path(), "cls.json"),
    );
    assert_eq!(run(&["rand-weights", "--out", &w]).status.code(), Some(0));
    Image::new(48, 40, 3, vec![0; 48 * 40 * 3]).unwrap().save(Path::new(&img)).unwrap();
    let o = run(&["infer", "--weights", &w, "--image", &img, "--mask-out", &mask, "--json-out", &js]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let m = Image::load(Path::new(&mask)).unwrap();
    assert_eq!((m.width, m.height, m.channels), (48, 40, 1));
    assert!(m.data.iter().all(|&v| v == 0 || v == 255));

    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    let probs: Vec<f64> = v["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 2);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(["male", "female"].contains(&v["label"].as_str().unwrap()));
}

#[test]
fn eval_scores_masks_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    Image::new(2, 2, 1, vec![255, 255, 0, 0]).unwrap().save(&pred.join("a.pgm")).unwrap();
    Image::new(2, 2, 1, vec![255, 0, 0, 0]).unwrap().save(&gt.join("a.pgm")).unwrap();
    let csv = path(dir.path(), "labels.csv");
    std::fs::write(&csv, "image,gt,pred\na,male,male\nb,female,male\nc,female,female\n").unwrap();

    let o = run(&[
        "eval",
        "--pred-dir",
        pred.to_str().unwrap(),
        "--gt-dir",
        gt.to_str().unwrap(),
        "--labels-csv",
        &csv,
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // Background IoU 2/3, foreground 1/2.
    assert!((v["miou"].as_f64().unwrap() - 7.0 / 12.0).abs() <= 1e-12);
    // Per-class F1 2/3 and 2/3.
    assert!((v["mf1"].as_f64().unwrap() - 2.0 / 3.0).abs() <= 1e-12);

    let missing = run(&["eval", "--pred-dir", pred.to_str().unwrap(), "--gt-dir", "/nonexistent"]);
    assert_eq!(missing.status.code(), Some(2));
}
