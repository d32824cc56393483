use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcic_cli::config::GlobalConfig;
use pcic_core::dataset::Split;
use pcic_core::evaluation::{RdCurve, RdPoint};

const STEPS: u64 = 3;

fn pcic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pcic(args);
    assert!(
        out.status.success(),
        "pcic {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_curve(path: &Path, label: &str, points: &[(f64, f64)]) {
    let pts = points.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect();
    let curve = RdCurve::new(label, pts).unwrap();
    fs::write(path, serde_json::to_string(&curve).unwrap()).unwrap();
}

/// Fixture scenes with a config shrunk to a few training steps and two
/// sweep entries.
fn shrunk_fixture(dir: &Path) -> (PathBuf, GlobalConfig) {
    let cfg_path = PathBuf::from(ok(&["fixture", "--out", s(dir), "--seed", "3"]).trim());
    assert_eq!(cfg_path, dir.join("pcic.toml"));
    let mut cfg = GlobalConfig::from_toml(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.train.total_steps = STEPS;
    cfg.train.checkpoint_every = STEPS;
    cfg.train.batch_size = 2;
    cfg.eval.lambda_indices = vec![0, 3];
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let cfg = GlobalConfig::load(&cfg_path).unwrap();
    (cfg_path, cfg)
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = shrunk_fixture(dir.path());
    let config = s(&cfg_path);

    let manifests = ok(&["project", "--config", config]);
    assert_eq!(manifests.lines().count(), Split::ALL.len());

    let finals = ok(&["train", "--config", config]);
    let finals: Vec<&str> = finals.lines().collect();
    assert_eq!(finals.len(), 2);
    for f in &finals {
        assert!(f.ends_with(&format!("_{STEPS}.safetensors")), "{f}");
    }

    // Retraining from scratch reproduces the checkpoint byte for byte.
    let first = fs::read(finals[0]).unwrap();
    ok(&["train", "--config", config, "--lambda-index", "0"]);
    assert_eq!(fs::read(finals[0]).unwrap(), first);

    // Code one test frame through files and compare with the encoder's view.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.paths.manifest(Split::Test)).unwrap()).unwrap();
    let record = &manifest["records"][0];
    let image = record["image"].as_str().unwrap();
    let depth = record["depth"].as_str().unwrap();
    let roi = cfg.dataset.roi;
    let roi = format!("{},{},{},{}", roi.x, roi.y, roi.width, roi.height);
    let work = dir.path().join("coded");
    let (bin, recon, decoded) = (work.join("f.pcic"), work.join("recon.png"), work.join("dec.png"));
    let size: usize = ok(&[
        "compress", "--checkpoint", finals[1], "--image", image, "--depth", depth,
        "--roi", &roi, "--out", s(&bin), "--recon", s(&recon),
    ])
    .trim()
    .parse()
    .unwrap();
    assert_eq!(size as u64, fs::metadata(&bin).unwrap().len());
    let bytes = fs::read(&bin).unwrap();
    ok(&["compress", "--checkpoint", finals[1], "--image", image, "--depth", depth, "--roi", &roi, "--out", s(&bin)]);
    assert_eq!(fs::read(&bin).unwrap(), bytes);

    ok(&["decompress", "--checkpoint", finals[1], "--input", s(&bin), "--depth", depth, "--out", s(&decoded)]);
    assert_eq!(
        image_pixels(&decoded),
        image_pixels(&recon),
        "decoder output differs from the encoder reconstruction"
    );

    // A stream coded at one λ must not decode with another model.
    let out = pcic(&["decompress", "--checkpoint", finals[0], "--input", s(&bin), "--depth", depth, "--out", s(&decoded)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model mismatch"), "{}", String::from_utf8_lossy(&out.stderr));

    let curve = PathBuf::from(ok(&["eval", "--config", config]).trim());
    let zeros = PathBuf::from(ok(&["eval", "--config", config, "--zeros"]).trim());
    assert_ne!(curve, zeros);
    let loaded: RdCurve = serde_json::from_str(&fs::read_to_string(&curve).unwrap()).unwrap();
    assert_eq!(loaded.points.len(), 2);
    assert_eq!(ok(&["bdrate", s(&curve), s(&curve)]).trim(), "0.00%");

    let report = ok(&["report", "--config", config]);
    for f in report.lines() {
        assert!(Path::new(f).is_file(), "{f}");
    }
}

fn image_pixels(path: &Path) -> Vec<u8> {
    pcic_core::dataset::Image::load_png(path).unwrap().data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

#[test]
fn bdrate_of_identical_and_scaled_curves() {
    let dir = tempfile::tempdir().unwrap();
    let pts = [(0.1, 30.0), (0.2, 32.5), (0.4, 35.0), (0.8, 37.0)];
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_curve(&a, "a", &pts);
    write_curve(&b, "b", &pts.map(|(r, q)| (r * 1.1, q)));
    assert_eq!(ok(&["bdrate", s(&a), s(&a)]).trim(), "0.00%");
    assert_eq!(ok(&["bdrate", s(&b), s(&a)]).trim(), "+10.00%");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(pcic(&["project", "--config", s(&missing)]).status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch = 4\n").unwrap();
    let out = pcic(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));

    let mut cfg = GlobalConfig::default();
    cfg.train.patch = 1000;
    fs::write(&bad, cfg.to_toml()).unwrap();
    assert_eq!(pcic(&["train", "--config", s(&bad)]).status.code(), Some(2));

    let curve = dir.path().join("c.json");
    write_curve(&curve, "c", &[(0.1, 30.0), (0.2, 32.0)]);
    assert_eq!(pcic(&["bdrate", s(&curve), s(&missing)]).status.code(), Some(3));
    fs::write(&curve, "{}").unwrap();
    assert_eq!(pcic(&["bdrate", s(&curve), s(&curve)]).status.code(), Some(1));
}
