//! One function per subcommand; `main` only parses flags and maps errors
//! to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcic_core::codec::bitstream::Bitstream;
use pcic_core::codec::checkpoint::Checkpoint;
use pcic_core::codec::model::PcicModel;
use pcic_core::codec::LAMBDAS;
use pcic_core::dataset::{build_manifest, crop_roi, DatasetManifest, Image, Roi, Split};
use pcic_core::evaluation::{self, bd_rate, emit_report, EvalOptions, RdCurve, ReportFiles, ReportSpec};
use pcic_core::fixture::{generate_fixture, FixtureSpec};
use pcic_core::projection::{degrade_scan, pair_depth, EqualizedDepthMap};
use pcic_core::training::{self, checkpoint_path, initial_checkpoint, model_label, LoadedFrame};
use pcic_core::Error;

use crate::config::GlobalConfig;

/// Process exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if matches!(e, Error::InvalidConfig { .. }) {
                return 2;
            }
            if e.is_missing_file() {
                return 3;
            }
        }
    }
    1
}

/// Fail with a not-found error (exit 3) before doing any work.
pub fn require_file(path: &Path) -> pcic_core::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))?;
    Ok(())
}

/// Settings for the bundled synthetic scenes: small networks, 64px patches
/// and a 500-step sweep.
pub fn fixture_config(dataset_root: &Path, splits: &std::collections::BTreeMap<String, Split>, roi: Roi, seed: u64) -> GlobalConfig {
    let mut cfg = GlobalConfig {
        seed,
        ..Default::default()
    };
    cfg.paths.dataset_root = dataset_root.to_path_buf();
    cfg.paths.work_dir = "work".into();
    cfg.dataset.splits = splits.clone();
    cfg.dataset.roi = roi;
    cfg.context.c_channels = 8;
    cfg.context.c_hyper_channels = 8;
    cfg.context.pip_width = 8;
    cfg.codec.n_channels = 16;
    cfg.codec.m_channels = 16;
    cfg.train.total_steps = 500;
    cfg.train.patch = 64;
    cfg.train.checkpoint_every = 250;
    cfg
}

/// Generate the synthetic scenes under `out/kitti_raw` and a matching
/// `out/pcic.toml`; returns the config path.
pub fn fixture(out: &Path, seed: u64) -> Result<PathBuf> {
    let root = out.join("kitti_raw");
    let fx = generate_fixture(
        &root,
        &FixtureSpec {
            seed,
            ..Default::default()
        },
    )?;
    let cfg = fixture_config(Path::new("kitti_raw"), &fx.splits, fx.roi, seed);
    let path = out.join("pcic.toml");
    write_file(&path, cfg.to_toml().as_bytes())?;
    log::info!("wrote {} scenes and {}", fx.splits.len(), path.display());
    Ok(path)
}

fn depth_path(dir: &Path, frame_id: &str) -> PathBuf {
    dir.join(format!("{frame_id}.pgm"))
}

/// Build manifests and store one cropped depth map per frame. With
/// `degrade_voxel` the scans are voxel-degraded first and the outputs go to
/// separate `-voxel-<size>` directories.
pub fn project(cfg: &GlobalConfig, degrade_voxel: Option<f64>) -> Result<Vec<PathBuf>> {
    if cfg.dataset.splits.is_empty() {
        return Err(Error::InvalidConfig {
            field: "dataset.splits".into(),
            message: "no scene is assigned to a split".into(),
        }
        .into());
    }
    require_file(&cfg.paths.dataset_root)?;
    let manifests = build_manifest(&cfg.paths.dataset_root, &cfg.dataset.splits, cfg.dataset.camera, cfg.dataset.roi)?;
    let suffix = degrade_voxel.map_or(String::new(), |v| format!("-voxel-{v}"));
    let depth_dir = PathBuf::from(format!("{}{suffix}", cfg.paths.depth_dir().display()));
    let mut written = vec![];
    for (split, mut manifest) in manifests {
        for record in &mut manifest.records {
            let mut pair = crop_roi(&record.load_pair(cfg.dataset.camera)?, cfg.dataset.roi)?;
            if let Some(v) = degrade_voxel {
                pair.scan = degrade_scan(&pair.scan, v);
            }
            let depth = pair_depth(&pair, &cfg.projection)?;
            let path = depth_path(&depth_dir, &record.frame_id);
            write_file(&path, &depth.to_pgm())?;
            record.depth = Some(path);
        }
        let path = PathBuf::from(format!(
            "{}{suffix}.json",
            cfg.paths.manifest(split).with_extension("").display()
        ));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        manifest.save(&path)?;
        log::info!("{}: {} frames → {}", split.name(), manifest.records.len(), path.display());
        written.push(path);
    }
    Ok(written)
}

fn load_manifest(cfg: &GlobalConfig, split: Split) -> Result<DatasetManifest> {
    let path = cfg.paths.manifest(split);
    require_file(&path).context("run `pcic project` first")?;
    Ok(DatasetManifest::load(&path)?)
}

fn load_frames(cfg: &GlobalConfig, manifest: &DatasetManifest, degrade_voxel: Option<f64>) -> Result<Vec<LoadedFrame>> {
    manifest
        .records
        .iter()
        .map(|r| LoadedFrame::load_with(r, manifest.camera, manifest.roi, &cfg.projection, degrade_voxel))
        .collect::<pcic_core::Result<_>>()
        .map_err(Into::into)
}

fn sweep(cfg: &GlobalConfig, lambda_index: Option<u8>) -> Vec<u8> {
    lambda_index.map_or_else(|| cfg.eval.lambda_indices.clone(), |k| vec![k])
}

/// Train one model per λ of the sweep; returns the final checkpoints.
pub fn train(cfg: &GlobalConfig, lambda_index: Option<u8>, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg, Split::Train)?;
    let frames = load_frames(cfg, &manifest, None)?;
    let train_cfg = cfg.train_config();
    let out_dir = cfg.paths.checkpoint_dir();
    let indices = sweep(cfg, lambda_index);
    if resume.is_some() && indices.len() != 1 {
        bail!("--resume needs a single --lambda-index");
    }
    let mut finals = vec![];
    for k in indices {
        let model_cfg = cfg.model(k);
        let start = match resume {
            Some(path) => {
                require_file(path)?;
                let ck = Checkpoint::load(path)?;
                if ck.model.config != model_cfg {
                    return Err(Error::ModelMismatch(format!("{} was trained with a different config", path.display())).into());
                }
                ck
            }
            None => initial_checkpoint(model_cfg, &train_cfg)?,
        };
        log::info!("training {} at λ = {} from step {}", model_label(&model_cfg), LAMBDAS[k as usize], start.step);
        let outcome = training::train(start, &frames, &train_cfg, &out_dir)?;
        if let Some(last) = outcome.checkpoints.last() {
            finals.push(last.clone());
        }
    }
    Ok(finals)
}

fn load_model(path: &Path) -> Result<PcicModel> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?.model)
}

fn load_depth(depth: Option<&Path>, zeros: bool) -> Result<Option<EqualizedDepthMap>> {
    match (depth, zeros) {
        (Some(_), true) => bail!("--depth and --zeros are mutually exclusive"),
        (Some(p), false) => {
            require_file(p)?;
            Ok(Some(EqualizedDepthMap::load_pgm(p)?))
        }
        (None, _) => Ok(None),
    }
}

pub struct CompressArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub depth: Option<&'a Path>,
    pub zeros: bool,
    pub roi: Option<Roi>,
    pub out: &'a Path,
    /// Also write the encoder-side reconstruction here.
    pub recon: Option<&'a Path>,
}

/// Code one image; returns the stream size in bytes.
pub fn compress(args: &CompressArgs) -> Result<usize> {
    let model = load_model(args.checkpoint)?;
    require_file(args.image)?;
    let mut image = Image::load_png(args.image)?;
    if let Some(roi) = &args.roi {
        image = image.crop(roi)?;
    }
    let depth = load_depth(args.depth, args.zeros)?;
    if depth.is_none() && !args.zeros && model.net.routing.branch.is_some() {
        bail!("a conditional model needs --depth or --zeros");
    }
    let coded = model.compress(&image, depth.as_ref())?;
    let bytes = coded.stream.to_bytes();
    write_file(args.out, &bytes)?;
    if let Some(recon) = args.recon {
        coded.x_hat.save_png(recon)?;
    }
    log::info!(
        "{} bytes, {:.4} bpp",
        bytes.len(),
        evaluation::bpp(&coded.stream, image.height, image.width)
    );
    Ok(bytes.len())
}

pub fn decompress(checkpoint: &Path, input: &Path, depth: Option<&Path>, zeros: bool, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    require_file(input)?;
    let bytes = fs::read(input).map_err(Error::io(input))?;
    let stream = Bitstream::from_bytes(&bytes)?;
    let depth = load_depth(depth, zeros)?;
    let image = model.decompress(&stream, depth.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    image.save_png(out)?;
    Ok(())
}

/// Label of an evaluated curve: the model plus its input mode.
pub fn curve_label(cfg: &GlobalConfig, zeros: bool, degrade_voxel: Option<f64>) -> String {
    let mut label = model_label(&cfg.model(0));
    if zeros {
        label += "+zeros";
    }
    if let Some(v) = degrade_voxel {
        label += &format!("+voxel{v}");
    }
    label
}

/// Evaluate the trained sweep on the test split; returns the curve file.
pub fn eval(cfg: &GlobalConfig, lambda_index: Option<u8>, zeros: bool, degrade_voxel: Option<f64>) -> Result<PathBuf> {
    let manifest = load_manifest(cfg, Split::Test)?;
    let frames = load_frames(cfg, &manifest, degrade_voxel)?;
    let mut models = vec![];
    for k in sweep(cfg, lambda_index) {
        let want = cfg.model(k);
        let path = checkpoint_path(&cfg.paths.checkpoint_dir(), &model_label(&want), LAMBDAS[k as usize], cfg.train.total_steps);
        let model = load_model(&path)?;
        if model.config != want {
            return Err(Error::ModelMismatch(format!("{} does not match the configured model", path.display())).into());
        }
        models.push(model);
    }
    let label = curve_label(cfg, zeros, degrade_voxel);
    let opts = EvalOptions { zeros, degrade_voxel };
    let (curve, records) = evaluation::evaluate_sweep(&label, &models, &frames, opts)?;
    let dir = cfg.paths.eval_dir();
    let curve_path = dir.join(format!("{label}.curve.json"));
    write_file(&curve_path, serde_json::to_string_pretty(&curve)?.as_bytes())?;
    let mut lines = Vec::new();
    for r in &records {
        writeln!(lines, "{}", serde_json::to_string(r)?)?;
    }
    write_file(&dir.join(format!("{label}.frames.jsonl")), &lines)?;
    for p in &curve.points {
        log::info!("{label}: {:.4} bpp, {:.3} dB", p.bpp, p.psnr);
    }
    Ok(curve_path)
}

pub fn load_curve(path: &Path) -> Result<RdCurve> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let curve: RdCurve = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "curve",
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(curve.validated()?)
}

/// BD-Rate of `test` against `anchor`, in percent.
pub fn bdrate(test: &Path, anchor: &Path) -> Result<f64> {
    Ok(bd_rate(&load_curve(test)?, &load_curve(anchor)?)?)
}

pub fn format_percent(v: f64) -> String {
    if v == 0.0 {
        "0.00%".into()
    } else {
        format!("{v:+.2}%")
    }
}

/// Plot and tabulate the given curve files, or every curve in the
/// evaluation directory when none are given.
pub fn report(cfg: &GlobalConfig, files: &[PathBuf], anchor: Option<&str>, out: Option<&Path>) -> Result<ReportFiles> {
    let files = if files.is_empty() {
        let dir = cfg.paths.eval_dir();
        require_file(&dir)?;
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(Error::io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".curve.json"))
            .collect();
        found.sort();
        found
    } else {
        files.to_vec()
    };
    let curves = files.iter().map(|f| load_curve(f)).collect::<Result<Vec<_>>>()?;
    let Some(first) = curves.first() else {
        bail!("no curves to report");
    };
    let spec = ReportSpec {
        anchor: anchor
            .map(str::to_string)
            .or_else(|| cfg.eval.anchor.clone())
            .unwrap_or_else(|| first.label.clone()),
        deltas: cfg.eval.deltas.clone(),
    };
    let out = out.map_or_else(|| cfg.paths.report_dir(), Path::to_path_buf);
    Ok(emit_report(&curves, &spec, &out)?)
}
