//! Rate-distortion training with the auxiliary prediction loss.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pcic_nn::optim::{clip_grad_norm, Adam};
use pcic_nn::{no_grad, Float, Params, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::checkpoint::Checkpoint;
use crate::codec::model::{Ablation, ForwardTrace, ModelConfig, Network, PcicModel};
use crate::context::prediction_loss;
use crate::dataset::{crop_roi, Camera, FrameRecord, Image, Roi};
use crate::error::{Error, Result};
use crate::projection::{degrade_scan, pair_depth, EqualizedDepthMap, ProjectionConfig};

/// Pixel values are in `[0, 1]`; the distortion weight is quoted for 8-bit.
const PIXEL_SCALE_SQ: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// `(first step, weight)` stages for the prediction loss. `None` places
    /// the default stages at 0, 50 % and 90 % of `total_steps`.
    pub alpha_schedule: Option<Vec<(u64, f64)>>,
    pub batch_size: usize,
    pub patch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// Global gradient-norm limit.
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    /// Stop the rate-distortion gradient at the prediction output.
    pub detach_prediction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1_000_000,
            alpha_schedule: None,
            batch_size: 8,
            patch: 256,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 10_000,
            detach_prediction: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Vec<(u64, f64)> {
        self.alpha_schedule.clone().unwrap_or_else(|| {
            let at = |f: f64| (self.total_steps as f64 * f).round() as u64;
            vec![(0, 0.01), (at(0.5), 0.005), (at(0.9), 0.0)]
        })
    }

    /// Prediction-loss weight in effect at `step`.
    pub fn alpha(&self, step: u64) -> f64 {
        self.schedule()
            .iter()
            .take_while(|(from, _)| *from <= step)
            .last()
            .map_or(0.0, |&(_, a)| a)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: &str| {
            Err(Error::InvalidConfig {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if self.total_steps == 0 {
            return err("total_steps", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.patch == 0 || !self.patch.is_multiple_of(64) {
            return err("patch", "must be a positive multiple of 64");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be positive and finite");
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(field, "must lie in [0, 1)");
            }
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm", "must be positive");
        }
        if self.checkpoint_every == 0 {
            return err("checkpoint_every", "must be positive");
        }
        let stages = self.schedule();
        if stages.first().map(|s| s.0) != Some(0) {
            return err("alpha_schedule", "first stage must start at step 0");
        }
        if stages.windows(2).any(|w| w[0].0 >= w[1].0) {
            return err("alpha_schedule", "stage steps must strictly increase");
        }
        if stages.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return err("alpha_schedule", "weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// Per-step generator: a function of `(seed, step)` only, so resumed runs
/// draw the same patches and noise.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Scalar parts of the loss, per pixel where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// Bits per pixel of the latents and hyper-latents.
    pub rate_y: f64,
    pub rate_z: f64,
    /// Mean squared error on the `[0, 1]` scale.
    pub mse: f64,
    pub prediction: f64,
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Float> {
    pub total: Var<T>,
    pub components: LossComponents,
    pub trace: ForwardTrace<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

fn scalar<T: Float>(v: &Var<T>) -> f64 {
    v.value().data()[0].f64()
}

/// `rate + λ·255²·mse + α·prediction` for one batch.
///
/// `target_seed` drives the color jitter of the prediction target; `rng`
/// drives the quantization noise.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Float>(
    net: &Network,
    p: &Params<T>,
    images: &Tensor<T>,
    depths: &Tensor<T>,
    weights: LossWeights,
    step: u64,
    target_seed: u64,
    rng: &mut dyn RngCore,
) -> Result<LossOutput<T>> {
    let (b, _, h, w) = images.dims4();
    let pixels = (b * h * w) as f64;
    let image = Var::constant(images.clone());
    let trace = net.forward_train(p, &image, depths, rng)?;
    let rate_y = trace.bits_y.mul_scalar(1.0 / pixels);
    let rate_z = trace.bits_z.mul_scalar(1.0 / pixels);
    let mse = trace.x_hat.mse(&image);
    let prediction = match &trace.c_pre {
        Some(pred) => Some(prediction_loss(pred, images, target_seed)?),
        None => None,
    };
    let mut total = rate_y.add(&rate_z).add(&mse.mul_scalar(weights.lambda * PIXEL_SCALE_SQ));
    if let Some(pre) = &prediction {
        total = total.add(&pre.mul_scalar(weights.alpha));
    }
    let components = LossComponents {
        total: scalar(&total),
        rate_y: scalar(&rate_y),
        rate_z: scalar(&rate_z),
        mse: scalar(&mse),
        prediction: prediction.as_ref().map_or(0.0, scalar),
        lambda: weights.lambda,
        alpha: weights.alpha,
    };
    for (component, v) in [
        ("rate_y", components.rate_y),
        ("rate_z", components.rate_z),
        ("mse", components.mse),
        ("prediction", components.prediction),
        ("total", components.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Divergence { step, component });
        }
    }
    Ok(LossOutput {
        total,
        components,
        trace,
    })
}

/// A cropped image with its aligned depth map.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub frame_id: String,
    pub image: Image,
    pub depth: EqualizedDepthMap,
}

impl LoadedFrame {
    /// Load a record cropped to `roi`. A stored depth map is used when the
    /// record has one; otherwise the scan is projected now.
    pub fn load(record: &FrameRecord, camera: Camera, roi: Roi, projection: &ProjectionConfig) -> Result<Self> {
        Self::load_with(record, camera, roi, projection, None)
    }

    /// As [`Self::load`]; with `degrade_voxel` the scan is voxel-degraded
    /// and projected afresh, ignoring any stored depth map.
    pub fn load_with(
        record: &FrameRecord,
        camera: Camera,
        roi: Roi,
        projection: &ProjectionConfig,
        degrade_voxel: Option<f64>,
    ) -> Result<Self> {
        let image = Image::load_png(&record.image)?.crop(&roi)?;
        let depth = match (&record.depth, degrade_voxel) {
            (Some(path), None) => EqualizedDepthMap::load_pgm(path)?,
            _ => {
                let mut pair = crop_roi(&record.load_pair(camera)?, roi)?;
                if let Some(voxel) = degrade_voxel {
                    pair.scan = degrade_scan(&pair.scan, voxel);
                }
                pair_depth(&pair, projection)?
            }
        };
        if (depth.width, depth.height) != (image.width, image.height) {
            return Err(Error::Shape(format!(
                "{}: depth {}×{} vs image {}×{}",
                record.frame_id, depth.width, depth.height, image.width, image.height
            )));
        }
        Ok(Self {
            frame_id: record.frame_id.clone(),
            image,
            depth,
        })
    }
}

/// Where one patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub frame: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, P, P]`.
    pub images: Tensor<f32>,
    /// `[B, 1, P, P]`, scaled into `[0, 1]`.
    pub depths: Tensor<f32>,
    pub windows: Vec<PatchWindow>,
}

/// Draws aligned image/depth patches from frames at least one patch large.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    frames: &'a [LoadedFrame],
    eligible: Vec<usize>,
    skipped: Vec<String>,
    patch: usize,
}

impl<'a> PatchSampler<'a> {
    pub fn new(frames: &'a [LoadedFrame], patch: usize) -> Result<Self> {
        let (mut eligible, mut skipped) = (vec![], vec![]);
        for (i, f) in frames.iter().enumerate() {
            if f.image.width >= patch && f.image.height >= patch {
                eligible.push(i);
            } else {
                log::warn!(
                    "skipped frame {}: {}×{} is smaller than a {patch}px patch",
                    f.frame_id,
                    f.image.width,
                    f.image.height
                );
                skipped.push(f.frame_id.clone());
            }
        }
        if eligible.is_empty() {
            return Err(Error::Shape(format!("no frame holds a {patch}×{patch} patch")));
        }
        Ok(Self {
            frames,
            eligible,
            skipped,
            patch,
        })
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// One window per sample: frame, then top row, then left column.
    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Batch {
        let p = self.patch;
        let mut images = Vec::with_capacity(size * 3 * p * p);
        let mut depths = Vec::with_capacity(size * p * p);
        let mut windows = Vec::with_capacity(size);
        for _ in 0..size {
            let frame = self.eligible[rng.gen_range(0..self.eligible.len())];
            let f = &self.frames[frame];
            let top = rng.gen_range(0..=f.image.height - p);
            let left = rng.gen_range(0..=f.image.width - p);
            let (w, h) = (f.image.width, f.image.height);
            for c in 0..3 {
                for y in top..top + p {
                    let row = c * h * w + y * w + left;
                    images.extend_from_slice(&f.image.data[row..row + p]);
                }
            }
            for y in top..top + p {
                let row = y * w + left;
                depths.extend(f.depth.values[row..row + p].iter().map(|&v| v as f32 / 255.0));
            }
            windows.push(PatchWindow { frame, top, left });
        }
        Batch {
            images: Tensor::from_vec(&[size, 3, p, p], images),
            depths: Tensor::from_vec(&[size, 1, p, p], depths),
            windows,
        }
    }
}

/// Convenience wrapper around [`PatchSampler`].
pub fn make_patch_batch(frames: &[LoadedFrame], size: usize, patch: usize, rng: &mut impl Rng) -> Result<Batch> {
    Ok(PatchSampler::new(frames, patch)?.batch(size, rng))
}

/// Short name used in checkpoint and metrics file names.
pub fn model_label(config: &ModelConfig) -> String {
    match (config.codec.conditional, config.ablation) {
        (false, _) => "baseline".into(),
        (true, Ablation::Full) => "pcic".into(),
        (true, a) => format!("pcic-{a}"),
    }
}

pub fn checkpoint_path(dir: &Path, label: &str, lambda: f64, step: u64) -> PathBuf {
    dir.join(format!("{label}_{lambda}_{step}.safetensors"))
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossComponents,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PcicModel,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    /// Metrics of the steps run by this call.
    pub history: Vec<StepMetrics>,
}

/// A fresh starting point for `config`.
pub fn initial_checkpoint(config: ModelConfig, train: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        model: PcicModel::new(config, train.seed)?,
        step: 0,
        optimizer: None,
        extra: Default::default(),
    })
}

/// Train from `start` until `cfg.total_steps`, writing checkpoints and a
/// JSONL metrics log into `out_dir`.
///
/// Resuming from a saved checkpoint reproduces the uninterrupted run
/// exactly. A non-finite loss aborts with [`Error::Divergence`]; checkpoints
/// already written are left in place.
pub fn train(start: Checkpoint, frames: &[LoadedFrame], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let sampler = PatchSampler::new(frames, cfg.patch)?;
    let Checkpoint {
        mut model,
        step: first_step,
        optimizer,
        mut extra,
    } = start;
    model.net.detach_prediction = cfg.detach_prediction;
    let lambda = model.config.codec.lambda();
    let label = model_label(&model.config);
    let mut adam = optimizer
        .unwrap_or_else(|| Adam::new(&model.store, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2));
    extra.insert("train".into(), serde_json::to_string(cfg)?);

    let metrics_path = out_dir.join(format!("{label}_{lambda}.metrics.jsonl"));
    let file = if first_step == 0 {
        File::create(&metrics_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    }
    .map_err(Error::io(&metrics_path))?;
    let mut log_file = BufWriter::new(file);

    let mut history = vec![];
    let mut checkpoints = vec![];
    for step in first_step..cfg.total_steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = sampler.batch(cfg.batch_size, &mut rng);
        let target_seed = rng.next_u64();
        let weights = LossWeights {
            lambda,
            alpha: cfg.alpha(step),
        };
        let p = model.store.vars();
        let out = total_loss(&model.net, &p, &batch.images, &batch.depths, weights, step, target_seed, &mut rng)?;
        let mut grads = p.gradients(&out.total.backward());
        drop(p);
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                component: "gradient",
            });
        }
        adam.step(&mut model.store, &grads);

        let metrics = StepMetrics {
            step: step + 1,
            grad_norm,
            loss: out.components,
        };
        writeln!(log_file, "{}", serde_json::to_string(&metrics)?).map_err(Error::io(&metrics_path))?;
        log::debug!("step {} loss {:.5}", step + 1, metrics.loss.total);
        history.push(metrics);

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            log_file.flush().map_err(Error::io(&metrics_path))?;
            let path = checkpoint_path(out_dir, &label, lambda, done);
            let ck = Checkpoint {
                model,
                step: done,
                optimizer: Some(adam),
                extra,
            };
            ck.save(&path)?;
            log::info!("wrote {}", path.display());
            checkpoints.push(path);
            (model, adam, extra) = (ck.model, ck.optimizer.expect("just set"), ck.extra);
        }
    }
    log_file.flush().map_err(Error::io(&metrics_path))?;
    model.net.detach_prediction = false;
    Ok(TrainOutcome {
        model,
        checkpoints,
        metrics_path,
        history,
    })
}

/// Mean rate-distortion loss (`rate + λ·255²·mse`, no prediction term) over
/// the largest 64-aligned top-left window of each frame, with fixed noise.
pub fn validation_loss(model: &PcicModel, frames: &[LoadedFrame], seed: u64) -> Result<f64> {
    let _guard = no_grad();
    let p = model.store.vars();
    let weights = LossWeights {
        lambda: model.config.codec.lambda(),
        alpha: 0.0,
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, f) in frames.iter().enumerate() {
        let (h, w) = (f.image.height / 64 * 64, f.image.width / 64 * 64);
        if h == 0 || w == 0 {
            continue;
        }
        let image = Tensor::from_vec(&[1, 3, f.image.height, f.image.width], f.image.data.clone()).crop(0, 0, h, w);
        let depth = Tensor::from_vec(&[1, 1, f.depth.height, f.depth.width], f.depth.to_unit()).crop(0, 0, h, w);
        let mut rng = step_rng(seed, i as u64);
        let out = total_loss(&model.net, &p, &image, &depth, weights, 0, 0, &mut rng)?;
        sum += out.components.total;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Shape("no validation frame is 64×64 or larger".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::tests::tiny;

    fn frames(n: usize, w: usize, h: usize) -> Vec<LoadedFrame> {
        (0..n)
            .map(|k| LoadedFrame {
                frame_id: format!("s/{k}"),
                image: Image::new(
                    w,
                    h,
                    (0..3 * w * h).map(|i| ((i * 7 + k * 13) % 97) as f32 / 96.0).collect(),
                ),
                depth: EqualizedDepthMap {
                    width: w,
                    height: h,
                    values: (0..w * h).map(|i| ((i * 5 + k) % 256) as u8).collect(),
                },
            })
            .collect()
    }

    #[test]
    fn default_schedule_scales_with_length() {
        let cfg = TrainConfig {
            total_steps: 1_000_000,
            ..Default::default()
        };
        assert_eq!(cfg.schedule(), vec![(0, 0.01), (500_000, 0.005), (900_000, 0.0)]);
        assert_eq!(cfg.alpha(0), 0.01);
        assert_eq!(cfg.alpha(499_999), 0.01);
        assert_eq!(cfg.alpha(500_000), 0.005);
        assert_eq!(cfg.alpha(900_000), 0.0);
        let short = TrainConfig {
            total_steps: 20,
            ..Default::default()
        };
        assert_eq!(short.schedule(), vec![(0, 0.01), (10, 0.005), (18, 0.0)]);
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = TrainConfig {
            alpha_schedule: Some(vec![(5, 0.01)]),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.alpha_schedule = Some(vec![(0, 0.01), (0, 0.0)]);
        assert!(cfg.validate().is_err());
        cfg.alpha_schedule = Some(vec![(0, -1.0)]);
        assert!(cfg.validate().is_err());
        cfg.alpha_schedule = None;
        cfg.patch = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patches_align_image_and_depth() {
        let fs = frames(2, 150, 80);
        let b = make_patch_batch(&fs, 8, 64, &mut step_rng(1, 0)).unwrap();
        assert_eq!(b.images.shape(), &[8, 3, 64, 64]);
        assert_eq!(b.depths.shape(), &[8, 1, 64, 64]);
        for (i, win) in b.windows.iter().enumerate() {
            let f = &fs[win.frame];
            for (y, x) in [(0, 0), (63, 63), (10, 41)] {
                let (fy, fx) = (win.top + y, win.left + x);
                let img = b.images.data()[((i * 3 + 2) * 64 + y) * 64 + x];
                assert_eq!(img, f.image.data[(2 * 80 + fy) * 150 + fx]);
                let d = b.depths.data()[(i * 64 + y) * 64 + x];
                assert_eq!(d, f.depth.values[fy * 150 + fx] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn small_frames_are_skipped() {
        let mut fs = frames(1, 64, 64);
        fs.extend(frames(1, 40, 200));
        fs[1].frame_id = "small".into();
        let sampler = PatchSampler::new(&fs, 64).unwrap();
        assert_eq!(sampler.skipped(), &["small".to_string()]);
        let b = sampler.batch(4, &mut step_rng(0, 0));
        assert!(b.windows.iter().all(|w| w.frame == 0 && w.top == 0 && w.left == 0));
        assert!(PatchSampler::new(&fs[1..], 64).is_err());
    }

    #[test]
    fn components_add_up() {
        let model = PcicModel::new(tiny(Ablation::Full), 2).unwrap();
        let b = make_patch_batch(&frames(1, 64, 64), 2, 64, &mut step_rng(0, 0)).unwrap();
        let w = LossWeights {
            lambda: 0.016,
            alpha: 0.01,
        };
        let p = model.store.vars();
        let out = total_loss(&model.net, &p, &b.images, &b.depths, w, 0, 3, &mut step_rng(0, 1)).unwrap();
        let c = out.components;
        let expect = c.rate_y + c.rate_z + 0.016 * 65025.0 * c.mse + 0.01 * c.prediction;
        assert!((c.total - expect).abs() <= 1e-4 * expect.abs());
        assert!(c.prediction > 0.0);
    }

    #[test]
    fn no_prediction_term_without_prediction_stage() {
        let model = PcicModel::new(tiny(Ablation::NoPip), 2).unwrap();
        let b = make_patch_batch(&frames(1, 64, 64), 1, 64, &mut step_rng(0, 0)).unwrap();
        let p = model.store.vars();
        let w = LossWeights { lambda: 0.004, alpha: 0.01 };
        let out = total_loss(&model.net, &p, &b.images, &b.depths, w, 0, 3, &mut step_rng(0, 1)).unwrap();
        assert_eq!(out.components.prediction, 0.0);
    }

    #[test]
    fn non_finite_input_is_divergence() {
        let model = PcicModel::new(tiny(Ablation::Full), 2).unwrap();
        let b = make_patch_batch(&frames(1, 64, 64), 1, 64, &mut step_rng(0, 0)).unwrap();
        let images = b.images.map(|_| f32::NAN);
        let p = model.store.vars();
        let w = LossWeights { lambda: 0.004, alpha: 0.0 };
        let err = total_loss(&model.net, &p, &images, &b.depths, w, 9, 3, &mut step_rng(0, 1)).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 9, .. }));
    }

    #[test]
    fn resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let fs = frames(2, 64, 128);
        let cfg = TrainConfig {
            total_steps: 4,
            batch_size: 1,
            patch: 64,
            checkpoint_every: 2,
            seed: 11,
            ..Default::default()
        };
        let config = tiny(Ablation::Full);
        let whole = train(initial_checkpoint(config, &cfg).unwrap(), &fs, &cfg, &dir.path().join("a")).unwrap();
        assert_eq!(whole.checkpoints.len(), 2);
        let mid = Checkpoint::load(&whole.checkpoints[0]).unwrap();
        assert_eq!(mid.step, 2);
        let resumed = train(mid, &fs, &cfg, &dir.path().join("b")).unwrap();
        assert_eq!(resumed.history.len(), 2);
        assert_eq!(resumed.history[..], whole.history[2..]);
        for ((_, _, a), (_, _, b)) in resumed.model.store.iter().zip(whole.model.store.iter()) {
            assert_eq!(a, b);
        }
        let lines = fs::read_to_string(&whole.metrics_path).unwrap();
        assert_eq!(lines.lines().count(), 4);
        assert!(whole.checkpoints[1].ends_with("pcic_0.016_4.safetensors"));
    }
}
