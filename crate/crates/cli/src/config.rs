//! Whole-run configuration, read from TOML.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pcic_core::codec::model::{Ablation, ModelConfig};
use pcic_core::codec::{CodecConfig, LAMBDAS};
use pcic_core::context::ContextNetConfig;
use pcic_core::dataset::{Camera, Roi, Split};
use pcic_core::projection::ProjectionConfig;
use pcic_core::training::TrainConfig;
use pcic_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root of the KITTI raw tree.
    pub dataset_root: PathBuf,
    /// Manifests, depth maps, checkpoints, evaluation logs and reports go
    /// under here.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_root: "data/kitti_raw".into(),
            work_dir: "work".into(),
        }
    }
}

impl Paths {
    pub fn manifest(&self, split: Split) -> PathBuf {
        self.work_dir.join("manifests").join(format!("{}.json", split.name()))
    }

    pub fn depth_dir(&self) -> PathBuf {
        self.work_dir.join("depth")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.work_dir.join("checkpoints")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work_dir.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.work_dir.join("report")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub camera: Camera,
    pub roi: Roi,
    /// Drive directory name → split.
    pub splits: BTreeMap<String, Split>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            camera: Camera::Left,
            roi: Roi::bottom_band(1242, 375, 256),
            splits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Models trained and evaluated by the sweep, as indices into the
    /// rate-distortion weights.
    pub lambda_indices: Vec<u8>,
    /// Curve the report's BD-Rates are measured against.
    pub anchor: Option<String>,
    /// `[row, base]` pairs that get a Δ column in the report.
    pub deltas: Vec<(String, String)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda_indices: (0..LAMBDAS.len() as u8).collect(),
            anchor: None,
            deltas: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    /// The one seed behind every random draw; copied into `train.seed`.
    pub seed: u64,
    pub ablation: Ablation,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub projection: ProjectionConfig,
    pub context: ContextNetConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        message: message.into(),
    }
}

impl GlobalConfig {
    pub fn from_toml(text: &str) -> pcic_core::Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(|| "<file>".to_string(), |s| format!("bytes {}..{}", s.start, s.end));
            invalid(&field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> pcic_core::Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are taken from the config file's directory
        let base = std::path::absolute(path)
            .map_err(Error::io(path))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for p in [&mut cfg.paths.dataset_root, &mut cfg.paths.work_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model config for one entry of the sweep.
    pub fn model(&self, lambda_index: u8) -> ModelConfig {
        let codec = CodecConfig {
            lambda_index,
            ..self.codec
        };
        ModelConfig::new(self.context, codec, self.ablation)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Check every section, plus the constraints that span sections.
    pub fn validate(&self) -> pcic_core::Result<()> {
        self.projection.validate()?;
        self.train.validate()?;
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(invalid("train.seed", "set the top-level `seed` instead"));
        }
        self.model(self.codec.lambda_index).validate()?;
        if self.codec.injection_sides != self.ablation.injection_sides() {
            return Err(invalid(
                "codec.injection_sides",
                format!("{:?} contradicts ablation `{}`", self.codec.injection_sides, self.ablation),
            ));
        }
        let roi = &self.dataset.roi;
        roi.check(self.projection.width, self.projection.height)
            .map_err(|e| invalid("dataset.roi", e.to_string()))?;
        if roi.width < self.train.patch || roi.height < self.train.patch {
            return Err(invalid(
                "train.patch",
                format!("{0}px patches do not fit the {1} crop", self.train.patch, roi),
            ));
        }
        if self.eval.lambda_indices.is_empty() {
            return Err(invalid("eval.lambda_indices", "must not be empty"));
        }
        if let Some(&k) = self.eval.lambda_indices.iter().find(|&&k| k as usize >= LAMBDAS.len()) {
            return Err(invalid("eval.lambda_indices", format!("{k} is out of range 0..{}", LAMBDAS.len())));
        }
        let mut seen = self.eval.lambda_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.eval.lambda_indices.len() {
            return Err(invalid("eval.lambda_indices", "contains duplicates"));
        }
        Ok(())
    }
}
