//! Single-file checkpoints: every parameter array (and optionally the Adam
//! moments) as a safetensors archive, with the model config and training
//! position in its metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use pcic_nn::optim::Adam;
use pcic_nn::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::model::{ModelConfig, PcicModel};
use crate::error::{Error, Result};

const FORMAT: &str = "pcic-checkpoint-1";
const META_KEY: &str = "pcic";
const FIRST: &str = "adam.first.";
const SECOND: &str = "adam.second.";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PcicModel,
    /// Training steps completed.
    pub step: u64,
    pub optimizer: Option<Adam<f32>>,
    /// Free-form string metadata (e.g. the training config).
    pub extra: BTreeMap<String, String>,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), le_bytes(t)))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.model.config)?);
        meta.insert("step".to_string(), self.step.to_string());
        if let Some(adam) = &self.optimizer {
            let state = AdamState {
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                steps: adam.steps,
            };
            meta.insert("adam".to_string(), serde_json::to_string(&state)?);
            for ((_, name, _), (m, v)) in store.iter().zip(adam.first.iter().zip(&adam.second)) {
                arrays.push((format!("{FIRST}{name}"), m.shape().to_vec(), le_bytes(m)));
                arrays.push((format!("{SECOND}{name}"), v.shape().to_vec(), le_bytes(v)));
            }
        }
        for (k, v) in &self.extra {
            meta.insert(format!("extra.{k}"), v.clone());
        }
        let views = arrays
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        // safetensors keeps metadata in a HashMap, whose key order varies
        // between processes; one key holding sorted JSON keeps files stable.
        let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize(views, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = |m: String| Error::Checkpoint(m);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ck(e.to_string()))?;
        let meta: BTreeMap<String, String> = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json)?,
            None => BTreeMap::new(),
        };
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(ck("not a pcic checkpoint".into()));
        }
        let config: ModelConfig =
            serde_json::from_str(meta.get("config").ok_or_else(|| ck("missing config".into()))?)?;
        let step = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ck("missing step".into()))?;
        let archive = SafeTensors::deserialize(bytes).map_err(|e| ck(e.to_string()))?;
        let read = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let view = archive
                .tensor(name)
                .map_err(|_| Error::ModelMismatch(format!("checkpoint lacks `{name}`")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape {
                return Err(Error::ModelMismatch(format!(
                    "`{name}` is {:?}{:?}, expected F32{shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(shape, data))
        };
        let template = PcicModel::new(config, 0)?;
        let mut store = ParamStore::new();
        for (_, name, t) in template.store.iter() {
            store.insert(name, read(name, t.shape())?);
        }
        let optimizer = match meta.get("adam") {
            Some(json) => {
                let s: AdamState = serde_json::from_str(json)?;
                let mut adam = Adam::new(&store, s.lr, s.beta1, s.beta2);
                adam.eps = s.eps;
                adam.steps = s.steps;
                for (i, (_, name, t)) in store.iter().enumerate() {
                    adam.first[i] = read(&format!("{FIRST}{name}"), t.shape())?;
                    adam.second[i] = read(&format!("{SECOND}{name}"), t.shape())?;
                }
                Some(adam)
            }
            None => None,
        };
        let extra = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self {
            model: PcicModel::with_store(config, store)?,
            step,
            optimizer,
            extra,
        })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}
