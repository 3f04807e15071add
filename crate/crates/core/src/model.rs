//! A trained denoiser bundled with its schedule and data transform, and the
//! on-disk checkpoint format (JSON manifest + little-endian `f64` blob).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Architecture, DenoiserParams};
use crate::error::{Error, Result};
use crate::io;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Isotropic affine map between data space and model space:
/// `model = (data − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTransform {
    pub shift: Vec<f64>,
    pub scale: f64,
}

impl DataTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Centers on the column means and divides by the RMS column std.
    pub fn standardize(points: &Tensor) -> Self {
        let (n, d) = (points.rows(), points.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(points.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = 0.0;
        for i in 0..n {
            var += points.row(i).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
        }
        let var = var / (n * d) as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { shift: mean, scale }
    }

    pub fn to_model(&self, points: &Tensor) -> Tensor {
        let mut out = points.clone();
        for i in 0..out.rows() {
            for (v, s) in out.row_mut(i).iter_mut().zip(&self.shift) {
                *v = (*v - s) / self.scale;
            }
        }
        out
    }

    pub fn to_data(&self, points: &Tensor) -> Tensor {
        let mut out = points.clone();
        for i in 0..out.rows() {
            for (v, s) in out.row_mut(i).iter_mut().zip(&self.shift) {
                *v = *v * self.scale + s;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub transform: DataTransform,
    /// Optimizer steps taken.
    pub step: usize,
    /// Hash of the training configuration that produced the weights.
    pub train_config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    architecture: Architecture,
    schedule_hash: String,
    train_config_hash: String,
    step: usize,
    param_count: usize,
    params_file: String,
    params_sha256: String,
    layers: Vec<LayerEntry>,
    transform: DataTransform,
    schedule: NoiseSchedule,
}

const CHECKPOINT_FORMAT: &str = "advdiff-checkpoint/1";

impl TrainedModel {
    /// Writes `<stem>.json` and `<stem>.bin` for a manifest path `<stem>.json`.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let flat = self.params.flatten();
        let bytes = io::f64_to_le_bytes(&flat);
        let blob_path = manifest_path.with_extension("bin");
        let mut offset = 0;
        let mut layers = Vec::new();
        let named = self.params.layers.iter().enumerate().map(|(l, layer)| (format!("layer{l}"), layer));
        for (prefix, layer) in named.chain(self.params.skip.iter().map(|s| ("skip".to_string(), s))) {
            for (kind, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                layers.push(LayerEntry {
                    name: format!("{prefix}.{kind}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            architecture: self.params.arch.clone(),
            schedule_hash: io::hash_json(&self.schedule)?,
            train_config_hash: self.train_config_hash.clone(),
            step: self.step,
            param_count: flat.len(),
            params_file: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            params_sha256: io::sha256_hex(&bytes),
            layers,
            transform: self.transform.clone(),
            schedule: self.schedule.clone(),
        };
        io::atomic_write(&blob_path, &bytes)?;
        io::write_json(manifest_path, &manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = io::read_json(manifest_path)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(manifest_path, format!("unknown checkpoint format `{}`", manifest.format)));
        }
        let blob_path = io::sibling(manifest_path, &manifest.params_file);
        let bytes = io::read(&blob_path)?;
        if io::sha256_hex(&bytes) != manifest.params_sha256 {
            return Err(Error::format(&blob_path, "parameter blob hash does not match manifest"));
        }
        let flat = io::f64_from_le_bytes(&blob_path, &bytes)?;
        if flat.len() != manifest.param_count {
            return Err(Error::format(&blob_path, "parameter count does not match manifest"));
        }
        if io::hash_json(&manifest.schedule)? != manifest.schedule_hash {
            return Err(Error::format(manifest_path, "schedule hash mismatch"));
        }
        let params = DenoiserParams::unflatten(manifest.architecture, &flat)?;
        Ok(Self {
            params,
            schedule: manifest.schedule,
            transform: manifest.transform,
            step: manifest.step,
            train_config_hash: manifest.train_config_hash,
        })
    }
}
