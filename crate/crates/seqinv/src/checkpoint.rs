//! Model persistence: a self-describing JSON container holding every named
//! parameter array with its shape, the normalization statistics, the
//! training configuration, and the loss trace. Serialization is
//! deterministic (fixed field and parameter order, shortest round-trip
//! float formatting), so identical training runs produce byte-identical
//! files and loading reproduces evaluations bitwise.

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::nn::{ModelDims, ModelParams};
use crate::train::TrainConfig;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter array in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Per-step loss record captured during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub inverse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub dims: ModelDims,
    pub driver_names: Vec<String>,
    pub characteristic_names: Vec<String>,
    pub stats: NormalizationStats,
    pub params: Vec<ParamEntry>,
    pub loss_trace: Vec<StepLoss>,
}

impl Checkpoint {
    pub fn from_params(
        config: TrainConfig,
        seed: u64,
        driver_names: Vec<String>,
        characteristic_names: Vec<String>,
        stats: NormalizationStats,
        params: &ModelParams,
        loss_trace: Vec<StepLoss>,
    ) -> Self {
        let entries = params
            .entries()
            .into_iter()
            .map(|(name, array)| ParamEntry {
                name,
                rows: array.nrows(),
                cols: array.ncols(),
                data: array.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            seed,
            dims: params.dims(),
            driver_names,
            characteristic_names,
            stats,
            params: entries,
            loss_trace,
        }
    }

    /// Rebuild the parameter bundle; names and shapes must match exactly.
    pub fn to_params(&self) -> Result<ModelParams> {
        let mut params = ModelParams::zeros(self.dims);
        params.inverse.activation = self.config.activation;
        let mut entries = params.entries_mut();
        if entries.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameter arrays, model expects {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (stored, (name, array)) in self.params.iter().zip(entries.iter_mut()) {
            if stored.name != *name {
                return Err(Error::Data(format!(
                    "checkpoint parameter '{}' does not match expected '{}'",
                    stored.name, name
                )));
            }
            if stored.rows != array.nrows() || stored.cols != array.ncols() {
                return Err(Error::Data(format!(
                    "checkpoint parameter '{}' has shape {}x{}, expected {}x{}",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    array.nrows(),
                    array.ncols()
                )));
            }
            let rebuilt = Array2::from_shape_vec((stored.rows, stored.cols), stored.data.clone())
                .map_err(|e| Error::Data(format!("parameter '{}': {e}", stored.name)))?;
            array.assign(&rebuilt);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Training-log CSV: `step,loss_total,loss_rec,loss_cont,loss_inv`.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = fs::File::create(path)?;
        writeln!(out, "step,loss_total,loss_rec,loss_cont,loss_inv")?;
        for row in &self.loss_trace {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.step, row.total, row.reconstruction, row.contrastive, row.inverse
            )?;
        }
        Ok(())
    }
}
