//! Versioned JSON checkpoints: every weight matrix with an explicit shape
//! header, the correlation hyperparameter, the architecture, and the
//! feature-normalization flag. Serialization is deterministic (fixed field
//! order, shortest-round-trip floats), so identical parameters produce
//! byte-identical files.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BupParameters;
use crate::train::{GcnParameters, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense matrix with its shape spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl MatrixData {
    fn from_array(a: &Array2<f64>) -> MatrixData {
        MatrixData {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self, role: &str) -> Result<Array2<f64>> {
        if self.shape[0] * self.shape[1] != self.data.len() {
            return Err(Error::input(format!(
                "{role}: shape {}x{} does not match {} stored values",
                self.shape[0],
                self.shape[1],
                self.data.len()
            )));
        }
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .expect("length checked above"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bup,
    Gcn,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Bup => write!(f, "bup"),
            Method::Gcn => write!(f, "gcn"),
        }
    }
}

/// On-disk parameter document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub method: Method,
    pub lambda: f64,
    /// Width chain `[F, hidden..., C]`.
    pub dims: Vec<usize>,
    pub feature_normalized: bool,
    pub train_config: TrainConfig,
    pub mean_weights: Vec<MatrixData>,
    /// Empty for the GCN baseline.
    pub var_weights: Vec<MatrixData>,
    /// Empty for the GCN baseline.
    pub var_input_bias: Vec<f64>,
}

impl Checkpoint {
    pub fn from_bup(
        params: &BupParameters,
        train_config: &TrainConfig,
        feature_normalized: bool,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            method: Method::Bup,
            lambda: params.lambda,
            dims: params.dims(),
            feature_normalized,
            train_config: train_config.clone(),
            mean_weights: params.mean_weights.iter().map(MatrixData::from_array).collect(),
            var_weights: params.var_weights.iter().map(MatrixData::from_array).collect(),
            var_input_bias: params.var_input_bias.iter().copied().collect(),
        }
    }

    pub fn from_gcn(
        params: &GcnParameters,
        train_config: &TrainConfig,
        feature_normalized: bool,
    ) -> Checkpoint {
        let mut dims = vec![params.weights[0].nrows()];
        dims.extend(params.weights.iter().map(|w| w.ncols()));
        Checkpoint {
            version: CHECKPOINT_VERSION,
            method: Method::Gcn,
            lambda: 1.0,
            dims,
            feature_normalized,
            train_config: train_config.clone(),
            mean_weights: params.weights.iter().map(MatrixData::from_array).collect(),
            var_weights: Vec::new(),
            var_input_bias: Vec::new(),
        }
    }

    fn check_chain(&self, weights: &[Array2<f64>], role: &str) -> Result<()> {
        if weights.len() + 1 != self.dims.len() {
            return Err(Error::input(format!(
                "{role}: {} layers do not match width chain {:?}",
                weights.len(),
                self.dims
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.nrows() != self.dims[l] || w.ncols() != self.dims[l + 1] {
                return Err(Error::input(format!(
                    "{role} layer {l}: shape {}x{} does not match expected {}x{}",
                    w.nrows(),
                    w.ncols(),
                    self.dims[l],
                    self.dims[l + 1]
                )));
            }
        }
        Ok(())
    }

    pub fn to_bup(&self) -> Result<BupParameters> {
        if self.method != Method::Bup {
            return Err(Error::input(format!(
                "checkpoint holds a {} model, expected bup",
                self.method
            )));
        }
        let mean_weights: Vec<Array2<f64>> = self
            .mean_weights
            .iter()
            .enumerate()
            .map(|(l, m)| m.to_array(&format!("mean weight {l}")))
            .collect::<Result<_>>()?;
        let var_weights: Vec<Array2<f64>> = self
            .var_weights
            .iter()
            .enumerate()
            .map(|(l, m)| m.to_array(&format!("variance weight {l}")))
            .collect::<Result<_>>()?;
        self.check_chain(&mean_weights, "mean weights")?;
        self.check_chain(&var_weights, "variance weights")?;
        if self.dims.len() < 2 || self.var_input_bias.len() != self.dims[1] {
            return Err(Error::input(format!(
                "variance input bias has {} entries, expected {}",
                self.var_input_bias.len(),
                self.dims.get(1).copied().unwrap_or(0)
            )));
        }
        Ok(BupParameters {
            mean_weights,
            var_weights,
            var_input_bias: Array1::from_vec(self.var_input_bias.clone()),
            lambda: self.lambda,
        })
    }

    pub fn to_gcn(&self) -> Result<GcnParameters> {
        if self.method != Method::Gcn {
            return Err(Error::input(format!(
                "checkpoint holds a {} model, expected gcn",
                self.method
            )));
        }
        let weights: Vec<Array2<f64>> = self
            .mean_weights
            .iter()
            .enumerate()
            .map(|(l, m)| m.to_array(&format!("weight {l}")))
            .collect::<Result<_>>()?;
        self.check_chain(&weights, "weights")?;
        Ok(GcnParameters { weights })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Checkpoint::from_json(&text)
    }
}
