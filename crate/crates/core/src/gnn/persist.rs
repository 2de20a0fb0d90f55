//! Model files: JSON with row-major nested weight arrays.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::model::{layer_shapes, param_count, Activation, GcnLayer, VgaeModel, LATENT_DIM};
use crate::gnn::model::HIDDEN_DIMS;
use crate::linalg::Matrix;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub feature_dim: usize,
    /// Width chain `[F, 32, 64, 48, 24]`; both heads map 48 → 24.
    pub layer_dims: Vec<usize>,
    /// enc1, enc2, enc3, mu, logvar.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub dropout_p: f64,
    pub seed: u64,
    pub training_history_digest: String,
}

impl ModelFile {
    pub fn from_model(model: &VgaeModel, training_history_digest: impl Into<String>) -> Self {
        let layers = model.layers();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            feature_dim: model.feature_dim(),
            layer_dims: expected_dims(model.feature_dim()),
            weights: layers.iter().map(|l| l.weight.to_rows()).collect(),
            biases: layers.iter().map(|l| l.bias.clone()).collect(),
            dropout_p: model.dropout_p,
            seed: model.seed,
            training_history_digest: training_history_digest.into(),
        }
    }

    /// Rebuilds the model, checking the shape chain and parameter count.
    pub fn to_model(&self) -> Result<VgaeModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        if self.layer_dims != expected_dims(self.feature_dim) {
            return Err(Error::Model(format!(
                "layer chain {:?} does not match {:?}",
                self.layer_dims,
                expected_dims(self.feature_dim)
            )));
        }
        let shapes = layer_shapes(self.feature_dim);
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(Error::Model("expected 5 weight and bias tensors".into()));
        }
        let activations = [
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
            Activation::None,
            Activation::None,
        ];
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, &(i, o)) in shapes.iter().enumerate() {
            let weight = Matrix::from_rows(&self.weights[k])
                .filter(|w| w.shape() == (i, o))
                .ok_or_else(|| Error::Model(format!("layer {k} weight is not {i}x{o}")))?;
            if self.biases[k].len() != o {
                return Err(Error::Model(format!("layer {k} bias is not length {o}")));
            }
            layers.push(GcnLayer {
                weight,
                bias: self.biases[k].clone(),
                activation: activations[k],
            });
        }
        let mut it = layers.into_iter();
        let model = VgaeModel {
            enc1: it.next().unwrap(),
            enc2: it.next().unwrap(),
            enc3: it.next().unwrap(),
            mu: it.next().unwrap(),
            logvar: it.next().unwrap(),
            dropout_p: self.dropout_p,
            seed: self.seed,
        };
        model.validate()?;
        if model.param_count() != param_count(self.feature_dim) {
            return Err(Error::Model("parameter count mismatch".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<ModelFile> {
        let file: ModelFile = serde_json::from_slice(bytes)?;
        file.to_model()?;
        Ok(file)
    }
}

fn expected_dims(feature_dim: usize) -> Vec<usize> {
    let mut dims = vec![feature_dim];
    dims.extend(HIDDEN_DIMS);
    dims.push(LATENT_DIM);
    dims
}

/// SHA-256 of a model's shape and exact parameter bits.
pub fn model_digest(model: &VgaeModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update((model.feature_dim() as u64).to_le_bytes());
    hasher.update(model.dropout_p.to_bits().to_le_bytes());
    for tensor in model.tensors() {
        hasher.update((tensor.len() as u64).to_le_bytes());
        for v in tensor {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
