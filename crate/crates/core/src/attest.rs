//! Embedding-distance attestation.
//!
//! A candidate execution is embedded with the trained encoder and compared
//! to the reference embeddings of the training trace with the directed
//! Hausdorff distance `max_{a ∈ candidate} min_{b ∈ reference} ‖a − b‖₂`.
//! Distances strictly above the calibrated threshold are flagged.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::model::{PreparedGraph, VgaeModel};
use crate::gnn::persist::model_digest;
use crate::graph::ExecutionGraph;
use crate::linalg::Matrix;

pub const PROFILE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_VALIDATION_TRACES: usize = 10;

/// Directed Hausdorff distance from the rows of `a` to the rows of `b`.
pub fn directed_hausdorff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptySet);
    }
    if a.cols() != b.cols() {
        return Err(Error::Model(format!(
            "point dimension mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    // Squared distances throughout; sqrt is monotone so taking it once at
    // the end gives the same value as taking it per pair.
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        let x = a.row(i);
        let mut nearest = f64::INFINITY;
        for j in 0..b.rows() {
            let mut d2 = 0.0;
            for (p, q) in x.iter().zip(b.row(j)) {
                let diff = p - q;
                d2 += diff * diff;
                if d2 >= nearest {
                    break;
                }
            }
            if d2 < nearest {
                nearest = d2;
                if nearest <= worst {
                    // cannot raise the max any more
                    break;
                }
            }
        }
        if nearest > worst {
            worst = nearest;
        }
    }
    Ok(worst.sqrt())
}

/// Infer-mode node embeddings; row `i` belongs to node `i`.
pub fn embed(model: &VgaeModel, graph: &ExecutionGraph) -> Result<Matrix> {
    model.embed(&PreparedGraph::new(graph))
}

/// `mean + 2 * std` (population std). `None` for an empty slice.
pub fn threshold_from(distances: &[f64]) -> Option<f64> {
    if distances.is_empty() {
        return None;
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Some(mean + 2.0 * var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestationProfile {
    pub format_version: u32,
    pub model_digest: String,
    pub reference_embeddings: Vec<Vec<f64>>,
    pub distances: Vec<f64>,
    pub n_val: usize,
    pub threshold: f64,
}

impl AttestationProfile {
    pub fn from_parts(model_digest: String, reference: &Matrix, distances: Vec<f64>) -> Result<Self> {
        let threshold = threshold_from(&distances)
            .ok_or_else(|| Error::Calibration("validation set is empty".into()))?;
        Ok(AttestationProfile {
            format_version: PROFILE_FORMAT_VERSION,
            model_digest,
            reference_embeddings: reference.to_rows(),
            n_val: distances.len(),
            distances,
            threshold,
        })
    }

    pub fn reference(&self) -> Result<Matrix> {
        Matrix::from_rows(&self.reference_embeddings)
            .filter(|m| m.rows() > 0)
            .ok_or_else(|| Error::Profile("reference embeddings are empty or ragged".into()))
    }

    /// Checks internal consistency: the threshold must be exactly the one
    /// derived from the stored distances.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != PROFILE_FORMAT_VERSION {
            return Err(Error::Profile(format!(
                "unsupported profile format version {}",
                self.format_version
            )));
        }
        if self.n_val != self.distances.len() {
            return Err(Error::Profile(format!(
                "n_val {} disagrees with {} stored distances",
                self.n_val,
                self.distances.len()
            )));
        }
        let derived = threshold_from(&self.distances)
            .ok_or_else(|| Error::Profile("no calibration distances".into()))?;
        if derived.to_bits() != self.threshold.to_bits() {
            return Err(Error::Profile(format!(
                "threshold {} does not match calibration distances ({derived})",
                self.threshold
            )));
        }
        self.reference()?;
        Ok(())
    }

    pub fn check_model(&self, model: &VgaeModel) -> Result<()> {
        let digest = model_digest(model);
        if digest != self.model_digest {
            return Err(Error::Profile(format!(
                "profile was calibrated for model {}, got {digest}",
                self.model_digest
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let profile: AttestationProfile =
            serde_json::from_slice(bytes).map_err(|e| Error::Profile(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        AttestationProfile::from_json(&std::fs::read(path)?)
    }
}

/// Embeds the reference and validation graphs and derives the threshold.
pub fn calibrate(
    model: &VgaeModel,
    ref_graph: &ExecutionGraph,
    val_graphs: &[ExecutionGraph],
) -> Result<AttestationProfile> {
    if val_graphs.is_empty() {
        return Err(Error::Calibration("validation set is empty".into()));
    }
    let reference = embed(model, ref_graph)?;
    let distances = val_graphs
        .iter()
        .map(|g| directed_hausdorff(&embed(model, g)?, &reference))
        .collect::<Result<Vec<_>>>()?;
    AttestationProfile::from_parts(model_digest(model), &reference, distances)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Benign,
    Malicious,
}

impl Outcome {
    pub fn from_distance(distance: f64, threshold: f64) -> Outcome {
        if distance > threshold {
            Outcome::Malicious
        } else {
            Outcome::Benign
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub trace_id: String,
    pub distance: f64,
    pub threshold: f64,
    pub outcome: Outcome,
}

pub fn attest(
    profile: &AttestationProfile,
    model: &VgaeModel,
    graph: &ExecutionGraph,
    trace_id: impl Into<String>,
) -> Result<Verdict> {
    profile.check_model(model)?;
    let reference = profile.reference()?;
    let distance = directed_hausdorff(&embed(model, graph)?, &reference)?;
    Ok(Verdict {
        trace_id: trace_id.into(),
        distance,
        threshold: profile.threshold,
        outcome: Outcome::from_distance(distance, profile.threshold),
    })
}
