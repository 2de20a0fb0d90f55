//! Graph neural network core: normalized adjacency, the VGAE encoder with
//! hand-written gradients, the ELBO loss, Adam, ranking metrics, and the
//! training loop.

pub mod adam;
pub mod adjacency;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod train;

pub use adam::Adam;
pub use adjacency::normalize_adjacency;
pub use loss::{decode_loss, decode_loss_with_grads, LossParts};
pub use metrics::{ap_auc, RankingScores};
pub use model::{param_count, GcnLayer, LatentSample, Mode, PreparedGraph, VgaeModel};
pub use persist::{model_digest, ModelFile};
pub use train::{train, EarlyStopping, TrainConfig, TrainHistory, TrainOutcome};
