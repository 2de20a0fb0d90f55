//! Single-graph VGAE training with a step learning-rate schedule and
//! early stopping on mean(AP, AUC).

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::adam::Adam;
use crate::gnn::loss::decode_loss_with_grads;
use crate::gnn::metrics::{ap_auc, RankingScores};
use crate::gnn::model::{Mode, PreparedGraph, VgaeModel};
use crate::graph::ExecutionGraph;
use crate::linalg::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lr_fixed_after: usize,
    pub seed: u64,
    pub negative_sampling_ratio: f64,
    /// Multiplier on the per-node mean KL term. `None` uses `1 / n`, which
    /// keeps the prior from swamping the reconstruction term on larger
    /// graphs (the posterior otherwise collapses onto the prior).
    pub kl_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 3000,
            patience: 500,
            lr0: 0.01,
            lr_decay_factor: 3.0,
            lr_decay_every: 150,
            lr_fixed_after: 750,
            seed: 0,
            negative_sampling_ratio: 1.0,
            kl_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.max_epochs > 0
            && self.patience > 0
            && self.lr0 > 0.0
            && self.lr_decay_factor > 0.0
            && self.lr_decay_every > 0
            && self.negative_sampling_ratio > 0.0
            && self.kl_weight.map_or(true, |w| w >= 0.0 && w.is_finite());
        if !positive {
            return Err(Error::Model("training hyperparameters out of range".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Model("patience exceeds max_epochs".into()));
        }
        Ok(())
    }

    /// `lr0 / factor^k` with `k = min(epoch, fixed_after) / every`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch.min(self.lr_fixed_after) / self.lr_decay_every;
        self.lr0 / self.lr_decay_factor.powi(k as i32)
    }
}

/// Tracks the best monitor value; a value counts as improvement only if it
/// is strictly greater than the best so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
        }
    }

    /// Records `value` for `epoch`; returns true on improvement.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best_epoch
            .is_some_and(|best| epoch.saturating_sub(best) >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ap: f64,
    pub auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// SHA-256 over the exact bit patterns of every record.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.best_epoch as u64).to_le_bytes());
        for r in &self.epochs {
            hasher.update((r.epoch as u64).to_le_bytes());
            for v in [r.loss, r.ap, r.auc, r.lr] {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VgaeModel,
    pub history: TrainHistory,
}

/// Uniform sampler of ordered node pairs that are not edges in either
/// direction and not self-pairs.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n: usize,
    blocked: HashSet<(usize, usize)>,
    /// Explicit candidate list, used when non-edges are scarce.
    candidates: Option<Vec<(usize, usize)>>,
}

impl NegativeSampler {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut blocked = HashSet::new();
        for (u, v) in edges {
            blocked.insert((u, v));
            blocked.insert((v, u));
        }
        let all_pairs = n * n.saturating_sub(1);
        let blocked_offdiag = blocked.iter().filter(|(u, v)| u != v).count();
        let available = all_pairs - blocked_offdiag;
        let candidates = if available * 4 < all_pairs {
            let mut list = Vec::with_capacity(available);
            for u in 0..n {
                for v in 0..n {
                    if u != v && !blocked.contains(&(u, v)) {
                        list.push((u, v));
                    }
                }
            }
            Some(list)
        } else {
            None
        };
        NegativeSampler {
            n,
            blocked,
            candidates,
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.candidates {
            Some(list) => list.is_empty(),
            None => self.n < 2,
        }
    }

    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        if self.is_empty() {
            return Vec::new();
        }
        match &self.candidates {
            Some(list) => (0..count).map(|_| list[rng.gen_range(0..list.len())]).collect(),
            None => {
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let u = rng.gen_range(0..self.n);
                    let v = rng.gen_range(0..self.n);
                    if u != v && !self.blocked.contains(&(u, v)) {
                        out.push((u, v));
                    }
                }
                out
            }
        }
    }
}

/// AP/AUC of infer-mode decoder logits on `pos` (label 1) and `neg`.
/// Logits rank identically to probabilities but do not saturate into ties.
pub fn evaluate_edges(
    model: &VgaeModel,
    graph: &PreparedGraph,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
) -> Result<RankingScores> {
    let z = model.embed(graph)?;
    let scores: Vec<(f64, bool)> = pos
        .iter()
        .map(|&(u, v)| (dot(z.row(u), z.row(v)), true))
        .chain(neg.iter().map(|&(u, v)| (dot(z.row(u), z.row(v)), false)))
        .collect();
    ap_auc(&scores)
}

/// Trains a fresh model on one graph.
pub fn train(graph: &ExecutionGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    graph.validate()?;
    let model = VgaeModel::new(graph.feature_dim(), cfg.seed);
    train_from(model, graph, cfg)
}

pub fn train_from(mut model: VgaeModel, graph: &ExecutionGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = PreparedGraph::new(graph);
    let pos: Vec<(usize, usize)> = graph.edges.iter().collect();
    if pos.is_empty() {
        return Err(Error::Model("graph has no edges to reconstruct".into()));
    }
    let sampler = NegativeSampler::new(graph.num_nodes(), pos.iter().copied());
    if sampler.is_empty() {
        return Err(Error::Model("graph has no non-edges to sample".into()));
    }
    let neg_count = ((pos.len() as f64 * cfg.negative_sampling_ratio).round() as usize).max(1);

    let mut monitor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6e69_746f_7221);
    let monitor_neg = sampler.sample(pos.len(), &mut monitor_rng);

    let kl_weight = cfg.kl_weight.unwrap_or(1.0 / graph.num_nodes() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.tensors().iter().map(|t| t.len()));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let neg = sampler.sample(neg_count, &mut rng);
        let cache = model.forward(&prepared, Mode::Train, &mut rng)?;
        let s = &cache.sample;
        let mut loss = decode_loss_with_grads(&s.z, &s.mu, &s.logvar, &pos, &neg);
        let objective = loss.parts.recon + kl_weight * loss.parts.kl;
        if !objective.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: objective });
        }
        for g in loss.dmu.as_mut_slice().iter_mut().chain(loss.dlogvar.as_mut_slice()) {
            *g *= kl_weight;
        }
        let grads = model.backward(&prepared, &cache, &loss.dz, &loss.dmu, &loss.dlogvar);
        adam.step(&mut model.tensors_mut(), &grads.tensors, lr);

        let scores = evaluate_edges(&model, &prepared, &pos, &monitor_neg)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: objective,
            ap: scores.ap,
            auc: scores.auc,
            lr,
        });
        if stopper.observe(epoch, scores.monitor()) {
            best_model = model.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    Ok(TrainOutcome {
        model: best_model,
        history,
    })
}
