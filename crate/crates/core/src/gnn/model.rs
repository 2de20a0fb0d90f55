//! VGAE encoder: three ReLU graph convolutions followed by two linear
//! graph convolutions producing the posterior mean and log-variance.
//!
//! Gradients are computed by hand. Each layer computes `Â (H W) + b`, so
//! its backward pass is `dW = Hᵀ Â dP`, `db = Σ_rows dP`, `dH = Â dP Wᵀ`
//! (Â is symmetric).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::adjacency::normalize_adjacency;
use crate::graph::{Coo, ExecutionGraph, BASE_FEATURES};
use crate::linalg::{CsrMatrix, Matrix};

/// Output widths of enc1, enc2, enc3.
pub const HIDDEN_DIMS: [usize; 3] = [32, 64, 48];
pub const LATENT_DIM: usize = 24;
pub const DROPOUT_P: f64 = 0.3;
pub const NUM_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        GcnLayer {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        GcnLayer {
            weight: Matrix::from_vec(input, output, data),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn activate(&self, pre: &Matrix) -> Matrix {
        match self.activation {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::None => pre.clone(),
        }
    }

    fn activation_backward(&self, pre: &Matrix, grad: &Matrix) -> Matrix {
        match self.activation {
            Activation::Relu => pre.zip_map(grad, |p, g| if p > 0.0 { g } else { 0.0 }),
            Activation::None => grad.clone(),
        }
    }

    /// Pre-activation `Â (H W) + b`.
    fn propagate(&self, adj: &CsrMatrix, h: &Matrix) -> Matrix {
        let mut out = adj.spmm(&h.matmul(&self.weight));
        out.add_row_vector(&self.bias);
        out
    }
}

/// Number of trainable parameters for a given input width.
pub fn param_count(feature_dim: usize) -> usize {
    layer_shapes(feature_dim)
        .iter()
        .map(|&(i, o)| i * o + o)
        .sum()
}

/// `(input, output)` of enc1, enc2, enc3, mu, logvar.
pub fn layer_shapes(feature_dim: usize) -> [(usize, usize); NUM_LAYERS] {
    let [h1, h2, h3] = HIDDEN_DIMS;
    [
        (feature_dim, h1),
        (h1, h2),
        (h2, h3),
        (h3, LATENT_DIM),
        (h3, LATENT_DIM),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct VgaeModel {
    pub enc1: GcnLayer,
    pub enc2: GcnLayer,
    pub enc3: GcnLayer,
    pub mu: GcnLayer,
    pub logvar: GcnLayer,
    pub dropout_p: f64,
    pub seed: u64,
}

/// A graph with its normalized adjacency computed once.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub adj: CsrMatrix,
    pub features: Matrix,
    pub edges: Coo,
}

impl PreparedGraph {
    pub fn new(graph: &ExecutionGraph) -> Self {
        PreparedGraph {
            adj: normalize_adjacency(&graph.edges, graph.num_nodes()),
            features: graph.features.clone(),
            edges: graph.edges.clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, latent sampled by reparameterization.
    Train,
    /// No dropout, `z = mu`.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Matrix,
    pub logvar: Matrix,
    pub z: Matrix,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of enc1..enc3 (post-dropout where applicable), then the
    /// enc3 output feeding both heads.
    inputs: [Matrix; 4],
    /// Pre-activations of enc1..enc3.
    pre: [Matrix; 3],
    /// Inverted-dropout scale factors applied after enc1 and enc2.
    masks: [Option<Matrix>; 2],
    eps: Option<Matrix>,
    pub sample: LatentSample,
}

impl ForwardCache {
    /// Pre-activations of the three ReLU layers.
    pub fn pre_activations(&self) -> &[Matrix; 3] {
        &self.pre
    }
}

/// Gradients laid out like [`VgaeModel::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl VgaeModel {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = layer_shapes(feature_dim);
        let act = [
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
            Activation::None,
            Activation::None,
        ];
        let mut layers = shapes
            .iter()
            .zip(act)
            .map(|(&(i, o), a)| GcnLayer::glorot(i, o, a, &mut rng));
        VgaeModel {
            enc1: layers.next().unwrap(),
            enc2: layers.next().unwrap(),
            enc3: layers.next().unwrap(),
            mu: layers.next().unwrap(),
            logvar: layers.next().unwrap(),
            dropout_p: DROPOUT_P,
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.enc1.input_dim()
    }

    pub fn layers(&self) -> [&GcnLayer; NUM_LAYERS] {
        [&self.enc1, &self.enc2, &self.enc3, &self.mu, &self.logvar]
    }

    pub fn layers_mut(&mut self) -> [&mut GcnLayer; NUM_LAYERS] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3,
            &mut self.mu,
            &mut self.logvar,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Parameter tensors in a fixed order: weight then bias, per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                let GcnLayer { weight, bias, .. } = l;
                [weight.as_mut_slice(), bias.as_mut_slice()]
            })
            .collect()
    }

    /// Checks the 15/16 → 32 → 64 → 48 → {24, 24} shape chain.
    pub fn validate(&self) -> Result<()> {
        let f = self.feature_dim();
        if f != BASE_FEATURES && f != BASE_FEATURES + 1 {
            return Err(Error::Model(format!("unsupported feature width {f}")));
        }
        for (layer, (i, o)) in self.layers().iter().zip(layer_shapes(f)) {
            if layer.weight.shape() != (i, o) || layer.bias.len() != o {
                return Err(Error::Model(format!(
                    "layer shape {:?} does not match expected ({i}, {o})",
                    layer.weight.shape()
                )));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Model("non-finite parameter".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Model(format!("dropout_p {} out of range", self.dropout_p)));
        }
        Ok(())
    }

    fn check_input(&self, graph: &PreparedGraph) -> Result<()> {
        if graph.features.cols() != self.feature_dim() {
            return Err(Error::Model(format!(
                "graph has {} features, model expects {}",
                graph.features.cols(),
                self.feature_dim()
            )));
        }
        if graph.num_nodes() == 0 {
            return Err(Error::Model("graph has no nodes".into()));
        }
        Ok(())
    }

    pub fn encode(&self, graph: &ExecutionGraph, mode: Mode, seed: u64) -> Result<LatentSample> {
        use rand::SeedableRng;
        let prepared = PreparedGraph::new(graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.forward(&prepared, mode, &mut rng)?.sample)
    }

    /// Infer-mode embeddings (`z = mu`).
    pub fn embed(&self, graph: &PreparedGraph) -> Result<Matrix> {
        self.check_input(graph)?;
        let h1 = self.enc1.activate(&self.enc1.propagate(&graph.adj, &graph.features));
        let h2 = self.enc2.activate(&self.enc2.propagate(&graph.adj, &h1));
        let h3 = self.enc3.activate(&self.enc3.propagate(&graph.adj, &h2));
        Ok(self.mu.activate(&self.mu.propagate(&graph.adj, &h3)))
    }

    pub fn forward(&self, graph: &PreparedGraph, mode: Mode, rng: &mut ChaCha8Rng) -> Result<ForwardCache> {
        self.check_input(graph)?;
        let adj = &graph.adj;
        let train = mode == Mode::Train;

        let p1 = self.enc1.propagate(adj, &graph.features);
        let (h1, m1) = self.dropout(self.enc1.activate(&p1), train, rng);
        let p2 = self.enc2.propagate(adj, &h1);
        let (h2, m2) = self.dropout(self.enc2.activate(&p2), train, rng);
        let p3 = self.enc3.propagate(adj, &h2);
        let h3 = self.enc3.activate(&p3);
        let mu = self.mu.activate(&self.mu.propagate(adj, &h3));
        let logvar = self.logvar.activate(&self.logvar.propagate(adj, &h3));

        let (z, eps) = if train {
            let eps_data = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
            let eps = Matrix::from_vec(mu.rows(), mu.cols(), eps_data);
            let mut z = logvar.zip_map(&eps, |lv, e| (0.5 * lv).exp() * e);
            z.add_assign(&mu);
            (z, Some(eps))
        } else {
            (mu.clone(), None)
        };

        Ok(ForwardCache {
            inputs: [graph.features.clone(), h1, h2, h3],
            pre: [p1, p2, p3],
            masks: [m1, m2],
            eps,
            sample: LatentSample { mu, logvar, z },
        })
    }

    fn dropout(&self, h: Matrix, train: bool, rng: &mut ChaCha8Rng) -> (Matrix, Option<Matrix>) {
        if !train || self.dropout_p == 0.0 {
            return (h, None);
        }
        let keep = 1.0 - self.dropout_p;
        let scale = 1.0 / keep;
        let mask_data = (0..h.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Matrix::from_vec(h.rows(), h.cols(), mask_data);
        (h.zip_map(&mask, |x, m| x * m), Some(mask))
    }

    /// Backpropagates `dz` (through the reparameterization) plus direct
    /// gradients on `mu` and `logvar`.
    pub fn backward(
        &self,
        graph: &PreparedGraph,
        cache: &ForwardCache,
        dz: &Matrix,
        dmu_extra: &Matrix,
        dlogvar_extra: &Matrix,
    ) -> Gradients {
        let adj = &graph.adj;
        let sample = &cache.sample;

        let mut dmu = dz.clone();
        dmu.add_assign(dmu_extra);
        let mut dlogvar = dlogvar_extra.clone();
        if let Some(eps) = &cache.eps {
            for i in 0..dz.len() {
                let lv = sample.logvar.as_slice()[i];
                dlogvar.as_mut_slice()[i] +=
                    dz.as_slice()[i] * eps.as_slice()[i] * 0.5 * (0.5 * lv).exp();
            }
        }

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(2 * NUM_LAYERS);
        let h3 = &cache.inputs[3];
        let (dw_mu, db_mu, dh3_mu) = layer_backward(&self.mu, adj, h3, &dmu);
        let (dw_lv, db_lv, dh3_lv) = layer_backward(&self.logvar, adj, h3, &dlogvar);
        let mut dh3 = dh3_mu;
        dh3.add_assign(&dh3_lv);

        let dp3 = self.enc3.activation_backward(&cache.pre[2], &dh3);
        let (dw3, db3, dh2) = layer_backward(&self.enc3, adj, &cache.inputs[2], &dp3);
        let dh2 = apply_mask(dh2, &cache.masks[1]);
        let dp2 = self.enc2.activation_backward(&cache.pre[1], &dh2);
        let (dw2, db2, dh1) = layer_backward(&self.enc2, adj, &cache.inputs[1], &dp2);
        let dh1 = apply_mask(dh1, &cache.masks[0]);
        let dp1 = self.enc1.activation_backward(&cache.pre[0], &dh1);
        let (dw1, db1, _) = layer_backward(&self.enc1, adj, &cache.inputs[0], &dp1);

        for (dw, db) in [(dw1, db1), (dw2, db2), (dw3, db3), (dw_mu, db_mu), (dw_lv, db_lv)] {
            grads.push(dw.as_slice().to_vec());
            grads.push(db);
        }
        Gradients { tensors: grads }
    }
}

fn layer_backward(
    layer: &GcnLayer,
    adj: &CsrMatrix,
    input: &Matrix,
    dpre: &Matrix,
) -> (Matrix, Vec<f64>, Matrix) {
    let db = dpre.col_sums();
    let d_hw = adj.spmm(dpre);
    let dw = input.t_matmul(&d_hw);
    let dinput = d_hw.matmul_t(&layer.weight);
    (dw, db, dinput)
}

fn apply_mask(grad: Matrix, mask: &Option<Matrix>) -> Matrix {
    match mask {
        Some(m) => grad.zip_map(m, |g, s| g * s),
        None => grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::trace_io::Trace;

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(15), 8_096);
        assert_eq!(param_count(16), 8_128);
        assert_eq!(VgaeModel::new(15, 0).param_count(), 8_096);
        assert_eq!(VgaeModel::new(16, 0).param_count(), 8_128);
    }

    #[test]
    fn zero_weights_propagate_bias() {
        let mut model = VgaeModel::new(15, 1);
        for layer in model.layers_mut() {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            for (k, b) in layer.bias.iter_mut().enumerate() {
                *b = 0.1 * (k as f64 + 1.0);
            }
        }
        let graph = build_graph(&Trace::new(vec![1, 2, 3, 1])).unwrap();
        let mut prepared = PreparedGraph::new(&graph);
        prepared.features = Matrix::zeros(3, 15);
        let mu = model.embed(&prepared).unwrap();
        for r in 0..3 {
            assert_eq!(mu.row(r), model.mu.bias.as_slice());
        }
    }

    #[test]
    fn infer_mode_is_deterministic_and_equals_mu() {
        let model = VgaeModel::new(15, 3);
        let graph = build_graph(&Trace::new(vec![1, 2, 3, 1, 4, 2])).unwrap();
        let a = model.encode(&graph, Mode::Infer, 1).unwrap();
        let b = model.encode(&graph, Mode::Infer, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.z, a.mu);
        let t = model.encode(&graph, Mode::Train, 1).unwrap();
        assert_ne!(t.z, t.mu);
        assert_eq!(t, model.encode(&graph, Mode::Train, 1).unwrap());
    }

    #[test]
    fn feature_width_mismatch_is_model_error() {
        let model = VgaeModel::new(16, 3);
        let graph = build_graph(&Trace::new(vec![1, 2])).unwrap();
        assert!(matches!(
            model.encode(&graph, Mode::Infer, 0),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn validate_rejects_broken_chain() {
        let mut model = VgaeModel::new(15, 0);
        assert!(model.validate().is_ok());
        model.enc2.bias.pop();
        assert!(model.validate().is_err());
    }
}
