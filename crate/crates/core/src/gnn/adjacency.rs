use std::collections::BTreeSet;

use crate::graph::Coo;
use crate::linalg::CsrMatrix;

/// Symmetric renormalized adjacency `D^-1/2 (A_sym + I) D^-1/2`.
///
/// Edge direction is dropped and duplicates merged. Self-loop edges in the
/// input collapse into the identity term, so every diagonal entry of
/// `A_sym + I` is exactly 1.
pub fn normalize_adjacency(edges: &Coo, n: usize) -> CsrMatrix {
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (u, v) in edges.iter() {
        assert!(u < n && v < n, "edge ({u},{v}) out of range for {n} nodes");
        if u != v {
            pairs.insert((u, v));
            pairs.insert((v, u));
        }
    }
    let mut degree = vec![1.0f64; n];
    for &(u, _) in &pairs {
        degree[u] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(pairs.len() + n);
    triplets.extend((0..n).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
    triplets.extend(pairs.iter().map(|&(u, v)| (u, v, inv_sqrt[u] * inv_sqrt[v])));
    CsrMatrix::from_triplets(n, &triplets)
}
