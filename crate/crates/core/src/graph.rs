//! Trace to execution-graph conversion.
//!
//! Each unique address becomes a node (numbered by first occurrence), each
//! distinct consecutive pair of steps becomes a directed edge, and every
//! node carries a per-node feature row describing how and when it was
//! visited. Everything is computed in one pass over the trace plus a pass
//! over the edge list.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trace_io::{Address, Trace, FORMAT_VERSION, MAGIC};

/// Number of trace-derived features per node.
pub const BASE_FEATURES: usize = 15;

/// Column order of the feature matrix.
pub const FEATURE_NAMES: [&str; BASE_FEATURES] = [
    "vertex_degree",
    "visits",
    "first_visit",
    "last_visit",
    "incoming_edges",
    "outgoing_edges",
    "visit_frequency",
    "time_of_use",
    "visit_step_std",
    "mean_visit_gap",
    "mean_visit_step",
    "mean_in_neighbor_visits",
    "mean_out_neighbor_visits",
    "mean_in_neighbor_last_visit",
    "mean_out_neighbor_last_visit",
];

pub const GRAPH_RECORD_TYPE: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphOptions {
    /// Appends a constant 1.0 column after the 15 trace features.
    #[serde(default)]
    pub constant_feature: bool,
}

impl GraphOptions {
    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + usize::from(self.constant_feature)
    }
}

/// Directed edges in coordinate format: `src[k] -> dst[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Coo {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Coo {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    pub fn push(&mut self, src: usize, dst: usize) {
        self.src.push(src);
        self.dst.push(dst);
    }
}

impl FromIterator<(usize, usize)> for Coo {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        let mut coo = Coo::default();
        for (s, d) in iter {
            coo.push(s, d);
        }
        coo
    }
}

/// Node numbering and edge list of one trace, before features.
#[derive(Debug, Clone)]
pub struct Topology {
    pub node_ids: Vec<Address>,
    pub edges: Coo,
    /// Node index of every step, in trace order.
    pub step_nodes: Vec<usize>,
}

/// Largest node count squared for which edges are deduplicated with a bitset
/// (16 MiB).
const DENSE_EDGE_BITS: usize = 1 << 27;

pub fn build_topology(trace: &Trace) -> Result<Topology> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut index: HashMap<Address, usize> = HashMap::new();
    let mut node_ids = Vec::new();
    let step_nodes: Vec<usize> = trace
        .steps
        .iter()
        .map(|&addr| {
            *index.entry(addr).or_insert_with(|| {
                node_ids.push(addr);
                node_ids.len() - 1
            })
        })
        .collect();
    let n = node_ids.len();
    let mut edges = Coo::default();
    let transitions = step_nodes.windows(2).map(|w| (w[0], w[1]));
    if n.checked_mul(n).is_some_and(|bits| bits <= DENSE_EDGE_BITS) {
        // fixed-size bitset keeps the cost per step independent of trace length
        let mut seen = vec![0u64; (n * n).div_ceil(64)];
        for (p, q) in transitions {
            let bit = p * n + q;
            let (word, mask) = (bit / 64, 1u64 << (bit % 64));
            if seen[word] & mask == 0 {
                seen[word] |= mask;
                edges.push(p, q);
            }
        }
    } else {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for (p, q) in transitions {
            if seen.insert((p, q)) {
                edges.push(p, q);
            }
        }
    }
    Ok(Topology {
        node_ids,
        edges,
        step_nodes,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct VisitStats {
    visits: u64,
    first: usize,
    last: usize,
    // Welford running mean / sum of squared deviations of visit steps.
    mean: f64,
    m2: f64,
}

impl VisitStats {
    fn record(&mut self, step: usize) {
        if self.visits == 0 {
            self.first = step;
        }
        self.last = step;
        self.visits += 1;
        let x = step as f64;
        let delta = x - self.mean;
        self.mean += delta / self.visits as f64;
        self.m2 += delta * (x - self.mean);
    }
}

/// Computes the normalized node-feature matrix for `trace` over `topology`.
pub fn extract_features(trace: &Trace, topology: &Topology, options: &GraphOptions) -> Matrix {
    let n = topology.node_ids.len();
    let len = trace.len() as f64;
    let mut stats = vec![VisitStats::default(); n];
    for (step, &node) in topology.step_nodes.iter().enumerate() {
        stats[node].record(step);
    }

    let mut in_deg = vec![0usize; n];
    let mut out_deg = vec![0usize; n];
    let mut in_visits = vec![0.0f64; n];
    let mut out_visits = vec![0.0f64; n];
    let mut in_last = vec![0.0f64; n];
    let mut out_last = vec![0.0f64; n];
    for (u, v) in topology.edges.iter() {
        out_deg[u] += 1;
        in_deg[v] += 1;
        in_visits[v] += stats[u].visits as f64;
        in_last[v] += stats[u].last as f64;
        out_visits[u] += stats[v].visits as f64;
        out_last[u] += stats[v].last as f64;
    }
    let mean_or_zero = |sum: f64, count: usize| {
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };

    let dim = options.feature_dim();
    let mut x = Matrix::zeros(n, dim);
    for i in 0..n {
        let s = &stats[i];
        let visits = s.visits as f64;
        let std = (s.m2 / visits).sqrt();
        let gap = if s.visits > 1 {
            (s.last - s.first) as f64 / (visits - 1.0)
        } else {
            0.0
        };
        let raw = [
            (in_deg[i] + out_deg[i]) as f64,
            visits,
            s.first as f64,
            s.last as f64,
            in_deg[i] as f64,
            out_deg[i] as f64,
            visits,
            (s.last - s.first) as f64,
            std,
            gap,
            s.mean,
            mean_or_zero(in_visits[i], in_deg[i]),
            mean_or_zero(out_visits[i], out_deg[i]),
            mean_or_zero(in_last[i], in_deg[i]),
            mean_or_zero(out_last[i], out_deg[i]),
        ];
        let row = x.row_mut(i);
        for (dst, value) in row.iter_mut().zip(raw) {
            *dst = value / len;
        }
        if options.constant_feature {
            row[BASE_FEATURES] = 1.0;
        }
    }
    x
}

/// Featured execution graph of a single trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionGraph {
    pub node_ids: Vec<Address>,
    pub edges: Coo,
    pub features: Matrix,
    pub trace_len: usize,
}

pub fn build_graph(trace: &Trace) -> Result<ExecutionGraph> {
    build_graph_with(trace, &GraphOptions::default())
}

pub fn build_graph_with(trace: &Trace, options: &GraphOptions) -> Result<ExecutionGraph> {
    let topology = build_topology(trace)?;
    let features = extract_features(trace, &topology, options);
    Ok(ExecutionGraph {
        node_ids: topology.node_ids,
        edges: topology.edges,
        features,
        trace_len: trace.len(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    node_ids: Vec<Address>,
    edges: [Vec<usize>; 2],
    features: Vec<Vec<f64>>,
    trace_len: usize,
}

impl ExecutionGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks index bounds, edge uniqueness, and feature shape.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if n == 0 {
            return Err(Error::EmptyTrace);
        }
        if self.edges.src.len() != self.edges.dst.len() {
            return Err(Error::parse(0, "COO rows differ in length"));
        }
        let mut seen = HashSet::new();
        for (u, v) in self.edges.iter() {
            if u >= n || v >= n {
                return Err(Error::parse(0, format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            if !seen.insert((u, v)) {
                return Err(Error::parse(0, format!("duplicate edge ({u},{v})")));
            }
        }
        if self.features.rows() != n {
            return Err(Error::parse(0, "feature rows differ from node count"));
        }
        if !self.features.is_finite() {
            return Err(Error::parse(0, "non-finite feature value"));
        }
        Ok(())
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ExecutionGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        ExecutionGraph {
            node_ids: perm.iter().map(|&o| self.node_ids[o]).collect(),
            edges: self.edges.iter().map(|(u, v)| (inverse[u], inverse[v])).collect(),
            features: self.features.select_rows(perm),
            trace_len: self.trace_len,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let doc = GraphJson {
            node_ids: self.node_ids.clone(),
            edges: [self.edges.src.clone(), self.edges.dst.clone()],
            features: self.features.to_rows(),
            trace_len: self.trace_len,
        };
        Ok(serde_json::to_vec(&doc)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<ExecutionGraph> {
        let doc: GraphJson = serde_json::from_slice(bytes)?;
        let n = doc.node_ids.len();
        let features = if doc.features.is_empty() {
            Matrix::zeros(n, 0)
        } else {
            Matrix::from_rows(&doc.features)
                .ok_or_else(|| Error::parse(0, "ragged feature matrix"))?
        };
        let [src, dst] = doc.edges;
        let graph = ExecutionGraph {
            node_ids: doc.node_ids,
            edges: Coo { src, dst },
            features,
            trace_len: doc.trace_len,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let n = self.num_nodes();
        let m = self.num_edges();
        let f = self.feature_dim();
        let mut out = Vec::with_capacity(40 + 8 * (n + 2 * m + n * f));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&GRAPH_RECORD_TYPE.to_le_bytes());
        for v in [n, m, f, self.trace_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &a in &self.node_ids {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for &s in self.edges.src.iter().chain(&self.edges.dst) {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &x in self.features.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<ExecutionGraph> {
        let mut reader = LeReader { bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(Error::parse(0, "bad magic"));
        }
        let version = reader.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        let record = reader.u16()?;
        if record != GRAPH_RECORD_TYPE {
            return Err(Error::parse(6, format!("record type {record} is not a graph")));
        }
        let n = reader.usize()?;
        let m = reader.usize()?;
        let f = reader.usize()?;
        let trace_len = reader.usize()?;
        let needed = n
            .checked_add(m.checked_mul(2).unwrap_or(usize::MAX))
            .and_then(|x| x.checked_add(n.checked_mul(f)?))
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::parse(14, "header sizes overflow"))?;
        if reader.remaining() != needed {
            return Err(Error::parse(
                reader.pos,
                format!("expected {needed} payload bytes, found {}", reader.remaining()),
            ));
        }
        let node_ids = (0..n).map(|_| reader.u64()).collect::<Result<Vec<_>>>()?;
        let src = (0..m).map(|_| reader.usize()).collect::<Result<Vec<_>>>()?;
        let dst = (0..m).map(|_| reader.usize()).collect::<Result<Vec<_>>>()?;
        let data = (0..n * f)
            .map(|_| reader.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let graph = ExecutionGraph {
            node_ids,
            edges: Coo { src, dst },
            features: Matrix::from_vec(n, f, data),
            trace_len,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Reads JSON or binary, chosen by the leading magic bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<ExecutionGraph> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            ExecutionGraph::from_binary(&bytes)
        } else {
            ExecutionGraph::from_json(&bytes)
        }
    }
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(Error::parse(self.pos, "truncated record"));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| Error::parse(at, "value exceeds usize"))
    }
}
