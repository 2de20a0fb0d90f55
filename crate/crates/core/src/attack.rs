//! Synthetic code-reuse attack traces.
//!
//! ROP traces splice a block of addresses sampled uniformly from the benign
//! trace into it, which almost always introduces transitions the benign
//! execution never took. DOP traces splice a walk over edges the benign
//! execution already took, repeated several times, so the edge set is left
//! untouched and only the visit pattern changes.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::build_topology;
use crate::trace_io::{Address, Trace};

pub const DEFAULT_DOP_RETRY_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Rop,
    Dop,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rop" => Ok(AttackKind::Rop),
            "dop" => Ok(AttackKind::Dop),
            other => Err(Error::Spec(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Where the malicious block is spliced in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplicePos {
    At(usize),
    /// Drawn from the attack RNG.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub pos: SplicePos,
    pub inserts: usize,
    /// Extra copies of the DOP block after the first one. Ignored for ROP.
    pub repeats: usize,
    pub seed: u64,
}

impl AttackSpec {
    pub fn rop(pos: SplicePos, inserts: usize, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::Rop,
            pos,
            inserts,
            repeats: 0,
            seed,
        }
    }

    pub fn dop(pos: SplicePos, inserts: usize, repeats: usize, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::Dop,
            pos,
            inserts,
            repeats,
            seed,
        }
    }

    pub fn validate(&self, trace_len: usize) -> Result<()> {
        if self.inserts == 0 {
            return Err(Error::Spec("inserts must be at least 1".into()));
        }
        if let SplicePos::At(pos) = self.pos {
            if pos > trace_len {
                return Err(Error::Spec(format!(
                    "pos {pos} exceeds trace length {trace_len}"
                )));
            }
            if self.kind == AttackKind::Dop && pos == 0 {
                return Err(Error::Spec("DOP splice needs pos >= 1".into()));
            }
        }
        Ok(())
    }

    /// Number of steps the attack adds to the trace.
    pub fn added_len(&self) -> usize {
        match self.kind {
            AttackKind::Rop => self.inserts,
            AttackKind::Dop => self.inserts * (1 + self.repeats),
        }
    }
}

pub fn generate(trace: &Trace, spec: &AttackSpec) -> Result<Trace> {
    match spec.kind {
        AttackKind::Rop => gen_rop(trace, spec),
        AttackKind::Dop => gen_dop(trace, spec),
    }
}

pub fn gen_rop(trace: &Trace, spec: &AttackSpec) -> Result<Trace> {
    if spec.kind != AttackKind::Rop {
        return Err(Error::Spec("gen_rop called with a non-ROP spec".into()));
    }
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    spec.validate(trace.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pos = match spec.pos {
        SplicePos::At(p) => p,
        SplicePos::Random => rng.gen_range(0..=trace.len()),
    };
    let mut steps = Vec::with_capacity(trace.len() + spec.inserts);
    steps.extend_from_slice(&trace.steps[..pos]);
    steps.extend((0..spec.inserts).map(|_| trace.steps[rng.gen_range(0..trace.len())]));
    steps.extend_from_slice(&trace.steps[pos..]);
    Ok(Trace::with_source(steps, format!("{}+rop", trace.source_id)))
}

pub fn gen_dop(trace: &Trace, spec: &AttackSpec) -> Result<Trace> {
    gen_dop_with_budget(trace, spec, DEFAULT_DOP_RETRY_BUDGET)
}

pub fn gen_dop_with_budget(trace: &Trace, spec: &AttackSpec, budget: usize) -> Result<Trace> {
    if spec.kind != AttackKind::Dop {
        return Err(Error::Spec("gen_dop called with a non-DOP spec".into()));
    }
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    spec.validate(trace.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planner = SplicePlanner::new(trace)?;
    let len = trace.len();
    let mut pos = match spec.pos {
        SplicePos::At(p) => p,
        SplicePos::Random => rng.gen_range(1..=len),
    };
    for _ in 0..budget {
        if let Some(atk) = planner.find(pos, spec.inserts, spec.repeats > 0, &mut rng) {
            let block: Vec<Address> = atk.iter().map(|&i| planner.node_ids[i]).collect();
            let mut steps = Vec::with_capacity(len + spec.added_len());
            steps.extend_from_slice(&trace.steps[..pos]);
            for _ in 0..=spec.repeats {
                steps.extend_from_slice(&block);
            }
            steps.extend_from_slice(&trace.steps[pos..]);
            return Ok(Trace::with_source(steps, format!("{}+dop", trace.source_id)));
        }
        pos = rng.gen_range(1..=len);
    }
    Err(Error::NoDopSplice { attempts: budget })
}

/// Benign transition structure used to search for DOP blocks.
struct SplicePlanner {
    node_ids: Vec<Address>,
    step_nodes: Vec<usize>,
    first_seen: Vec<usize>,
    succ: Vec<Vec<usize>>,
    edges: HashSet<(usize, usize)>,
}

impl SplicePlanner {
    fn new(trace: &Trace) -> Result<Self> {
        let topo = build_topology(trace)?;
        let n = topo.node_ids.len();
        let mut first_seen = vec![usize::MAX; n];
        for (step, &node) in topo.step_nodes.iter().enumerate() {
            if first_seen[node] == usize::MAX {
                first_seen[node] = step;
            }
        }
        let mut succ = vec![Vec::new(); n];
        let mut edges = HashSet::with_capacity(topo.edges.len());
        for (u, v) in topo.edges.iter() {
            succ[u].push(v);
            edges.insert((u, v));
        }
        Ok(SplicePlanner {
            node_ids: topo.node_ids,
            step_nodes: topo.step_nodes,
            first_seen,
            succ,
            edges,
        })
    }

    /// Samples a block of `inserts` prefix nodes that enters from
    /// `trace[pos-1]`, follows benign edges, and rejoins at `trace[pos]`.
    /// With `cyclic`, the block must also be able to follow itself.
    fn find(
        &self,
        pos: usize,
        inserts: usize,
        cyclic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<usize>> {
        let n = self.node_ids.len();
        let in_prefix = |v: usize| self.first_seen[v] < pos;
        let entry = self.step_nodes[pos - 1];
        let rejoin = self.step_nodes.get(pos).copied();
        let can_end = |v: usize| {
            in_prefix(v) && rejoin.map_or(true, |r| self.edges.contains(&(v, r)))
        };

        let starts: Vec<usize> = self.succ[entry].iter().copied().filter(|&s| in_prefix(s)).collect();
        let mut feasible: Vec<(usize, Vec<Vec<bool>>)> = Vec::new();
        for &start in &starts {
            // layers[r][v]: a walk of r more transitions from v ends on a valid last node
            let mut layers: Vec<Vec<bool>> = Vec::with_capacity(inserts);
            layers.push(
                (0..n)
                    .map(|v| can_end(v) && (!cyclic || self.edges.contains(&(v, start))))
                    .collect(),
            );
            for r in 1..inserts {
                let prev = &layers[r - 1];
                let layer: Vec<bool> = (0..n)
                    .map(|v| in_prefix(v) && self.succ[v].iter().any(|&w| prev[w]))
                    .collect();
                if !layer.iter().any(|&b| b) {
                    break;
                }
                layers.push(layer);
            }
            if layers.len() == inserts && layers[inserts - 1][start] {
                feasible.push((start, layers));
            }
        }
        if feasible.is_empty() {
            return None;
        }
        let (start, layers) = &feasible[rng.gen_range(0..feasible.len())];
        let mut atk = Vec::with_capacity(inserts);
        let mut cur = *start;
        atk.push(cur);
        for remaining in (0..inserts - 1).rev() {
            let options: Vec<usize> = self.succ[cur]
                .iter()
                .copied()
                .filter(|&w| layers[remaining][w])
                .collect();
            cur = options[rng.gen_range(0..options.len())];
            atk.push(cur);
        }
        Some(atk)
    }
}

/// Distinct directed transitions of a trace, by address.
pub fn edge_set(trace: &Trace) -> HashSet<(Address, Address)> {
    trace.steps.windows(2).map(|w| (w[0], w[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u64 = 0xa;
    const B: u64 = 0xb;
    const C: u64 = 0xc;
    const D: u64 = 0xd;

    #[test]
    fn rop_structure() {
        let t = Trace::new(vec![A, B, C]);
        let out = gen_rop(&t, &AttackSpec::rop(SplicePos::At(1), 2, 42)).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.steps[0], A);
        assert_eq!(&out.steps[3..], &[B, C]);
        assert!(out.steps[1..3].iter().all(|s| t.steps.contains(s)));
    }

    #[test]
    fn rop_rejects_bad_specs() {
        let t = Trace::new(vec![A, B, C]);
        assert!(matches!(
            gen_rop(&t, &AttackSpec::rop(SplicePos::At(1), 0, 1)),
            Err(Error::Spec(_))
        ));
        assert!(matches!(
            gen_rop(&t, &AttackSpec::rop(SplicePos::At(4), 1, 1)),
            Err(Error::Spec(_))
        ));
        // pos == len appends at the end
        let tail = gen_rop(&t, &AttackSpec::rop(SplicePos::At(3), 1, 1)).unwrap();
        assert_eq!(&tail.steps[..3], &t.steps[..]);
    }

    #[test]
    fn rop_sampling_is_uniform() {
        let t = Trace::new(vec![A, B]);
        let runs = 10_000;
        let hits = (0..runs)
            .filter(|&seed| {
                let out = gen_rop(&t, &AttackSpec::rop(SplicePos::At(1), 1, seed)).unwrap();
                out.steps[1] == A
            })
            .count();
        let freq = hits as f64 / runs as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn dop_worked_example() {
        let t = Trace::new(vec![A, B, C, A, B, C, D]);
        let out = gen_dop(&t, &AttackSpec::dop(SplicePos::At(3), 3, 0, 9)).unwrap();
        assert_eq!(out.steps, vec![A, B, C, A, B, C, A, B, C, D]);
        assert!(edge_set(&out).is_subset(&edge_set(&t)));

        let rep = gen_dop(&t, &AttackSpec::dop(SplicePos::At(3), 3, 1, 9)).unwrap();
        assert_eq!(rep.len(), 13);
        assert_eq!(edge_set(&rep), edge_set(&t));
    }

    #[test]
    fn dop_without_revisits_fails() {
        let t = Trace::new(vec![A, B]);
        assert!(matches!(
            gen_dop(&t, &AttackSpec::dop(SplicePos::At(1), 1, 0, 3)),
            Err(Error::NoDopSplice { attempts: DEFAULT_DOP_RETRY_BUDGET })
        ));
    }

    #[test]
    fn dop_rejects_pos_zero() {
        let t = Trace::new(vec![A, B, A]);
        assert!(matches!(
            gen_dop(&t, &AttackSpec::dop(SplicePos::At(0), 1, 0, 3)),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn dop_repeated_single_step_needs_self_loop() {
        let no_loop = Trace::new(vec![A, B, A, B, C]);
        assert!(matches!(
            gen_dop(&no_loop, &AttackSpec::dop(SplicePos::Random, 1, 2, 0)),
            Err(Error::NoDopSplice { .. })
        ));
        let with_loop = Trace::new(vec![A, B, B, A, B, C]);
        for seed in 0..20 {
            let out = gen_dop(&with_loop, &AttackSpec::dop(SplicePos::Random, 1, 2, seed)).unwrap();
            assert_eq!(out.len(), with_loop.len() + 3);
            assert!(edge_set(&out).is_subset(&edge_set(&with_loop)), "seed {seed}: {:?}", out.steps);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = Trace::new(vec![A, B, C, A, C, B, A, B, C, D, A, B]);
        for spec in [
            AttackSpec::rop(SplicePos::Random, 4, 11),
            AttackSpec::dop(SplicePos::Random, 2, 3, 11),
        ] {
            assert_eq!(generate(&t, &spec).unwrap(), generate(&t, &spec).unwrap());
        }
    }
}
