//! Synthetic workloads and detection experiments.
//!
//! A workload is a random program-like control-flow graph. Most blocks
//! belong to phases: small, densely branching loops of about
//! `PHASE_BLOCKS` blocks whose last block either loops back or exits. The
//! remaining blocks are dispatchers, one per round. A run walks the
//! rounds in order, and each round's dispatcher calls a fixed subset of
//! the phases in a fixed order, so every phase is identified by the
//! rounds it runs in. Phase step budgets are part of the program; only
//! the branch weights inside phases get per-run log-normal jitter,
//! standing in for different program inputs.
//!
//! Experiments train on trace 0, calibrate on the next `n_val` traces,
//! and attest the remaining benign traces together with ROP/DOP variants
//! of them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{gen_dop, gen_rop, AttackSpec, SplicePos};
use crate::attest::{directed_hausdorff, threshold_from, Outcome};
use crate::error::{Error, Result};
use crate::gnn::model::{PreparedGraph, VgaeModel};
use crate::gnn::train::{train, TrainConfig, TrainHistory};
use crate::graph::{build_graph_with, GraphOptions};
use crate::linalg::Matrix;
use crate::trace_io::{Address, Trace};

const BASE_ADDRESS: Address = 0x0001_0000;
/// Target blocks per phase; phase sizes differ by at most one.
pub const PHASE_BLOCKS: usize = 12;
/// Fewest dispatcher rounds; more are added until every phase gets a
/// distinct round subset.
const MIN_ROUNDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub n_blocks: usize,
    /// Mean out-degree of the control-flow graph (>= 1).
    pub branching: f64,
    pub trace_len: usize,
    pub n_traces: usize,
    /// Standard deviation of the per-trace log-normal jitter applied to
    /// branch weights.
    pub input_entropy: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_blocks: 100,
            branching: 11.0,
            trace_len: 10_000,
            n_traces: 61,
            input_entropy: 0.3,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    /// Profile used by the detection experiments: twice the blocks of the
    /// default and long enough traces that benign runs rarely take an edge
    /// the training run missed.
    pub fn reference() -> Self {
        WorkloadSpec {
            n_blocks: 200,
            trace_len: 40_000,
            ..WorkloadSpec::default()
        }
    }

    /// Profile at the scale of real benchmark traces: ~1.8k blocks, 10⁵ steps.
    pub fn large() -> Self {
        WorkloadSpec {
            n_blocks: 1800,
            trace_len: 100_000,
            ..WorkloadSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return Err(Error::Workload("n_blocks must be at least 2".into()));
        }
        if self.trace_len < self.n_blocks {
            return Err(Error::Workload("trace_len must be at least n_blocks".into()));
        }
        if !(self.branching >= 1.0 && self.branching.is_finite()) {
            return Err(Error::Workload("branching must be at least 1".into()));
        }
        if !(self.input_entropy >= 0.0 && self.input_entropy.is_finite()) {
            return Err(Error::Workload("input_entropy must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub blocks: Vec<Address>,
    /// Ground-truth control-flow edges with base branch weights.
    pub edges: Vec<(usize, usize, f64)>,
    /// Block index ranges of the phases, in program order.
    pub phases: Vec<std::ops::Range<usize>>,
    pub traces: Vec<Trace>,
}

impl Workload {
    pub fn edge_addresses(&self) -> BTreeSet<(Address, Address)> {
        self.edges
            .iter()
            .map(|&(u, v, _)| (self.blocks[u], self.blocks[v]))
            .collect()
    }
}

pub fn gen_workload(spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cfg = random_cfg(spec, &mut rng);
    let traces = (0..spec.n_traces)
        .map(|k| {
            let steps = cfg.walk(spec, &mut rng);
            Trace::with_source(steps, format!("workload-{}-{k}", spec.seed))
        })
        .collect();
    Ok(Workload {
        blocks: cfg.blocks,
        edges: cfg.edges,
        phases: cfg.phases,
        traces,
    })
}

struct Cfg {
    blocks: Vec<Address>,
    edges: Vec<(usize, usize, f64)>,
    phases: Vec<std::ops::Range<usize>>,
    /// Phase of each block; `None` for dispatcher blocks.
    phase_of: Vec<Option<usize>>,
    /// Dispatcher block of each round.
    dispatchers: Vec<usize>,
    /// Run order as (round, phase) slots.
    schedule: Vec<(usize, usize)>,
    /// Relative step budget of each slot (fixed by the program).
    slot_weights: Vec<f64>,
}

/// Number of round subsets usable as phase codes: non-empty and not
/// covering both the first and the last round.
fn usable_codes(rounds: usize) -> usize {
    if rounds < 3 {
        (1 << rounds) - 1
    } else {
        (1 << rounds) - 1 - (1 << (rounds - 2))
    }
}

fn random_cfg(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Cfg {
    let n = spec.n_blocks;
    let mut blocks = Vec::with_capacity(n);
    let mut addr = BASE_ADDRESS;
    for _ in 0..n {
        blocks.push(addr);
        addr += 4 * rng.gen_range(1..16u64);
    }

    // the first `rounds` blocks are dispatchers, the rest is cut into phases
    let phase_count = |rounds: usize| ((n - rounds) / PHASE_BLOCKS).max(1);
    let mut rounds = if n >= MIN_ROUNDS + 2 { MIN_ROUNDS } else { 1 };
    while rounds > 1 && usable_codes(rounds) < phase_count(rounds) {
        rounds += 1;
    }
    let body = n - rounds;
    let n_phases = phase_count(rounds);
    // sizes differ by at most one block
    let phases: Vec<_> = (0..n_phases)
        .map(|p| rounds + p * body / n_phases..rounds + (p + 1) * body / n_phases)
        .collect();
    let mut phase_of = vec![None; n];
    for (p, r) in phases.iter().enumerate() {
        phase_of[r.clone()].fill(Some(p));
    }
    let dispatchers: Vec<usize> = (0..rounds).collect();

    let codes = spread_codes(rounds, n_phases, rng);
    let mut order: Vec<usize> = (0..n_phases).collect();
    order.shuffle(rng);
    let mut schedule = Vec::new();
    for r in 0..rounds {
        schedule.extend(order.iter().filter(|&&p| codes[p] >> r & 1 == 1).map(|&p| (r, p)));
    }

    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    let mut add = |u: usize, v: usize, w: f64| {
        if seen.insert((u, v)) {
            edges.push((u, v, w));
        }
    };
    if rounds > 1 {
        for r in 0..rounds {
            add(dispatchers[r], dispatchers[(r + 1) % rounds], 1.0);
        }
    }
    for &(r, p) in &schedule {
        add(dispatchers[r], phases[p].start, 1.0);
        add(phases[p].end - 1, dispatchers[r], 1.0);
    }
    let extra_mean = spec.branching - 1.0;
    for r in &phases {
        let (start, end) = (r.start, r.end);
        for i in r.clone() {
            add(i, if i + 1 < end { i + 1 } else { start }, 1.0);
            let extra = extra_mean.floor() as usize + usize::from(rng.gen::<f64>() < extra_mean.fract());
            let candidates: Vec<usize> = (start..end).filter(|&t| t != i && t != i + 1).collect();
            for &t in candidates.choose_multiple(rng, extra) {
                add(i, t, rng.gen_range(0.5..1.5));
            }
        }
    }
    let slot_weights = schedule.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
    Cfg {
        blocks,
        edges,
        phases,
        phase_of,
        dispatchers,
        schedule,
        slot_weights,
    }
}

/// Timing signature of a round subset: first, last, mean, and spread of
/// the rounds it covers, as fractions of the round count.
fn code_signature(code: usize, rounds: usize) -> [f64; 4] {
    let on: Vec<f64> = (0..rounds).filter(|r| code >> r & 1 == 1).map(|r| r as f64).collect();
    let k = on.len() as f64;
    let mean = on.iter().sum::<f64>() / k;
    let var = on.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    let r = rounds as f64;
    [on[0] / r, on[on.len() - 1] / r, mean / r, var.sqrt() / r]
}

/// Picks `count` usable round subsets by farthest-point sampling on their
/// timing signatures, so that phases are easy to tell apart by when they
/// run. Subsets spanning the whole run are left out: such a phase would
/// look like a blend of all others.
fn spread_codes(rounds: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let spanning = |c: usize| rounds >= 3 && c & 1 == 1 && c >> (rounds - 1) & 1 == 1;
    let mut pool: Vec<usize> = (1..1usize << rounds).filter(|&c| !spanning(c)).collect();
    pool.shuffle(rng);
    if count >= pool.len() {
        return (0..count).map(|i| pool[i % pool.len()]).collect();
    }
    let sig: Vec<[f64; 4]> = pool.iter().map(|&c| code_signature(c, rounds)).collect();
    let dist = |a: &[f64; 4], b: &[f64; 4]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let mut chosen = vec![0usize];
    let mut nearest: Vec<f64> = sig.iter().map(|s| dist(s, &sig[0])).collect();
    while chosen.len() < count {
        let (best, _) = nearest
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .fold((usize::MAX, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        chosen.push(best);
        for (i, s) in sig.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(s, &sig[best]));
        }
    }
    chosen.into_iter().map(|i| pool[i]).collect()
}

impl Cfg {
    /// One execution. Dispatcher `r` starts each phase scheduled in round
    /// `r`, then hands over to the next round's dispatcher; the schedule
    /// repeats if the trace outlasts it. Inside a phase the walk picks
    /// branches at random and returns to the dispatcher once the slot's
    /// step budget is spent and the phase's exit block is reached.
    fn walk(&self, spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Address> {
        let n = self.blocks.len();
        let mut succ: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(u, v, w) in &self.edges {
            if self.phase_of[u].is_some() && self.phase_of[v].is_some() {
                let jitter: f64 = StandardNormal.sample(&mut *rng);
                succ[u].push((v, w * (spec.input_entropy * jitter).exp()));
            }
        }
        let total: f64 = self.slot_weights.iter().sum();
        let budgets: Vec<usize> = self
            .slot_weights
            .iter()
            .map(|w| ((spec.trace_len as f64 * w / total).round() as usize).max(1))
            .collect();

        let mut steps = Vec::with_capacity(spec.trace_len);
        let mut cur = self.dispatchers[0];
        let mut slot = 0usize;
        let mut in_phase = 0usize;
        while steps.len() < spec.trace_len {
            steps.push(self.blocks[cur]);
            let (round, phase) = self.schedule[slot];
            cur = match self.phase_of[cur] {
                None if cur == self.dispatchers[round] => {
                    in_phase = 0;
                    self.phases[phase].start
                }
                None => self.dispatchers[(cur + 1) % self.dispatchers.len()],
                Some(p) => {
                    in_phase += 1;
                    if cur + 1 == self.phases[p].end && in_phase >= budgets[slot] {
                        slot = (slot + 1) % self.schedule.len();
                        self.dispatchers[round]
                    } else {
                        pick_weighted(&succ[cur], rng)
                    }
                }
            };
        }
        steps
    }
}

fn pick_weighted(options: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut pick = rng.gen::<f64>() * total;
    for &(v, w) in options {
        if pick < w {
            return v;
        }
        pick -= w;
    }
    options[options.len() - 1].0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    /// Records one verdict; `malicious_truth` is the ground-truth label.
    pub fn record(&mut self, malicious_truth: bool, outcome: Outcome) {
        match (malicious_truth, outcome) {
            (true, Outcome::Malicious) => self.tp += 1,
            (true, Outcome::Benign) => self.fn_ += 1,
            (false, Outcome::Malicious) => self.fp += 1,
            (false, Outcome::Benign) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&Confusion> for MetricSummary {
    fn from(c: &Confusion) -> Self {
        MetricSummary {
            fpr: c.fpr(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        }
    }
}

/// Everything one repetition needs to attest new traces: a model trained
/// on trace 0, its reference embeddings, and the calibration distances.
#[derive(Debug, Clone)]
pub struct RepContext {
    pub seed: u64,
    pub model: VgaeModel,
    pub history: TrainHistory,
    pub graph_options: GraphOptions,
    pub reference: Matrix,
    pub val_distances: Vec<f64>,
    /// Benign executions held out for attestation.
    pub benign: Vec<Trace>,
    pub benign_distances: Vec<f64>,
}

impl RepContext {
    pub fn distance(&self, trace: &Trace) -> Result<f64> {
        let graph = build_graph_with(trace, &self.graph_options)?;
        let emb = self.model.embed(&PreparedGraph::new(&graph))?;
        directed_hausdorff(&emb, &self.reference)
    }

    /// Threshold from the first `n_val` calibration distances.
    pub fn threshold(&self, n_val: usize) -> Result<f64> {
        if n_val == 0 || n_val > self.val_distances.len() {
            return Err(Error::Calibration(format!(
                "need 1..={} validation traces, asked for {n_val}",
                self.val_distances.len()
            )));
        }
        Ok(threshold_from(&self.val_distances[..n_val]).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub train: TrainConfig,
    pub graph: GraphOptions,
    pub n_val: usize,
    pub n_benign: usize,
    pub n_attack: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            workload: WorkloadSpec::reference(),
            train: TrainConfig::default(),
            graph: GraphOptions::default(),
            n_val: 10,
            n_benign: 50,
            n_attack: 50,
        }
    }
}

/// Generates the workload for `seed`, trains on trace 0, and embeds the
/// validation and benign attestation traces.
pub fn prepare_rep(cfg: &ExperimentConfig, seed: u64) -> Result<RepContext> {
    let spec = WorkloadSpec {
        n_traces: 1 + cfg.n_val + cfg.n_benign,
        seed,
        ..cfg.workload.clone()
    };
    let workload = gen_workload(&spec)?;
    let mut traces = workload.traces.into_iter();
    let trace0 = traces.next().unwrap();
    let graph0 = build_graph_with(&trace0, &cfg.graph)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let outcome = train(&graph0, &train_cfg)?;
    let reference = outcome.model.embed(&PreparedGraph::new(&graph0))?;
    let mut ctx = RepContext {
        seed,
        model: outcome.model,
        history: outcome.history,
        graph_options: cfg.graph,
        reference,
        val_distances: Vec::new(),
        benign: Vec::new(),
        benign_distances: Vec::new(),
    };
    let val: Vec<Trace> = traces.by_ref().take(cfg.n_val).collect();
    ctx.val_distances = val.iter().map(|t| ctx.distance(t)).collect::<Result<_>>()?;
    ctx.benign = traces.collect();
    ctx.benign_distances = ctx.benign.iter().map(|t| ctx.distance(t)).collect::<Result<_>>()?;
    Ok(ctx)
}

pub fn prepare_reps(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RepContext>> {
    seeds.par_iter().map(|&s| prepare_rep(cfg, s)).collect()
}

fn attack_seed(rep: u64, group: u64, k: u64) -> u64 {
    rep.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (group << 32) ^ k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBreakdown {
    pub inserts: usize,
    pub attacks: usize,
    pub detected: usize,
    pub recall: f64,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub experiment: String,
    pub config: String,
    pub rep: u64,
    pub confusion: Confusion,
    pub metrics: MetricSummary,
    pub mean_attack_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    pub per_length: Vec<LengthBreakdown>,
    pub repetitions: usize,
    pub rows: Vec<RepRow>,
}

pub const CSV_HEADER: &str =
    "experiment,config,rep,tp,fp,tn,fn,fpr,precision,recall,f1,mean_attack_distance";

impl MetricsReport {
    fn from_rows(experiment: &str, rows: Vec<RepRow>, per_length: Vec<LengthBreakdown>) -> Self {
        let mut counts = Confusion::default();
        for r in &rows {
            counts.merge(&r.confusion);
        }
        let reps: BTreeSet<u64> = rows.iter().map(|r| r.rep).collect();
        MetricsReport {
            experiment: experiment.to_string(),
            fpr: counts.fpr(),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
            per_length,
            repetitions: reps.len(),
            rows,
        }
    }

    /// One row per configuration and repetition, then an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_row(&r.experiment, &r.config, &r.rep.to_string(), &r.confusion, r.mean_attack_distance));
        }
        let mean_dist = mean(self.rows.iter().map(|r| r.mean_attack_distance));
        out.push_str(&csv_row(&self.experiment, "all", "aggregate", &self.counts, mean_dist));
        out
    }
}

fn csv_row(experiment: &str, config: &str, rep: &str, c: &Confusion, dist: f64) -> String {
    format!(
        "{experiment},{config},{rep},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        c.fpr(),
        c.precision(),
        c.recall(),
        c.f1(),
        dist
    )
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Verdicts on the benign hold-out set at the threshold from `n_val` traces.
fn benign_confusion(ctx: &RepContext, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for &d in &ctx.benign_distances {
        c.record(false, Outcome::from_distance(d, threshold));
    }
    c
}

/// ROP distances for `count` attacks of `inserts` steps, spliced into the
/// benign hold-out traces in turn.
pub fn rop_distances(ctx: &RepContext, inserts: usize, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|k| {
            let base = &ctx.benign[k % ctx.benign.len()];
            let spec = AttackSpec::rop(SplicePos::Random, inserts, attack_seed(ctx.seed, inserts as u64, k as u64));
            ctx.distance(&gen_rop(base, &spec)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DopParams {
    pub inserts: usize,
    pub repeats: usize,
}

impl Default for DopParams {
    /// 20 × (1 + 99) = 2000 inserted steps.
    fn default() -> Self {
        DopParams {
            inserts: 20,
            repeats: 99,
        }
    }
}

pub fn dop_distances(ctx: &RepContext, params: DopParams, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|k| {
            let base = &ctx.benign[k % ctx.benign.len()];
            let spec = AttackSpec::dop(
                SplicePos::Random,
                params.inserts,
                params.repeats,
                attack_seed(ctx.seed, 0xd0d0, k as u64),
            );
            ctx.distance(&gen_dop(base, &spec)?)
        })
        .collect()
}

fn attack_row(
    experiment: &str,
    config: String,
    ctx: &RepContext,
    threshold: f64,
    attack_distances: &[f64],
) -> RepRow {
    let mut c = benign_confusion(ctx, threshold);
    for &d in attack_distances {
        c.record(true, Outcome::from_distance(d, threshold));
    }
    RepRow {
        experiment: experiment.to_string(),
        config,
        rep: ctx.seed,
        metrics: MetricSummary::from(&c),
        confusion: c,
        mean_attack_distance: mean(attack_distances.iter().copied()),
    }
}

/// ROP grid: for every repetition and attack length, benign hold-out plus
/// `per_length` attacks, attested at the `n_val` threshold.
pub fn run_rop_grid(
    reps: &[RepContext],
    lengths: &[usize],
    per_length: usize,
    n_val: usize,
) -> Result<MetricsReport> {
    let rows: Vec<Vec<(usize, RepRow, usize)>> = reps
        .par_iter()
        .map(|ctx| {
            let t = ctx.threshold(n_val)?;
            lengths
                .iter()
                .map(|&len| {
                    let d = rop_distances(ctx, len, per_length)?;
                    let detected = d.iter().filter(|&&x| x > t).count();
                    Ok((len, attack_row("rop", format!("rop{len}"), ctx, t, &d), detected))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_length = lengths
        .iter()
        .map(|&len| {
            let matching: Vec<&(usize, RepRow, usize)> =
                rows.iter().flatten().filter(|(l, _, _)| *l == len).collect();
            let attacks = matching.len() * per_length;
            let detected = matching.iter().map(|(_, _, d)| d).sum();
            LengthBreakdown {
                inserts: len,
                attacks,
                detected,
                recall: ratio(detected, attacks),
                mean_distance: mean(matching.iter().map(|(_, r, _)| r.mean_attack_distance)),
            }
        })
        .collect();
    let rows = rows.into_iter().flatten().map(|(_, r, _)| r).collect();
    Ok(MetricsReport::from_rows("rop", rows, per_length))
}

pub fn run_dop_grid(
    reps: &[RepContext],
    n_attacks: usize,
    params: DopParams,
    n_val: usize,
) -> Result<MetricsReport> {
    let rows: Vec<RepRow> = reps
        .par_iter()
        .map(|ctx| {
            let t = ctx.threshold(n_val)?;
            let d = dop_distances(ctx, params, n_attacks)?;
            Ok(attack_row(
                "dop",
                format!("dop{}x{}", params.inserts, params.repeats + 1),
                ctx,
                t,
                &d,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_rows("dop", rows, Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_val: usize,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub repetitions: usize,
}

pub const ABLATION_CSV_HEADER: &str = "n_val,fpr,precision,recall,f1,repetitions";

/// Mean per-repetition metrics for each calibration-set size, against the
/// benign hold-out and `n_attacks` ROP attacks of length `rop_inserts`.
/// Calibration sets are nested: the first `n` validation traces.
pub fn run_threshold_ablation(
    reps: &[RepContext],
    n_values: &[usize],
    rop_inserts: usize,
    n_attacks: usize,
) -> Result<Vec<AblationRow>> {
    let per_rep: Vec<(Vec<f64>, Vec<MetricSummary>)> = reps
        .par_iter()
        .map(|ctx| {
            let attacks = rop_distances(ctx, rop_inserts, n_attacks)?;
            let summaries = n_values
                .iter()
                .map(|&n| {
                    let t = ctx.threshold(n)?;
                    Ok(attack_row("ablation", format!("n{n}"), ctx, t, &attacks).metrics)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((attacks, summaries))
        })
        .collect::<Result<_>>()?;
    Ok(n_values
        .iter()
        .enumerate()
        .map(|(k, &n)| AblationRow {
            n_val: n,
            fpr: mean(per_rep.iter().map(|(_, s)| s[k].fpr)),
            precision: mean(per_rep.iter().map(|(_, s)| s[k].precision)),
            recall: mean(per_rep.iter().map(|(_, s)| s[k].recall)),
            f1: mean(per_rep.iter().map(|(_, s)| s[k].f1)),
            repetitions: per_rep.len(),
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.n_val, r.fpr, r.precision, r.recall, r.f1, r.repetitions
        ));
    }
    out
}
