//! Independent reference implementations and checks shared by the
//! integration tests. Nothing here calls the library code it checks.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use cfa_core::attack::{gen_dop, gen_rop, AttackSpec, SplicePos};
use cfa_core::gnn::loss::decode_loss_with_grads;
use cfa_core::gnn::model::{Mode, PreparedGraph, VgaeModel};
use cfa_core::linalg::Matrix;
use cfa_core::{build_graph, Address, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook double loop with a square root per pair.
pub fn brute_hausdorff(a: &Matrix, b: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        let mut nearest = f64::INFINITY;
        for j in 0..b.rows() {
            let mut s = 0.0;
            for d in 0..a.cols() {
                let diff = a.get(i, d) - b.get(j, d);
                s += diff * diff;
            }
            nearest = nearest.min(s.sqrt());
        }
        worst = worst.max(nearest);
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Per-node features recomputed from the raw trace: one scan collects the
/// visit steps of every address, a second scan collects the distinct
/// transitions, then every statistic is taken straight from its
/// definition over the stored lists.
pub fn naive_features(trace: &Trace) -> (Vec<Address>, Vec<[f64; 15]>) {
    let steps = &trace.steps;
    let len = steps.len() as f64;
    let mut order: Vec<Address> = Vec::new();
    let mut visits: HashMap<Address, Vec<usize>> = HashMap::new();
    for (i, &a) in steps.iter().enumerate() {
        visits.entry(a).or_insert_with(|| {
            order.push(a);
            Vec::new()
        });
        visits.get_mut(&a).unwrap().push(i);
    }
    let edges: HashSet<(Address, Address)> = steps.windows(2).map(|w| (w[0], w[1])).collect();

    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let rows = order
        .iter()
        .map(|&a| {
            let v = &visits[&a];
            let count = v.len() as f64;
            let first = v[0] as f64;
            let last = *v.last().unwrap() as f64;
            let m = v.iter().map(|&s| s as f64).sum::<f64>() / count;
            let std = (v.iter().map(|&s| (s as f64 - m).powi(2)).sum::<f64>() / count).sqrt();
            let gap = if v.len() > 1 {
                v.windows(2).map(|w| (w[1] - w[0]) as f64).sum::<f64>() / (count - 1.0)
            } else {
                0.0
            };
            let preds: Vec<Address> = edges.iter().filter(|e| e.1 == a).map(|e| e.0).collect();
            let succs: Vec<Address> = edges.iter().filter(|e| e.0 == a).map(|e| e.1).collect();
            let nvisits = |ns: &[Address]| mean(&ns.iter().map(|n| visits[n].len() as f64).collect::<Vec<_>>());
            let nlast = |ns: &[Address]| mean(&ns.iter().map(|n| *visits[n].last().unwrap() as f64).collect::<Vec<_>>());
            let raw = [
                (preds.len() + succs.len()) as f64,
                count,
                first,
                last,
                preds.len() as f64,
                succs.len() as f64,
                count,
                last - first,
                std,
                gap,
                m,
                nvisits(&preds),
                nvisits(&succs),
                nlast(&preds),
                nlast(&succs),
            ];
            raw.map(|x| x / len)
        })
        .collect();
    (order, rows)
}

/// Trace over `alphabet` symbols with a mix of hot loops and random jumps.
pub fn random_trace(rng: &mut ChaCha8Rng, len: usize, alphabet: u64) -> Trace {
    let mut steps = Vec::with_capacity(len);
    let mut cur = 0u64;
    for _ in 0..len {
        cur = if rng.gen_bool(0.7) {
            (cur + 1) % alphabet
        } else {
            rng.gen_range(0..alphabet)
        };
        steps.push(0x4000 + 4 * cur);
    }
    Trace::new(steps)
}

pub fn transitions(trace: &Trace) -> HashSet<(Address, Address)> {
    trace.steps.windows(2).map(|w| (w[0], w[1])).collect()
}

pub struct DopCheck {
    pub generated: usize,
    pub with_new_edge: usize,
    pub bad_length: usize,
}

/// Seeded DOP generations over random traces; counts outputs that contain
/// a transition missing from their input or have the wrong length.
pub fn dop_generations(count: usize, seed: u64) -> DopCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = DopCheck {
        generated: 0,
        with_new_edge: 0,
        bad_length: 0,
    };
    let mut trace = random_trace(&mut rng, 400, 12);
    let mut benign = transitions(&trace);
    for k in 0..count {
        if k % 100 == 0 {
            let (len, alphabet) = (rng.gen_range(50..400), rng.gen_range(3..20));
            trace = random_trace(&mut rng, len, alphabet);
            benign = transitions(&trace);
        }
        let spec = AttackSpec::dop(
            SplicePos::Random,
            rng.gen_range(1..8),
            rng.gen_range(0..4),
            rng.gen(),
        );
        let Ok(out) = gen_dop(&trace, &spec) else { continue };
        check.generated += 1;
        if transitions(&out).iter().any(|e| !benign.contains(e)) {
            check.with_new_edge += 1;
        }
        if out.len() != trace.len() + spec.inserts * (spec.repeats + 1) {
            check.bad_length += 1;
        }
    }
    check
}

/// Share of single-step ROP inserts into `[a, b]` that pick `a`.
pub fn rop_first_symbol_frequency(runs: u64) -> f64 {
    let (a, b) = (0x10, 0x20);
    let t = Trace::new(vec![a, b]);
    let hits = (0..runs)
        .filter(|&seed| gen_rop(&t, &AttackSpec::rop(SplicePos::At(1), 1, seed)).unwrap().steps[1] == a)
        .count();
    hits as f64 / runs as f64
}

/// Seeded ROP generations whose output is not the input with exactly
/// `inserts` steps, all drawn from the input, spliced in at `pos`.
pub fn rop_shape_violations(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let (len, alphabet) = (rng.gen_range(1..300), rng.gen_range(1..30));
        let trace = random_trace(&mut rng, len, alphabet);
        let pos = rng.gen_range(0..=trace.len());
        let inserts = rng.gen_range(1..200);
        let out = gen_rop(&trace, &AttackSpec::rop(SplicePos::At(pos), inserts, rng.gen())).unwrap();
        let alphabet: HashSet<Address> = trace.steps.iter().copied().collect();
        let ok = out.len() == trace.len() + inserts
            && out.steps[..pos] == trace.steps[..pos]
            && out.steps[pos + inserts..] == trace.steps[pos..]
            && out.steps[pos..pos + inserts].iter().all(|a| alphabet.contains(a));
        bad += usize::from(!ok);
    }
    bad
}

pub struct GradientReport {
    pub cases: usize,
    pub max_nodes: usize,
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub elapsed: Duration,
}

/// Large enough that rounding noise in the loss stays negligible.
const H: f64 = 1e-4;
/// Relative errors are taken against max(|analytic|, |numeric|, FLOOR) so
/// that gradients that are zero up to rounding do not blow up the ratio.
const FLOOR: f64 = 1e-6;

struct Probe {
    loss: f64,
    active: Vec<bool>,
}

fn probe(model: &VgaeModel, g: &PreparedGraph, pos: &[(usize, usize)], neg: &[(usize, usize)], seed: u64) -> Probe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cache = model.forward(g, Mode::Train, &mut rng).unwrap();
    let s = &cache.sample;
    let active = cache
        .pre_activations()
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&x| x > 0.0))
        .collect();
    Probe {
        loss: decode_loss_with_grads(&s.z, &s.mu, &s.logvar, pos, neg).parts.loss,
        active,
    }
}

fn small_graph(rng: &mut ChaCha8Rng) -> (PreparedGraph, Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let nodes = rng.gen_range(3..=10u64);
    let len = rng.gen_range(8..40);
    let steps: Vec<u64> = (0..len).map(|_| 0x100 + rng.gen_range(0..nodes)).collect();
    let graph = build_graph(&Trace::new(steps)).unwrap();
    let prepared = PreparedGraph::new(&graph);
    let pos: Vec<_> = graph.edges.iter().collect();
    let n = graph.num_nodes();
    let neg: Vec<_> = (0..pos.len()).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    (prepared, pos, neg)
}

/// Compares backprop gradients of the training loss with Richardson
/// extrapolated central differences, dropout masks and reparameterization
/// noise held fixed. Entries whose perturbation flips a ReLU are skipped,
/// since the loss is not differentiable there. Panics on the first entry
/// with relative error at or above `tolerance`.
pub fn gradient_check(cases: u64, seed: u64, tolerance: f64) -> GradientReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientReport {
        cases: cases as usize,
        max_nodes: 0,
        checked: 0,
        skipped: 0,
        worst: 0.0,
        elapsed: Duration::ZERO,
    };
    for case in 0..cases {
        let (g, pos, neg) = small_graph(&mut rng);
        report.max_nodes = report.max_nodes.max(g.num_nodes());
        let mut model = VgaeModel::new(15, case);
        // zero biases put every pre-activation next to a ReLU kink
        for layer in model.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let fwd_seed = 1000 + case;

        let mut frng = ChaCha8Rng::seed_from_u64(fwd_seed);
        let cache = model.forward(&g, Mode::Train, &mut frng).unwrap();
        let s = &cache.sample;
        let lg = decode_loss_with_grads(&s.z, &s.mu, &s.logvar, &pos, &neg);
        let grads = model.backward(&g, &cache, &lg.dz, &lg.dmu, &lg.dlogvar);
        let base_active = probe(&model, &g, &pos, &neg, fwd_seed).active;

        for t in 0..grads.tensors.len() {
            let len = grads.tensors[t].len();
            // every bias entry, a sample of weight entries
            let idx: Vec<usize> = if len <= 64 {
                (0..len).collect()
            } else {
                (0..24).map(|_| rng.gen_range(0..len)).collect()
            };
            for i in idx {
                let orig = model.tensors()[t][i];
                let mut at = |delta: f64| {
                    model.tensors_mut()[t][i] = orig + delta;
                    let p = probe(&model, &g, &pos, &neg, fwd_seed);
                    model.tensors_mut()[t][i] = orig;
                    p
                };
                let probes = [at(H), at(-H), at(2.0 * H), at(-2.0 * H)];
                if probes.iter().any(|p| p.active != base_active) {
                    report.skipped += 1;
                    continue;
                }
                let c1 = (probes[0].loss - probes[1].loss) / (2.0 * H);
                let c2 = (probes[2].loss - probes[3].loss) / (4.0 * H);
                // cancels the O(h²) truncation term
                let numeric = (4.0 * c1 - c2) / 3.0;
                let analytic = grads.tensors[t][i];
                let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                report.worst = report.worst.max(rel);
                report.checked += 1;
                assert!(
                    rel < tolerance,
                    "case {case} tensor {t} index {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
    report.elapsed = start.elapsed();
    report
}

/// Median wall time of `runs` calls.
pub fn median_time(runs: usize, mut f: impl FnMut()) -> Duration {
    let mut times: Vec<Duration> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[runs / 2]
}
