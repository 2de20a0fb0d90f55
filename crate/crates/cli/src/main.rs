mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfa_core::attack::{generate, AttackKind, AttackSpec, SplicePos};
use cfa_core::attest::{attest, calibrate, AttestationProfile, Outcome, DEFAULT_VALIDATION_TRACES};
use cfa_core::eval::{
    ablation_csv, gen_workload, prepare_reps, run_dop_grid, run_rop_grid, run_threshold_ablation, DopParams,
    ExperimentConfig, WorkloadSpec,
};
use cfa_core::gnn::persist::ModelFile;
use cfa_core::gnn::train::train;
use cfa_core::trace_io::{trace_stats, CorpusManifest, Label, ManifestEntry, Role};
use cfa_core::{build_graph_with, Error, ExecutionGraph, GraphOptions, Result, Trace, TraceFormat};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use config::Config;

const EXIT_MALICIOUS: u8 = 10;

#[derive(Parser)]
#[command(name = "cfa", version, about = "Control-flow attestation with a graph autoencoder")]
struct Cli {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a trace into an execution graph.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = GraphFormat::Json)]
        format: GraphFormat,
        /// Print trace and graph sizes.
        #[arg(long)]
        stats: bool,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Print trace and graph size statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Train the autoencoder on one execution graph.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-epoch training history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        kl_weight: Option<f64>,
    },
    /// Derive the attestation threshold from validation graphs.
    Calibrate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Graph of the training trace.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        val: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attest one execution. Exits 0 if benign and 10 if malicious.
    Attest {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Execution graph to attest.
        #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
        graph: Option<PathBuf>,
        /// Raw trace to attest; converted with the configured features.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Synthesize a ROP or DOP variant of a trace.
    GenAttack {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Splice index, or `random`.
        #[arg(long, default_value = "random")]
        pos: String,
        #[arg(long)]
        inserts: usize,
        #[arg(long, default_value_t = 0)]
        repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TraceFormatArg::Text)]
        format: TraceFormatArg,
    },
    /// Write a synthetic benign corpus and its manifest.
    GenWorkload {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value_t = DEFAULT_VALIDATION_TRACES)]
        n_val: usize,
        #[arg(long, value_enum, default_value_t = TraceFormatArg::Text)]
        format: TraceFormatArg,
    },
    /// Run a detection experiment over repeated synthetic workloads.
    Evaluate {
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// First repetition seed; repetitions use consecutive seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        reps: u64,
        #[command(flatten)]
        workload: WorkloadArgs,
        /// ROP insert counts.
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 50, 500])]
        lengths: Vec<usize>,
        /// Attacks per repetition (and per length for ROP).
        #[arg(long, default_value_t = 50)]
        attacks: usize,
        #[arg(long, default_value_t = DEFAULT_VALIDATION_TRACES)]
        n_val: usize,
        #[arg(long, default_value_t = 50)]
        n_benign: usize,
        /// Calibration-set sizes for the threshold ablation.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 10])]
        n_values: Vec<usize>,
        /// Writes report.json and report.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FeatureArgs {
    /// Append the constant 16th feature column.
    #[arg(long)]
    constant_feature: bool,
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long, value_enum, default_value_t = Profile::Reference)]
    profile: Profile,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    branching: Option<f64>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    entropy: Option<f64>,
}

impl WorkloadArgs {
    fn spec(&self, seed: u64) -> WorkloadSpec {
        let base = match self.profile {
            Profile::Toy => WorkloadSpec::default(),
            Profile::Reference => WorkloadSpec::reference(),
            Profile::Large => WorkloadSpec::large(),
        };
        WorkloadSpec {
            n_blocks: self.blocks.unwrap_or(base.n_blocks),
            branching: self.branching.unwrap_or(base.branching),
            trace_len: self.len.unwrap_or(base.trace_len),
            n_traces: self.traces.unwrap_or(base.n_traces),
            input_entropy: self.entropy.unwrap_or(base.input_entropy),
            seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// 100 blocks, 10⁴ steps.
    Toy,
    /// 200 blocks, 4·10⁴ steps.
    Reference,
    /// 1800 blocks, 10⁵ steps.
    Large,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphFormat {
    Json,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceFormatArg {
    Text,
    Binary,
}

impl From<TraceFormatArg> for TraceFormat {
    fn from(f: TraceFormatArg) -> Self {
        match f {
            TraceFormatArg::Text => TraceFormat::Text,
            TraceFormatArg::Binary => TraceFormat::Binary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Rop,
    Dop,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Rop,
    Dop,
    Ablation,
}

/// Process exit code for a failure: 2 for unreadable input, 3 for I/O,
/// 4 for invalid models, profiles, or configurations.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } | Error::EmptyTrace | Error::Json(_) => 2,
        Error::Io(_) | Error::Write(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let level = cli.log_level.clone().or_else(|| config.log_level.clone());
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level.as_deref().unwrap_or("info")))
        .format_timestamp(None)
        .init();
    info!("effective config: {}", serde_json::to_string(&config).unwrap_or_default());
    match run(cli.command, &config) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn seed_or(flag: Option<u64>, config: &Config) -> Result<u64> {
    let seed = flag
        .or(config.seed)
        .ok_or_else(|| Error::Spec("a seed is required (--seed or \"seed\" in the config)".into()))?;
    info!("seed {seed}");
    Ok(seed)
}

fn path_or(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Spec(format!("no {what} path given on the command line or in the config")))
}

fn graph_options(flag: &FeatureArgs, config: &Config) -> GraphOptions {
    GraphOptions {
        constant_feature: flag.constant_feature || config.constant_16th_feature,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(Error::from)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<cfa_core::gnn::model::VgaeModel> {
    ModelFile::from_json(&std::fs::read(path)?)?.to_model()
}

#[derive(Serialize)]
struct SizeReport {
    trace: cfa_core::trace_io::TraceStats,
    nodes: usize,
    edges: usize,
    features: usize,
    graph_bytes_json: usize,
    graph_bytes_binary: usize,
    /// Binary trace bytes over binary graph bytes.
    compression: f64,
}

fn size_report(trace: &Trace, graph: &ExecutionGraph) -> Result<SizeReport> {
    let stats = trace_stats(trace);
    let binary = graph.to_binary().len();
    Ok(SizeReport {
        trace: stats,
        nodes: graph.num_nodes(),
        edges: graph.num_edges(),
        features: graph.feature_dim(),
        graph_bytes_json: graph.to_json()?.len(),
        graph_bytes_binary: binary,
        compression: stats.byte_size_binary as f64 / binary as f64,
    })
}

fn run(command: Command, config: &Config) -> Result<u8> {
    match command {
        Command::Preprocess {
            input,
            out,
            format,
            stats,
            features,
        } => {
            let trace = Trace::read(&input)?;
            let graph = build_graph_with(&trace, &graph_options(&features, config))?;
            let bytes = match format {
                GraphFormat::Json => graph.to_json()?,
                GraphFormat::Binary => graph.to_binary(),
            };
            write(&out, &bytes)?;
            println!(
                "{} nodes, {} edges, {} features",
                graph.num_nodes(),
                graph.num_edges(),
                graph.feature_dim()
            );
            if stats {
                print_json(&size_report(&trace, &graph)?)?;
            }
        }
        Command::Stats { input, features } => {
            let trace = Trace::read(&input)?;
            let graph = build_graph_with(&trace, &graph_options(&features, config))?;
            print_json(&size_report(&trace, &graph)?)?;
        }
        Command::Train {
            graph,
            out,
            history,
            seed,
            max_epochs,
            patience,
            lr0,
            kl_weight,
        } => {
            let out = path_or(out, &config.paths.model, "model")?;
            let mut cfg = config.train.clone();
            cfg.seed = seed_or(seed, config)?;
            cfg.max_epochs = max_epochs.unwrap_or(cfg.max_epochs);
            cfg.patience = patience.unwrap_or(cfg.patience);
            cfg.lr0 = lr0.unwrap_or(cfg.lr0);
            cfg.kl_weight = kl_weight.or(cfg.kl_weight);
            info!("train config: {}", serde_json::to_string(&cfg)?);
            let graph = ExecutionGraph::read(&graph)?;
            let outcome = train(&graph, &cfg)?;
            let best = outcome.history.best().copied();
            write(&out, &ModelFile::from_model(&outcome.model, outcome.history.digest()).to_json()?)?;
            if let Some(path) = history {
                write(&path, &serde_json::to_vec_pretty(&outcome.history)?)?;
            }
            if let Some(b) = best {
                println!(
                    "best epoch {} of {}: AUC {:.4} AP {:.4}",
                    b.epoch,
                    outcome.history.epochs.len(),
                    b.auc,
                    b.ap
                );
            }
        }
        Command::Calibrate {
            model,
            reference,
            val,
            out,
            seed,
        } => {
            // calibration is deterministic; the seed is only recorded
            seed_or(seed, config)?;
            let model = load_model(&path_or(model, &config.paths.model, "model")?)?;
            let out = path_or(out, &config.paths.profile, "profile")?;
            let reference = ExecutionGraph::read(&reference)?;
            let val = val.iter().map(ExecutionGraph::read).collect::<Result<Vec<_>>>()?;
            let profile = calibrate(&model, &reference, &val)?;
            write(&out, &profile.to_json()?)?;
            println!("threshold {} from {} validation graphs", profile.threshold, profile.n_val);
        }
        Command::Attest {
            model,
            profile,
            graph,
            trace,
            features,
        } => {
            let model = load_model(&path_or(model, &config.paths.model, "model")?)?;
            let profile = AttestationProfile::read(path_or(profile, &config.paths.profile, "profile")?)?;
            let (graph, id) = match (graph, trace) {
                (Some(g), _) => (ExecutionGraph::read(&g)?, g.display().to_string()),
                (None, Some(t)) => {
                    let trace = Trace::read(&t)?;
                    (build_graph_with(&trace, &graph_options(&features, config))?, trace.source_id)
                }
                (None, None) => return Err(Error::Spec("nothing to attest".into())),
            };
            let verdict = attest(&profile, &model, &graph, id)?;
            print_json(&verdict)?;
            if verdict.outcome == Outcome::Malicious {
                return Ok(EXIT_MALICIOUS);
            }
        }
        Command::GenAttack {
            kind,
            pos,
            inserts,
            repeats,
            seed,
            input,
            out,
            format,
        } => {
            let pos = match pos.as_str() {
                "random" => SplicePos::Random,
                p => SplicePos::At(
                    p.parse()
                        .map_err(|_| Error::Spec(format!("--pos must be an index or `random`, got {p:?}")))?,
                ),
            };
            let spec = AttackSpec {
                kind: match kind {
                    KindArg::Rop => AttackKind::Rop,
                    KindArg::Dop => AttackKind::Dop,
                },
                pos,
                inserts,
                repeats,
                seed: seed_or(seed, config)?,
            };
            info!("attack spec: {}", serde_json::to_string(&spec)?);
            let trace = Trace::read(&input)?;
            let attacked = generate(&trace, &spec)?;
            write(&out, &cfa_core::trace_io::write_trace(&attacked, format.into())?)?;
            println!("{} steps -> {} steps", trace.len(), attacked.len());
        }
        Command::GenWorkload {
            out_dir,
            seed,
            workload,
            n_val,
            format,
        } => {
            let spec = workload.spec(seed_or(seed, config)?);
            info!("workload spec: {}", serde_json::to_string(&spec)?);
            let w = gen_workload(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            let ext = match format {
                TraceFormatArg::Text => "txt",
                TraceFormatArg::Binary => "bin",
            };
            let mut entries = Vec::new();
            for (k, trace) in w.traces.iter().enumerate() {
                let name = PathBuf::from(format!("trace_{k:03}.{ext}"));
                write(&out_dir.join(&name), &cfa_core::trace_io::write_trace(trace, format.into())?)?;
                let role = match k {
                    0 => Role::Train,
                    k if k <= n_val => Role::Validation,
                    _ => Role::Attest,
                };
                entries.push(ManifestEntry {
                    path: name,
                    role,
                    label: Label::Benign,
                });
            }
            write(&out_dir.join("manifest.json"), &CorpusManifest { entries }.to_json()?)?;
            println!("{} traces of {} steps over {} blocks", w.traces.len(), spec.trace_len, w.blocks.len());
        }
        Command::Evaluate {
            experiment,
            seed,
            reps,
            workload,
            lengths,
            attacks,
            n_val,
            n_benign,
            n_values,
            out_dir,
        } => {
            let first = seed_or(seed, config)?;
            let n_val = match experiment {
                Experiment::Ablation => n_values.iter().copied().max().unwrap_or(n_val),
                _ => n_val,
            };
            let cfg = ExperimentConfig {
                workload: workload.spec(first),
                train: config.train.clone(),
                graph: GraphOptions {
                    constant_feature: config.constant_16th_feature,
                },
                n_val,
                n_benign,
                n_attack: attacks,
            };
            info!("experiment config: {}", serde_json::to_string(&cfg)?);
            let seeds: Vec<u64> = (first..first + reps).collect();
            let contexts = prepare_reps(&cfg, &seeds)?;
            let (json, csv) = match experiment {
                Experiment::Rop => {
                    let r = run_rop_grid(&contexts, &lengths, attacks, n_val)?;
                    (serde_json::to_vec_pretty(&r)?, r.to_csv())
                }
                Experiment::Dop => {
                    let r = run_dop_grid(&contexts, attacks, DopParams::default(), n_val)?;
                    (serde_json::to_vec_pretty(&r)?, r.to_csv())
                }
                Experiment::Ablation => {
                    let rows = run_threshold_ablation(&contexts, &n_values, 100, attacks)?;
                    (serde_json::to_vec_pretty(&rows)?, ablation_csv(&rows))
                }
            };
            print!("{csv}");
            if let Some(dir) = out_dir.or_else(|| config.paths.reports.clone()) {
                write(&dir.join("report.json"), &json)?;
                write(&dir.join("report.csv"), csv.as_bytes())?;
            }
        }
    }
    Ok(0)
}
