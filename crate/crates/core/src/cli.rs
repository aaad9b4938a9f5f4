//! Command-line driver: every pipeline stage as a subcommand.
//!
//! Exit status is 0 on success, 1 when the computation itself fails (for
//! example, no poison direction exists), and 2 for malformed flags, files
//! or configs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::artifact::{read_text, sidecar_path, validate_artifact, write_json, write_text, write_with_sidecar};
use crate::clone::{attack_experiment, AttackConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fim::{fim, poison_dataset, DecodeRule, FimMethod, DEFAULT_POISON_BUDGET};
use crate::flow::{flow_trace, BasisSpec, OperatorBasis};
use crate::model::{load_model, save_model};
use crate::pipeline::{full_pipeline, report_bundle, trace_csv, write_flow, ExperimentConfig, CLONE_COLUMNS, TRACE_COLUMNS};
use crate::provenance::{config_hash, TOOL_VERSION};
use crate::rbm::{Conditioning, Direction, RbmStack};
use crate::stability::{relevance_report, DEFAULT_FD_STEP, DEFAULT_TOL_EIG};
use crate::state::BinaryState;
use crate::train::{make_task, train_layerwise, TaskKind, TrainingConfig};
use crate::flow::{DEFAULT_FIXED_POINT_TOL, DEFAULT_FIXED_POINT_WINDOW};

#[derive(Debug, Parser)]
#[command(name = "rgshield", version, about = "Exact-enumeration RBM stacks, coupling flows and output poisoning")]
pub struct Cli {
    /// Re-read every written artifact and check it against its schema.
    #[arg(long, global = true)]
    pub validate: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Chain,
    Oracle,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a toy task as JSONL.
    GenTask {
        #[arg(long)]
        name: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a stack layerwise; also writes `<out>.trace.csv`.
    Train {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long = "N")]
        depth: usize,
        /// Trainer settings as JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer distributions of one propagation.
    Propagate {
        #[arg(long)]
        model: PathBuf,
        /// Input bits, e.g. `01`; runs classification.
        #[arg(long, conflicts_with = "y", required_unless_present = "y")]
        x: Option<String>,
        /// Output label, e.g. `10` or `0.9,0.1`; runs generation.
        #[arg(long)]
        y: Option<String>,
    },
    /// Coupling flow along one propagation, as CSV.
    Couplings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        cond: String,
        /// `complete`, `order:K`, or subsets such as `0;1;0,1`.
        #[arg(long, default_value = "complete")]
        basis: BasisSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stability matrices and relevance along one flow, as JSON.
    Stability {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        cond: String,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        fd_step: f64,
        #[arg(long, default_value_t = DEFAULT_TOL_EIG)]
        tol_eig: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fisher information of generation with respect to the label.
    Fim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        y: String,
        #[arg(long, value_enum, default_value = "chain")]
        method: MethodArg,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        fd_step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Poison every label of a task; also writes `<out stem>.report.json`.
    Poison {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = DEFAULT_POISON_BUDGET)]
        budget: f64,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        fd_step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired clean/poisoned cloning attack; also writes `<out stem>.csv`.
    Clone {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = DEFAULT_POISON_BUDGET)]
        budget: f64,
        /// Comma-separated clone seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Clone depth; defaults to the victim's.
        #[arg(long = "N")]
        depth: Option<usize>,
        /// Trainer settings for the clones as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a bundle directory and index it.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from one experiment config into a bundle directory.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs it, and returns the
/// exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Rendered without styling, which also covers NO_COLOR.
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return e.exit_code();
        }
    };
    match execute(&cli, out, err) {
        Ok(written) => {
            if cli.validate {
                for path in &written {
                    if let Err(e) = validate_artifact(path) {
                        let _ = writeln!(err, "error: validation failed: {e}");
                        return 2;
                    }
                    let _ = writeln!(err, "validated {}", path.display());
                }
            }
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn log_resolved(err: &mut dyn Write, command: &str, resolved: Value) {
    let _ = writeln!(err, "{TOOL_VERSION} {command}: {resolved}");
}

fn read_model(path: &Path) -> Result<(RbmStack, String)> {
    let text = read_text(path)?;
    let stack = load_model(&text)?;
    let hash = if stack.meta.training.config_hash.is_empty() {
        config_hash(&text)
    } else {
        stack.meta.training.config_hash.clone()
    };
    Ok((stack, hash))
}

/// The dataset and the hash recorded in its sidecar, or of its text.
fn read_dataset(path: &Path) -> Result<(Dataset, String)> {
    let text = read_text(path)?;
    let data = Dataset::from_jsonl(&text)?;
    let hash = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|m| serde_json::from_str::<Value>(&m).ok())
        .and_then(|m| m["config_hash"].as_str().map(str::to_string))
        .unwrap_or_else(|| config_hash(&text));
    Ok((data, hash))
}

fn read_trainer(path: Option<&PathBuf>) -> Result<TrainingConfig> {
    match path {
        Some(p) => {
            let config: TrainingConfig = crate::model::parse(&read_text(p)?)?;
            config.validate()?;
            Ok(config)
        }
        None => Ok(TrainingConfig::default()),
    }
}

/// `01` style bit strings or comma-separated numbers.
fn parse_reals(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse `{text}` as a state or label"));
    if text.contains(',') {
        text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
    } else {
        text.chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                _ => Err(bad()),
            })
            .collect()
    }
}

fn parse_bits(text: &str) -> Result<BinaryState> {
    let reals = parse_reals(text)?;
    let bits = reals
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            _ => Err(Error::InvalidArgument(format!("`{text}` is not a binary state"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryState::new(bits)
}

fn conditioning(direction: Direction, cond: &str) -> Result<Conditioning> {
    Ok(match direction {
        Direction::Classification => Conditioning::Input(parse_bits(cond)?),
        Direction::Generation => Conditioning::Output(parse_reals(cond)?),
    })
}

/// `path` with its extension replaced by `suffix` (which includes the dot).
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.with_extension("");
    let mut s = stem.into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::GenTask { name, n, seed, out: path } => {
            let kind: TaskKind = name.parse()?;
            let hash = config_hash(&("gen-task", kind, n, seed));
            log_resolved(err, "gen-task", json!({"name": kind, "n": n, "seed": seed, "config_hash": hash}));
            let task = make_task(kind, *n, *seed)?;
            write_with_sidecar(path, "task", &hash, &task.to_jsonl(), None, json!({"name": kind, "n": n, "seed": seed}))?;
            Ok(vec![path.clone()])
        }
        Command::Train { task, n, depth, config, out: path } => {
            let (data, task_hash) = read_dataset(task)?;
            let trainer = read_trainer(config.as_ref())?;
            let hash = config_hash(&(&task_hash, &trainer, n, depth));
            log_resolved(err, "train", json!({"trainer": trainer, "n": n, "N": depth, "seed": trainer.seed, "config_hash": hash}));
            let outcome = train_layerwise(*n, *depth, &data, &trainer)?;
            let mut stack = outcome.stack.clone();
            stack.meta.training.config_hash = hash.clone();
            write_text(path, &save_model(&stack))?;
            let trace_path = sibling(path, ".trace.csv");
            write_with_sidecar(&trace_path, "trace", &hash, &trace_csv(&outcome), Some(&TRACE_COLUMNS), json!({"converged": outcome.converged}))?;
            let _ = writeln!(
                err,
                "trained {} sweeps, objective {:e}, converged {}",
                outcome.trace.len(),
                outcome.trace.last().copied().unwrap_or(outcome.initial_objective),
                outcome.converged
            );
            Ok(vec![path.clone(), trace_path])
        }
        Command::Propagate { model, x, y } => {
            let (stack, _) = read_model(model)?;
            let flow = match (x, y) {
                (Some(x), _) => stack.classify_propagate(&parse_bits(x)?)?,
                (None, Some(y)) => stack.generate_propagate(&parse_reals(y)?)?,
                (None, None) => unreachable!("clap requires one of --x and --y"),
            };
            let layers: Vec<Value> = flow
                .dists
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let layer = match flow.direction {
                        Direction::Classification => i + 1,
                        Direction::Generation => i,
                    };
                    json!({"layer": layer, "probs": d.probs(), "argmax": BinaryState::from_index(d.argmax(), stack.n()).to_string()})
                })
                .collect();
            let doc = json!({"direction": flow.direction, "conditioning": flow.conditioning, "layers": layers});
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&doc).unwrap());
            Ok(vec![])
        }
        Command::Couplings { model, direction, cond, basis, out: path } => {
            let (stack, hash) = read_model(model)?;
            log_resolved(err, "couplings", json!({"direction": direction, "cond": cond, "basis": basis, "config_hash": hash}));
            let basis = Arc::new(basis.build(stack.n())?);
            let flow = flow_trace(&stack, &conditioning(*direction, cond)?, *direction, &basis)?;
            if flow.is_approximate() {
                let _ = writeln!(err, "note: truncated basis, couplings are least-squares approximations");
            }
            write_flow(path, &hash, &flow, DEFAULT_FIXED_POINT_TOL, DEFAULT_FIXED_POINT_WINDOW)?;
            Ok(vec![path.clone()])
        }
        Command::Stability { model, direction, cond, fd_step, tol_eig, out: path } => {
            let (stack, hash) = read_model(model)?;
            log_resolved(err, "stability", json!({"direction": direction, "cond": cond, "fd_step": fd_step, "tol_eig": tol_eig, "config_hash": hash}));
            let basis = Arc::new(OperatorBasis::complete(stack.n())?);
            let c = conditioning(*direction, cond)?;
            let flow = flow_trace(&stack, &c, *direction, &basis)?;
            let report = relevance_report(&stack, &flow, *fd_step, *tol_eig)?;
            let mut entry = report.to_json();
            entry["conditioning"] = json!(c);
            let doc = json!({
                "direction": direction,
                "has_relevant": report.has_relevant,
                "max_spectral_radius": report.max_spectral_radius(),
                "reports": [entry],
            });
            write_json(path, "stability", &hash, doc)?;
            Ok(vec![path.clone()])
        }
        Command::Fim { model, y, method, fd_step, out: path } => {
            let (stack, hash) = read_model(model)?;
            let y = parse_reals(y)?;
            log_resolved(err, "fim", json!({"y": y, "method": format!("{method:?}").to_lowercase(), "fd_step": fd_step, "config_hash": hash}));
            let doc = match method {
                MethodArg::Chain | MethodArg::Oracle => {
                    let m = if matches!(method, MethodArg::Chain) { FimMethod::ChainRule } else { FimMethod::ScoreOracle };
                    let f = fim(&stack, &y, m, *fd_step)?;
                    json!({"entries": [f.to_json()]})
                }
                MethodArg::Both => {
                    let chain = fim(&stack, &y, FimMethod::ChainRule, *fd_step)?;
                    let oracle = fim(&stack, &y, FimMethod::ScoreOracle, *fd_step)?;
                    let diff = (&chain.matrix - &oracle.matrix).norm();
                    let scale = chain.matrix.norm();
                    json!({
                        "entries": [chain.to_json(), oracle.to_json()],
                        "frobenius_difference": diff,
                        "relative_frobenius_difference": if scale > 0.0 { diff / scale } else { diff },
                    })
                }
            };
            write_json(path, "fim", &hash, doc)?;
            Ok(vec![path.clone()])
        }
        Command::Poison { model, task, budget, fd_step, out: path } => {
            let (stack, hash) = read_model(model)?;
            let (data, _) = read_dataset(task)?;
            log_resolved(err, "poison", json!({"budget": budget, "fd_step": fd_step, "decode": DecodeRule::Round, "config_hash": hash}));
            let (poisoned, report) = poison_dataset(&stack, &data, *budget, DecodeRule::Round, *fd_step)?;
            write_with_sidecar(path, "poisoned", &hash, &poisoned.to_jsonl(), None, json!({"budget": budget}))?;
            let report_path = sibling(path, ".report.json");
            write_json(&report_path, "poison_report", &hash, serde_json::to_value(&report).unwrap())?;
            for e in report.entries.iter().filter(|e| !e.poisoned) {
                let _ = writeln!(err, "note: label {:?} has no poison direction and passes through", e.y);
            }
            // artifacts stay on disk, but a run that poisoned nothing is a domain failure
            if !report.any_poisoned() {
                let max_abs = report.entries.iter().map(|e| e.top_eigenvalue.abs()).fold(0.0, f64::max);
                return Err(Error::NoUnstableDirection { max_abs });
            }
            Ok(vec![path.clone(), report_path])
        }
        Command::Clone { victim, task, budget, seeds, depth, config, out: path } => {
            let (stack, hash) = read_model(victim)?;
            let (data, _) = read_dataset(task)?;
            let attack = AttackConfig {
                clone_depth: depth.unwrap_or(stack.depth()),
                trainer: read_trainer(config.as_ref())?,
                budget: *budget,
                seeds: seeds.clone(),
                fd_step: DEFAULT_FD_STEP,
            };
            log_resolved(err, "clone", json!({"attack": attack, "config_hash": hash}));
            let report = attack_experiment(&stack, &data, &attack)?;
            write_json(path, "clone_report", &hash, serde_json::to_value(&report).unwrap())?;
            let csv_path = sibling(path, ".csv");
            write_with_sidecar(&csv_path, "clone_summary", &hash, &report.to_csv(), Some(&CLONE_COLUMNS), json!({}))?;
            if let Some(reason) = &report.poisoning_unavailable {
                let _ = writeln!(err, "note: poisoning unavailable: {reason}");
            }
            Ok(vec![path.clone(), csv_path])
        }
        Command::Report { bundle, out: path } => {
            report_bundle(bundle, path)?;
            Ok(vec![path.clone()])
        }
        Command::Pipeline { config, out: dir } => {
            let experiment = ExperimentConfig::from_json(&read_text(config)?)?;
            let dir = match (dir, &experiment.output_dir) {
                (Some(d), _) => d.clone(),
                (None, Some(d)) => PathBuf::from(d),
                (None, None) => {
                    return Err(Error::InvalidArgument("pipeline needs --out or output_dir in the config".into()))
                }
            };
            log_resolved(err, "pipeline", json!({"config": experiment, "config_hash": experiment.hash()}));
            let summary = full_pipeline(&experiment, &dir)?;
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap());
            let mut written: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| !p.to_string_lossy().ends_with(crate::artifact::SIDECAR_SUFFIX))
                .collect();
            written.sort();
            Ok(written)
        }
    }
}
