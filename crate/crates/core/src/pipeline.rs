//! End-to-end experiment: task, training, flow and stability analysis,
//! Fisher information, poisoning and the cloning attack, written as one
//! bundle of artifacts plus a summary.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::{common_hash, scan_bundle, write_json, write_text, write_with_sidecar};
use crate::clone::{
    attack_experiment, engineer_victim, victim_observations, AttackConfig, CloneReport, EngineeringConfig,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fim::{fim, poison_dataset, DecodeRule, FimMethod, DEFAULT_POISON_BUDGET, ZERO_FIM_TOL};
use crate::flow::{detect_fixed_point, flow_trace, BasisSpec, FlowTrace, OperatorBasis};
use crate::model::save_model;
use crate::provenance::config_hash;
use crate::rbm::{Conditioning, Direction, RbmStack};
use crate::stability::{relevance_report, DEFAULT_FD_STEP, DEFAULT_TOL_EIG};
use crate::state::BinaryState;
use crate::train::{make_task, train_layerwise, TaskKind, TrainingConfig, TrainingOutcome};
use crate::flow::{DEFAULT_FIXED_POINT_TOL, DEFAULT_FIXED_POINT_WINDOW};

/// Largest width the pipeline accepts: a layer's joint spans `2n` bits.
pub const MAX_PIPELINE_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub fd_step: f64,
    pub tol_eig: f64,
    pub fixed_point_tol: f64,
    pub window: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            fd_step: DEFAULT_FD_STEP,
            tol_eig: DEFAULT_TOL_EIG,
            fixed_point_tol: DEFAULT_FIXED_POINT_TOL,
            window: DEFAULT_FIXED_POINT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub seeds: Vec<u64>,
    /// Defaults to the victim's depth.
    pub clone_depth: Option<usize>,
    /// Defaults to the victim's trainer settings.
    pub trainer: Option<TrainingConfig>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            seeds: (0..5).collect(),
            clone_depth: None,
            trainer: None,
        }
    }
}

fn default_budget() -> f64 {
    DEFAULT_POISON_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Number of layers of the victim.
    pub depth: usize,
    #[serde(default)]
    pub trainer: TrainingConfig,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default)]
    pub attack: AttackSpec,
    /// Scale the trained victim until its generation flow is unstable.
    #[serde(default)]
    pub engineering: Option<EngineeringConfig>,
    /// Not part of the config hash, so reruns elsewhere hash identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = crate::model::parse(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(1..=MAX_PIPELINE_WIDTH).contains(&self.task.n) {
            return bad(format!("task.n must lie in 1..={MAX_PIPELINE_WIDTH}, got {}", self.task.n));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.budget) {
            return bad(format!("budget must lie in [0, 0.5), got {}", self.budget));
        }
        let a = &self.analysis;
        if !(a.fd_step > 0.0 && a.tol_eig >= 0.0 && a.fixed_point_tol > 0.0 && a.window >= 1) {
            return bad("analysis needs fd_step > 0, tol_eig >= 0, fixed_point_tol > 0, window >= 1".into());
        }
        self.basis.build(self.task.n)?;
        self.trainer.validate()?;
        self.attack_config().validate()
    }

    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = None;
        config_hash(&keyed)
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            clone_depth: self.attack.clone_depth.unwrap_or(self.depth),
            trainer: self.attack.trainer.clone().unwrap_or_else(|| self.trainer.clone()),
            budget: self.budget,
            seeds: self.attack.seeds.clone(),
            fd_step: self.analysis.fd_step,
        }
    }
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

pub(crate) fn trace_csv(outcome: &TrainingOutcome) -> String {
    let mut out = format!("sweep,objective\n0,{}\n", outcome.initial_objective);
    for (i, v) in outcome.trace.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", i + 1));
    }
    out
}

pub const TRACE_COLUMNS: [&str; 2] = ["sweep", "objective"];

/// Writes a flow trace as CSV with its fixed-point verdict in the sidecar.
pub fn write_flow(path: &Path, hash: &str, flow: &FlowTrace, tol: f64, window: usize) -> Result<()> {
    let csv = flow.to_csv();
    let columns = flow.csv_columns();
    let header: Vec<&str> = columns.iter().map(String::as_str).collect();
    let window = window.min(flow.deltas.len());
    let verdict = if window == 0 {
        Value::Null
    } else {
        let v = detect_fixed_point(flow, tol, window)?;
        json!({"converged": v.converged, "tail_delta": v.tail_delta, "tol": v.tol, "window": v.window})
    };
    write_with_sidecar(
        path,
        "couplings",
        hash,
        &csv,
        Some(&header),
        json!({
            "direction": flow.direction,
            "conditioning": flow.conditioning,
            "approximate": flow.is_approximate(),
            "fixed_point": verdict,
        }),
    )
}

/// Relevance reports over several conditionings of one direction.
pub fn stability_sweep(
    stack: &RbmStack,
    direction: Direction,
    conditionings: &[Conditioning],
    analysis: &AnalysisConfig,
) -> Result<Value> {
    let basis = Arc::new(OperatorBasis::complete(stack.n())?);
    let mut reports = Vec::new();
    let (mut relevant, mut radius) = (false, 0.0f64);
    for cond in conditionings {
        let flow = flow_trace(stack, cond, direction, &basis)?;
        let report = relevance_report(stack, &flow, analysis.fd_step, analysis.tol_eig)?;
        relevant |= report.has_relevant;
        radius = radius.max(report.max_spectral_radius());
        let mut entry = report.to_json();
        entry["conditioning"] = json!(cond);
        reports.push(entry);
    }
    Ok(json!({
        "direction": direction,
        "has_relevant": relevant,
        "max_spectral_radius": radius,
        "reports": reports,
    }))
}

/// Chain-rule Fisher matrices at each label, each checked against the score
/// oracle.
pub fn fim_sweep(stack: &RbmStack, labels: &[BinaryState], fd_step: f64) -> Result<Value> {
    let mut entries = Vec::new();
    let mut top = 0.0f64;
    for y in labels {
        let chain = fim(stack, &y.to_reals(), FimMethod::ChainRule, fd_step)?;
        let oracle = fim(stack, &y.to_reals(), FimMethod::ScoreOracle, fd_step)?;
        top = top.max(chain.top_eigenvalue());
        let diff = (&chain.matrix - &oracle.matrix).norm();
        let mut entry = chain.to_json();
        entry["oracle_frobenius_difference"] = json!(diff);
        entries.push(entry);
    }
    Ok(json!({
        "entries": entries,
        "top_eigenvalue": top,
        "nonzero": top.abs() > ZERO_FIM_TOL,
    }))
}

fn distinct_labels(stack: &RbmStack, task: &Dataset) -> Result<Vec<BinaryState>> {
    let mut labels: Vec<BinaryState> = Vec::new();
    for r in task.records() {
        let y = stack.decode(&r.x)?;
        if !labels.contains(&y) {
            labels.push(y);
        }
    }
    Ok(labels)
}

/// Runs every stage and writes the bundle into `out`. Returns the summary.
///
/// A failing stage aborts with its name; artifacts from earlier stages stay
/// on disk.
pub fn full_pipeline(config: &ExperimentConfig, out: &Path) -> Result<Value> {
    config.validate()?;
    let hash = config.hash();
    let n = config.task.n;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), "config", &hash, serde_json::to_value(config).unwrap())?;

    let task = stage("gen-task", make_task(config.task.name, n, config.task.seed))?;
    write_with_sidecar(&out.join("task.jsonl"), "task", &hash, &task.to_jsonl(), None, json!({}))?;

    let outcome = stage("train", train_layerwise(n, config.depth, &task, &config.trainer))?;
    let mut trained = outcome.stack.clone();
    trained.meta.training.config_hash = hash.clone();
    write_text(&out.join("model.json"), &save_model(&trained))?;
    write_with_sidecar(
        &out.join("model.trace.csv"),
        "trace",
        &hash,
        &trace_csv(&outcome),
        Some(&TRACE_COLUMNS),
        json!({"converged": outcome.converged}),
    )?;

    let (victim, engineering) = match &config.engineering {
        Some(eng) => {
            let e = stage("engineer", engineer_victim(&trained, &task, eng))?;
            let summary = json!({
                "has_relevant": e.has_relevant,
                "scale": e.scale,
                "probes": e.probes,
            });
            write_json(&out.join("engineering.json"), "engineering", &hash, summary.clone())?;
            let mut v = e.stack;
            v.meta.training.config_hash = hash.clone();
            write_text(&out.join("victim.json"), &save_model(&v))?;
            (v, summary)
        }
        None => (trained, Value::Null),
    };

    let xs: Vec<BinaryState> = task.records().iter().map(|r| r.x.clone()).collect();
    let labels = stage("couplings", distinct_labels(&victim, &task))?;
    stage("couplings", (|| {
        let basis = Arc::new(config.basis.build(n)?);
        let a = &config.analysis;
        let class = flow_trace(&victim, &Conditioning::Input(xs[0].clone()), Direction::Classification, &basis)?;
        write_flow(&out.join("couplings_classification.csv"), &hash, &class, a.fixed_point_tol, a.window)?;
        let gen = flow_trace(&victim, &Conditioning::Output(labels[0].to_reals()), Direction::Generation, &basis)?;
        write_flow(&out.join("couplings_generation.csv"), &hash, &gen, a.fixed_point_tol, a.window)
    })())?;

    let class_conds: Vec<Conditioning> = xs.iter().cloned().map(Conditioning::Input).collect();
    let gen_conds: Vec<Conditioning> = labels.iter().map(|y| Conditioning::Output(y.to_reals())).collect();
    let class_stab = stage("stability", stability_sweep(&victim, Direction::Classification, &class_conds, &config.analysis))?;
    let gen_stab = stage("stability", stability_sweep(&victim, Direction::Generation, &gen_conds, &config.analysis))?;
    write_json(&out.join("stability_classification.json"), "stability", &hash, class_stab.clone())?;
    write_json(&out.join("stability_generation.json"), "stability", &hash, gen_stab.clone())?;

    let fims = stage("fim", fim_sweep(&victim, &labels, config.analysis.fd_step))?;
    write_json(&out.join("fim.json"), "fim", &hash, fims.clone())?;

    let observations = stage("poison", victim_observations(&victim, &task))?;
    let (poisoned, poison_report) = if config.budget > 0.0 {
        let (data, report) = stage(
            "poison",
            poison_dataset(&victim, &observations, config.budget, DecodeRule::Round, config.analysis.fd_step),
        )?;
        (data, serde_json::to_value(&report).unwrap())
    } else {
        (observations.clone(), json!({"budget": 0.0, "fd_step": config.analysis.fd_step, "entries": []}))
    };
    write_with_sidecar(&out.join("observations.jsonl"), "observations", &hash, &observations.to_jsonl(), None, json!({}))?;
    write_with_sidecar(&out.join("poisoned.jsonl"), "poisoned", &hash, &poisoned.to_jsonl(), None, json!({}))?;
    write_json(&out.join("poison_report.json"), "poison_report", &hash, poison_report)?;

    let clone_report = stage("clone", attack_experiment(&victim, &task, &config.attack_config()))?;
    write_json(&out.join("clone_report.json"), "clone_report", &hash, serde_json::to_value(&clone_report).unwrap())?;
    write_with_sidecar(
        &out.join("clone_summary.csv"),
        "clone_summary",
        &hash,
        &clone_report.to_csv(),
        Some(&CLONE_COLUMNS),
        json!({}),
    )?;

    let victim_accuracy = xs
        .iter()
        .zip(task.records())
        .filter(|(x, r)| victim.decode(x).map(|d| d == r.y.round()).unwrap_or(false))
        .count() as f64
        / xs.len() as f64;
    let summary = summarize(config, &class_stab, &gen_stab, &fims, &clone_report, engineering, victim_accuracy);
    write_json(&out.join("summary.json"), "summary", &hash, summary.clone())?;
    stage("report", report_bundle(out, &out.join("report.json")))?;
    Ok(summary)
}

pub const CLONE_COLUMNS: [&str; 6] = ["condition", "seed", "residual", "output_kl", "misclassification", "agreement"];

fn summarize(
    config: &ExperimentConfig,
    class_stab: &Value,
    gen_stab: &Value,
    fims: &Value,
    clone: &CloneReport,
    engineering: Value,
    victim_accuracy: f64,
) -> Value {
    let nonzero_fim = fims["nonzero"].as_bool().unwrap_or(false);
    let identical = !clone.poisoned.is_empty()
        && clone
            .clean
            .iter()
            .zip(&clone.poisoned)
            .all(|(c, p)| c.residual == p.residual && c.comparison == p.comparison);
    json!({
        "victim_accuracy": victim_accuracy,
        "vulnerability": {
            "classification_has_relevant": class_stab["has_relevant"],
            "max_classification_radius": class_stab["max_spectral_radius"],
        },
        "defence": {
            "generation_has_relevant": gen_stab["has_relevant"],
            "max_generation_radius": gen_stab["max_spectral_radius"],
            "nonzero_fim": nonzero_fim,
            "top_fim_eigenvalue": fims["top_eigenvalue"],
            "available": nonzero_fim && config.budget > 0.0 && clone.poisoning_unavailable.is_none(),
        },
        "engineering": engineering,
        "attack": {
            "budget": config.budget,
            "poisoning_unavailable": clone.poisoning_unavailable,
            "identical_conditions": identical,
            "poison_always_hurts": clone.poison_always_hurts(),
            "clean_misclassification": clone.clean_summary.misclassification.mean,
            "poisoned_misclassification": clone.poisoned_summary.as_ref().map(|s| s.misclassification.mean),
            "detectability": clone.detectability,
        },
    })
}

/// Validates every artifact in `bundle`, refuses mixed config hashes, and
/// writes an index with the headline numbers to `out`.
pub fn report_bundle(bundle: &Path, out: &Path) -> Result<Value> {
    let artifacts: Vec<_> = scan_bundle(bundle)?
        .into_iter()
        .filter(|a| a.path != out)
        .collect();
    let hash = common_hash(&artifacts)?;
    let listing: Vec<Value> = artifacts
        .iter()
        .map(|a| {
            json!({
                "file": a.path.file_name().map(|f| f.to_string_lossy().into_owned()),
                "kind": a.kind,
            })
        })
        .collect();
    let summary_path = bundle.join("summary.json");
    let headline = match std::fs::read_to_string(&summary_path) {
        Ok(text) => serde_json::from_str::<Value>(&text)
            .map_err(|e| Error::schema(summary_path.display().to_string(), e.to_string()))?,
        Err(_) => Value::Null,
    };
    let report = json!({
        "artifacts": listing,
        "summary": headline,
    });
    write_json(out, "report", &hash, report.clone())?;
    Ok(report)
}
