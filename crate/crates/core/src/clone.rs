//! Attacker simulation: train replica stacks on observed `(x, y)` pairs,
//! clean and poisoned, and compare them to the victim functionally.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::flow::{flow_trace, OperatorBasis};
use crate::fim::{poison_dataset, DecodeRule, PoisonReport, DEFAULT_POISON_BUDGET};
use crate::rbm::{Conditioning, Direction, RbmStack};
use crate::stability::{relevance_report, DEFAULT_FD_STEP, DEFAULT_TOL_EIG};
use crate::state::{kl_divergence, BinaryState, OutputVector};
use crate::train::{train_layerwise, TrainingConfig, TrainingOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Depth of the replica. The attacker always matches the victim's width.
    pub clone_depth: usize,
    /// Trainer settings; `seed` is overridden by each entry of `seeds`.
    pub trainer: TrainingConfig,
    /// Max-norm poison budget; 0 makes both conditions identical.
    pub budget: f64,
    pub seeds: Vec<u64>,
    pub fd_step: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            clone_depth: 2,
            trainer: TrainingConfig::default(),
            budget: DEFAULT_POISON_BUDGET,
            seeds: (0..5).collect(),
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clone_depth == 0 {
            return Err(Error::InvalidArgument("clone depth must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.budget) {
            return Err(Error::InvalidArgument(format!(
                "budget must lie in [0, 0.5), got {}",
                self.budget
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one clone seed is required".into()));
        }
        self.trainer.validate()
    }
}

/// Trains one replica of width `observations.n()` with the trainer seed `seed`.
pub fn clone_train(observations: &Dataset, config: &AttackConfig, seed: u64) -> Result<TrainingOutcome> {
    if observations.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trainer = TrainingConfig {
        seed,
        ..config.trainer.clone()
    };
    train_layerwise(observations.n(), config.clone_depth, observations, &trainer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelComparison {
    /// Mean over inputs of `D_KL(q_N^victim(·|x) ‖ q_N^clone(·|x))`.
    pub output_kl: f64,
    /// Fraction of inputs whose decoded state matches the victim's.
    pub agreement: f64,
    /// Same, counted per output bit.
    pub bit_agreement: f64,
    /// Fraction of inputs the clone decodes to something other than the label.
    pub misclassification: f64,
}

pub fn compare_models(
    victim: &RbmStack,
    clone: &RbmStack,
    eval_xs: &[BinaryState],
    labels: &[BinaryState],
) -> Result<ModelComparison> {
    if victim.n() != clone.n() {
        return Err(Error::Dimension(format!(
            "victim width {} but clone width {}",
            victim.n(),
            clone.n()
        )));
    }
    if eval_xs.len() != labels.len() || eval_xs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs for {} labels",
            eval_xs.len(),
            labels.len()
        )));
    }
    let (mut kl, mut agree, mut bits, mut wrong) = (0.0, 0usize, 0usize, 0usize);
    for (x, label) in eval_xs.iter().zip(labels) {
        let pv = victim.classify_propagate(x)?.output().clone();
        let pc = clone.classify_propagate(x)?.output().clone();
        kl += kl_divergence(&pv, &pc)?;
        let dv = pv.argmax();
        let dc = pc.argmax();
        agree += usize::from(dv == dc);
        bits += victim.n() - (dv ^ dc).count_ones() as usize;
        wrong += usize::from(dc != label.index());
    }
    let count = eval_xs.len() as f64;
    Ok(ModelComparison {
        output_kl: kl / count,
        agreement: agree as f64 / count,
        bit_agreement: bits as f64 / (count * victim.n() as f64),
        misclassification: wrong as f64 / count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Poisoned,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Poisoned => "poisoned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloneRun {
    pub condition: Condition,
    pub seed: u64,
    /// Final summed training objective of the replica.
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    #[serde(flatten)]
    pub comparison: ModelComparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Spread {
        let v: Vec<f64> = values.collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Spread { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub residual: Spread,
    pub output_kl: Spread,
    pub misclassification: Spread,
    pub agreement: Spread,
}

impl ConditionSummary {
    fn of(runs: &[CloneRun]) -> Self {
        ConditionSummary {
            residual: Spread::of(runs.iter().map(|r| r.residual)),
            output_kl: Spread::of(runs.iter().map(|r| r.comparison.output_kl)),
            misclassification: Spread::of(runs.iter().map(|r| r.comparison.misclassification)),
            agreement: Spread::of(runs.iter().map(|r| r.comparison.agreement)),
        }
    }
}

/// Whether an attacker would notice that the poisoned data resist fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detectability {
    pub clean_residual: f64,
    pub poisoned_residual: f64,
    /// `poisoned_residual - clean_residual`, both seed means.
    pub residual_gap: f64,
    pub detectable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloneReport {
    pub budget: f64,
    pub clone_depth: usize,
    pub seeds: Vec<u64>,
    pub clean: Vec<CloneRun>,
    /// Empty when poisoning is unavailable.
    pub poisoned: Vec<CloneRun>,
    pub clean_summary: ConditionSummary,
    pub poisoned_summary: Option<ConditionSummary>,
    pub detectability: Option<Detectability>,
    /// Set when no label of the task admits a poison.
    pub poisoning_unavailable: Option<String>,
    pub poison_report: Option<PoisonReport>,
}

impl CloneReport {
    /// `poisoned[i].misclassification > clean[i].misclassification` for every seed.
    pub fn poison_always_hurts(&self) -> bool {
        !self.poisoned.is_empty()
            && self
                .clean
                .iter()
                .zip(&self.poisoned)
                .all(|(c, p)| p.comparison.misclassification > c.comparison.misclassification)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,seed,residual,output_kl,misclassification,agreement\n");
        for r in self.clean.iter().chain(&self.poisoned) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.condition,
                r.seed,
                r.residual,
                r.comparison.output_kl,
                r.comparison.misclassification,
                r.comparison.agreement
            ));
        }
        out
    }
}

/// The labels an attacker observes: the victim's decode of every task input.
pub fn victim_observations(victim: &RbmStack, task: &Dataset) -> Result<Dataset> {
    let records = task
        .records()
        .iter()
        .map(|r| {
            Ok(Record {
                x: r.x.clone(),
                y: OutputVector::from(&victim.decode(&r.x)?),
                w: r.w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineeringConfig {
    /// Scale factors tried are `growth^j`, up to and including `max_scale`.
    pub growth: f64,
    pub max_scale: f64,
    pub fd_step: f64,
    pub tol_eig: f64,
}

impl Default for EngineeringConfig {
    fn default() -> Self {
        EngineeringConfig {
            growth: 2.0,
            max_scale: 64.0,
            fd_step: DEFAULT_FD_STEP,
            tol_eig: DEFAULT_TOL_EIG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleProbe {
    pub scale: f64,
    /// Largest generation spectral radius over the victim's decoded labels.
    pub generation_radius: f64,
    pub has_relevant: bool,
}

#[derive(Debug, Clone)]
pub struct EngineeredVictim {
    /// The first scaled stack with a relevant generation direction, or the
    /// unscaled input when no tried scale produced one.
    pub stack: RbmStack,
    pub scale: f64,
    pub has_relevant: bool,
    pub probes: Vec<ScaleProbe>,
}

/// Largest generation spectral radius over the distinct labels `victim`
/// assigns to the task inputs.
pub fn generation_radius(victim: &RbmStack, task: &Dataset, fd_step: f64, tol_eig: f64) -> Result<(f64, bool)> {
    let basis = Arc::new(OperatorBasis::complete(victim.n())?);
    let mut labels: Vec<usize> = Vec::new();
    let (mut radius, mut relevant) = (0.0f64, false);
    for r in task.records() {
        let y = victim.decode(&r.x)?;
        if labels.contains(&y.index()) {
            continue;
        }
        labels.push(y.index());
        let flow = flow_trace(victim, &Conditioning::Output(y.to_reals()), Direction::Generation, &basis)?;
        let report = relevance_report(victim, &flow, fd_step, tol_eig)?;
        radius = radius.max(report.max_spectral_radius());
        relevant |= report.has_relevant;
    }
    Ok((radius, relevant))
}

/// Scales every weight and bias of `victim` by growing factors until the
/// generation flow has a relevant direction.
///
/// Large factors saturate the conditionals; the search stops early once a
/// distribution underflows.
pub fn engineer_victim(victim: &RbmStack, task: &Dataset, config: &EngineeringConfig) -> Result<EngineeredVictim> {
    if !(config.growth > 1.0 && config.max_scale >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "engineering needs growth > 1 and max_scale >= 1, got {} and {}",
            config.growth, config.max_scale
        )));
    }
    let mut probes = Vec::new();
    let mut scale = 1.0;
    while scale <= config.max_scale {
        let scaled = victim.scaled(scale);
        let (generation_radius, has_relevant) =
            match generation_radius(&scaled, task, config.fd_step, config.tol_eig) {
                Ok(r) => r,
                Err(Error::NotPositive { .. }) | Err(Error::InfiniteDivergence { .. }) => break,
                Err(e) => return Err(e),
            };
        probes.push(ScaleProbe {
            scale,
            generation_radius,
            has_relevant,
        });
        if has_relevant {
            return Ok(EngineeredVictim {
                stack: scaled,
                scale,
                has_relevant,
                probes,
            });
        }
        scale *= config.growth;
    }
    Ok(EngineeredVictim {
        stack: victim.clone(),
        scale: 1.0,
        has_relevant: false,
        probes,
    })
}

/// Paired clean/poisoned cloning experiment.
///
/// Misclassification is measured against the task's labels on the task's
/// inputs. Both conditions share clone seeds; runs are spread over threads
/// and collected in seed order.
pub fn attack_experiment(victim: &RbmStack, task: &Dataset, config: &AttackConfig) -> Result<CloneReport> {
    config.validate()?;
    if task.n() != victim.n() {
        return Err(Error::Dimension(format!(
            "task width {} but victim width {}",
            task.n(),
            victim.n()
        )));
    }
    let clean_obs = victim_observations(victim, task)?;
    let (poisoned_obs, poison_report, unavailable) = if config.budget == 0.0 {
        (Some(clean_obs.clone()), None, None)
    } else {
        let (data, report) = poison_dataset(victim, &clean_obs, config.budget, DecodeRule::Round, config.fd_step)?;
        if report.any_poisoned() {
            (Some(data), Some(report), None)
        } else {
            let reason = "Fisher information vanishes at every observed label".to_string();
            (None, Some(report), Some(reason))
        }
    };

    let eval_xs: Vec<BinaryState> = task.records().iter().map(|r| r.x.clone()).collect();
    let labels: Vec<BinaryState> = task.records().iter().map(|r| r.y.round()).collect();

    let mut jobs: Vec<(Condition, u64, &Dataset)> = config.seeds.iter().map(|&s| (Condition::Clean, s, &clean_obs)).collect();
    if let Some(obs) = &poisoned_obs {
        jobs.extend(config.seeds.iter().map(|&s| (Condition::Poisoned, s, obs)));
    }
    let results: Vec<Result<CloneRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(condition, seed, obs)| {
                let (eval_xs, labels) = (&eval_xs, &labels);
                scope.spawn(move || -> Result<CloneRun> {
                    let outcome = clone_train(obs, config, seed)?;
                    let comparison = compare_models(victim, &outcome.stack, eval_xs, labels)?;
                    Ok(CloneRun {
                        condition,
                        seed,
                        residual: outcome.trace.last().copied().unwrap_or(outcome.initial_objective),
                        sweeps: outcome.trace.len(),
                        converged: outcome.converged,
                        comparison,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("clone worker panicked")).collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (clean, poisoned): (Vec<_>, Vec<_>) = runs.into_iter().partition(|r| r.condition == Condition::Clean);

    let clean_summary = ConditionSummary::of(&clean);
    let poisoned_summary = (!poisoned.is_empty()).then(|| ConditionSummary::of(&poisoned));
    let detectability = poisoned_summary.as_ref().map(|p| {
        let gap = p.residual.mean - clean_summary.residual.mean;
        Detectability {
            clean_residual: clean_summary.residual.mean,
            poisoned_residual: p.residual.mean,
            residual_gap: gap,
            detectable: gap > 0.0,
        }
    });
    Ok(CloneReport {
        budget: config.budget,
        clone_depth: config.clone_depth,
        seeds: config.seeds.clone(),
        clean,
        poisoned,
        clean_summary,
        poisoned_summary,
        detectability,
        poisoning_unavailable: unavailable,
        poison_report,
    })
}
