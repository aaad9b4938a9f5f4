//! Layerwise training of an RBM stack.
//!
//! Each layer `k` is fitted by minimizing `D_KL(r_k ‖ t_k)`, where `t_k` is
//! the layer's own joint and the target `r_k` pairs the generation-side
//! distribution of `h_k` (run down from the label) with the
//! classification-side distribution of `h_{k-1}` (run up from the input),
//! mixed over the data. Other layers stay fixed while layer `k` moves; sweeps
//! repeat over `k = 1..N` until the summed objective stops improving.

mod task;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::provenance::{config_hash, TOOL_VERSION};
use crate::rbm::{state_reals, RbmLayer, RbmStack, StackMeta, TrainingMeta};
use crate::state::{delta_distribution, kl_divergence, BinaryState, Distribution, OutputVector};

pub use task::{make_task, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Initial gradient step; halved on any objective increase.
    pub learning_rate: f64,
    pub max_sweeps: usize,
    /// Gradient steps per layer visit.
    pub inner_steps: usize,
    /// A sweep that lowers the summed objective by less than this stops training.
    pub tol: f64,
    pub seed: u64,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 2.0,
            max_sweeps: 500,
            inner_steps: 50,
            tol: 1e-7,
            seed: 0,
            init_scale: 1.5,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("tol", self.tol)?;
        positive("init_scale", self.init_scale)?;
        if self.max_sweeps == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidArgument(
                "max_sweeps and inner_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `p(x, y)` as a weighted pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair {
    pub x: BinaryState,
    pub y: OutputVector,
    pub weight: f64,
}

pub fn assemble_joint(dataset: &Dataset) -> Result<Vec<WeightedPair>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dataset
        .records()
        .iter()
        .map(|r| WeightedPair {
            x: r.x.clone(),
            y: r.y.clone(),
            weight: r.w,
        })
        .collect())
}

/// Target joint for one layer, indexed like [`RbmLayer::joint_distribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTarget {
    pub joint: Distribution,
}

pub fn layer_target(stack: &RbmStack, k: usize, pairs: &[WeightedPair]) -> Result<LayerTarget> {
    let depth = stack.depth();
    if k == 0 || k > depth {
        return Err(Error::InvalidArgument(format!("layer {k} outside 1..={depth}")));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = 1usize << stack.n();
    let mut below_cache: HashMap<usize, Distribution> = HashMap::new();
    let mut above_cache: HashMap<Vec<u64>, Distribution> = HashMap::new();
    let mut r = vec![0.0; dim * dim];
    for pair in pairs {
        if pair.weight == 0.0 {
            continue;
        }
        let below = match below_cache.get(&pair.x.index()) {
            Some(d) => d,
            None => {
                let d = if k == 1 {
                    delta_distribution(&pair.x)?
                } else {
                    stack.classify_upto(&pair.x, k - 1)?.pop().unwrap()
                };
                below_cache.entry(pair.x.index()).or_insert(d)
            }
        };
        let y = pair.y.components();
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        let above = match above_cache.get(&key) {
            Some(d) => d,
            None => {
                let d = if k == depth {
                    Distribution::product_bernoulli(y)?
                } else {
                    stack.generate_downto(y, k)?.pop().unwrap()
                };
                above_cache.entry(key).or_insert(d)
            }
        };
        for (ip, &pb) in below.probs().iter().enumerate() {
            if pb == 0.0 {
                continue;
            }
            let row = &mut r[ip * dim..(ip + 1) * dim];
            for (slot, &pa) in row.iter_mut().zip(above.probs()) {
                *slot += pair.weight * pa * pb;
            }
        }
    }
    Ok(LayerTarget {
        joint: Distribution::from_weights(r)?,
    })
}

/// First and second moments of a layer-shaped joint:
/// `(E[h_k h_{k-1}ᵀ], E[h_k], E[h_{k-1}])`.
fn moments(joint: &Distribution, n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let states = state_reals(n);
    let dim = states.len();
    let mut cross = DMatrix::zeros(n, n);
    let mut upper = DVector::zeros(n);
    let mut lower = DVector::zeros(n);
    for (ip, hp) in states.iter().enumerate() {
        for (ih, h) in states.iter().enumerate() {
            let p = joint.probs()[ih + dim * ip];
            if p == 0.0 {
                continue;
            }
            for i in 0..n {
                if h[i] == 0.0 {
                    continue;
                }
                upper[i] += p;
                for j in 0..n {
                    cross[(i, j)] += p * hp[j];
                }
            }
            for j in 0..n {
                lower[j] += p * hp[j];
            }
        }
    }
    (cross, upper, lower)
}

/// Gradient of `D_KL(target ‖ t_k)` with respect to the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    pub visible_bias: DVector<f64>,
}

impl LayerGradient {
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.hidden_bias.iter())
            .chain(self.visible_bias.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn kl_gradient(layer: &RbmLayer, target: &LayerTarget) -> Result<LayerGradient> {
    let n = layer.n();
    if target.joint.dim() != 1 << (2 * n) {
        return Err(Error::Dimension(format!(
            "target has {} states, layer joint has {}",
            target.joint.dim(),
            1usize << (2 * n)
        )));
    }
    let (mc, mu, ml) = moments(&layer.joint_distribution()?, n);
    let (tc, tu, tl) = moments(&target.joint, n);
    Ok(LayerGradient {
        weights: mc - tc,
        hidden_bias: mu - tu,
        visible_bias: ml - tl,
    })
}

pub fn layer_objective(layer: &RbmLayer, target: &LayerTarget) -> Result<f64> {
    kl_divergence(&target.joint, &layer.joint_distribution()?)
}

fn step(layer: &RbmLayer, g: &LayerGradient, lr: f64) -> RbmLayer {
    RbmLayer {
        weights: &layer.weights - &g.weights * lr,
        hidden_bias: &layer.hidden_bias - &g.hidden_bias * lr,
        visible_bias: &layer.visible_bias - &g.visible_bias * lr,
    }
}

/// Objective values seen during one layer visit: the starting value, then one
/// entry per accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVisit {
    pub sweep: usize,
    pub layer: usize,
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub stack: RbmStack,
    pub initial_objective: f64,
    /// Summed objective `Σ_k D_KL(r_k ‖ t_k)` after each sweep.
    pub trace: Vec<f64>,
    pub visits: Vec<LayerVisit>,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 60;

fn descend(
    layer: &mut RbmLayer,
    target: &LayerTarget,
    config: &TrainingConfig,
    sweep: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let mut current = layer_objective(layer, target)?;
    if !current.is_finite() {
        return Err(Error::TrainingDiverged { sweep, layer: k });
    }
    let mut objectives = vec![current];
    for _ in 0..config.inner_steps {
        let g = kl_gradient(layer, target)?;
        if g.max_abs() == 0.0 {
            break;
        }
        let mut lr = config.learning_rate;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = step(layer, &g, lr);
            let value = layer_objective(&candidate, target)?;
            if value <= current {
                *layer = candidate;
                current = value;
                objectives.push(value);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(objectives)
}

/// `Σ_k D_KL(r_k ‖ t_k)` with every target evaluated at the current stack.
pub fn summed_objective(stack: &RbmStack, pairs: &[WeightedPair]) -> Result<f64> {
    let mut total = 0.0;
    for k in 1..=stack.depth() {
        total += layer_objective(stack.layer(k), &layer_target(stack, k, pairs)?)?;
    }
    Ok(total)
}

pub fn init_stack(n: usize, depth: usize, seed: u64, scale: f64) -> Result<RbmStack> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-scale..=scale)).collect()
    };
    let layers = (0..depth)
        .map(|_| {
            let w = draw(n * n);
            let a = draw(n);
            let b = draw(n);
            RbmLayer::new(
                DMatrix::from_row_slice(n, n, &w),
                DVector::from_vec(a),
                DVector::from_vec(b),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stack = RbmStack::new(layers)?;
    stack.meta.seed = seed;
    Ok(stack)
}

pub fn train_layerwise(
    n: usize,
    depth: usize,
    dataset: &Dataset,
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if dataset.n() != n {
        return Err(Error::Dimension(format!(
            "dataset has width {}, requested {n}",
            dataset.n()
        )));
    }
    let pairs = assemble_joint(dataset)?;
    let mut stack = init_stack(n, depth, config.seed, config.init_scale)?;
    let initial = summed_objective(&stack, &pairs)?;
    if !initial.is_finite() {
        return Err(Error::TrainingDiverged { sweep: 0, layer: 0 });
    }

    let mut trace = Vec::new();
    let mut visits = Vec::new();
    let mut previous = initial;
    let mut converged = false;
    for sweep in 1..=config.max_sweeps {
        for k in 1..=depth {
            let target = layer_target(&stack, k, &pairs)?;
            let objectives = descend(stack.layer_mut(k), &target, config, sweep, k)?;
            visits.push(LayerVisit { sweep, layer: k, objectives });
        }
        let total = summed_objective(&stack, &pairs)?;
        if !total.is_finite() {
            return Err(Error::TrainingDiverged { sweep, layer: depth });
        }
        trace.push(total);
        if previous - total < config.tol {
            converged = true;
            break;
        }
        previous = total;
    }

    stack.meta = StackMeta {
        seed: config.seed,
        training: TrainingMeta {
            objective_final: trace.last().copied(),
            sweeps: trace.len(),
            config_hash: config_hash(&(config, n, depth)),
            tool: TOOL_VERSION.to_string(),
        },
    };
    Ok(TrainingOutcome {
        stack,
        initial_objective: initial,
        trace,
        visits,
        converged,
    })
}
