//! RBM layers and exact propagation through a stack of them.
//!
//! Layer `k` couples `h_k` (rows of `W`) to `h_{k-1}` (columns of `W`) with
//! joint weight `exp(h_kᵀ W h_{k-1} + aᵀ h_k + bᵀ h_{k-1})`. Classification
//! runs the stack upwards from a clamped input, generation runs it downwards
//! from an output that may be real-valued: the last layer's conditional is
//! extended to real `y` through its bilinear energy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{check_bits, delta_distribution, BinaryState, Distribution};

#[derive(Debug, Clone, PartialEq)]
pub struct RbmLayer {
    /// `n × n`; row index runs over `h_k`, column index over `h_{k-1}`.
    pub weights: DMatrix<f64>,
    /// Bias on `h_k` (`a`).
    pub hidden_bias: DVector<f64>,
    /// Bias on `h_{k-1}` (`b`).
    pub visible_bias: DVector<f64>,
}

impl RbmLayer {
    pub fn new(
        weights: DMatrix<f64>,
        hidden_bias: DVector<f64>,
        visible_bias: DVector<f64>,
    ) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n || hidden_bias.len() != n || visible_bias.len() != n {
            return Err(Error::Dimension(format!(
                "layer needs square W with matching biases, got W {}x{}, a {}, b {}",
                weights.nrows(),
                weights.ncols(),
                hidden_bias.len(),
                visible_bias.len()
            )));
        }
        let finite = weights
            .iter()
            .chain(hidden_bias.iter())
            .chain(visible_bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("layer parameters must be finite".into()));
        }
        Ok(RbmLayer {
            weights,
            hidden_bias,
            visible_bias,
        })
    }

    pub fn zeros(n: usize) -> Self {
        RbmLayer {
            weights: DMatrix::zeros(n, n),
            hidden_bias: DVector::zeros(n),
            visible_bias: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// The layer with the roles of `h_k` and `h_{k-1}` exchanged.
    pub fn transposed(&self) -> Self {
        RbmLayer {
            weights: self.weights.transpose(),
            hidden_bias: self.visible_bias.clone(),
            visible_bias: self.hidden_bias.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        RbmLayer {
            weights: &self.weights * factor,
            hidden_bias: &self.hidden_bias * factor,
            visible_bias: &self.visible_bias * factor,
        }
    }

    /// Exponent of the joint weight (the negative energy).
    pub fn log_weight(&self, h: &[f64], h_prev: &[f64]) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            total += self.hidden_bias[i] * h[i] + self.visible_bias[i] * h_prev[i];
            for j in 0..n {
                total += h[i] * self.weights[(i, j)] * h_prev[j];
            }
        }
        total
    }

    /// `W h_prev + a`: logits of the factorized `t_k(h_k | h_{k-1})`.
    pub fn forward_field(&self, h_prev: &[f64]) -> DVector<f64> {
        &self.weights * DVector::from_column_slice(h_prev) + &self.hidden_bias
    }

    /// `Wᵀ h + b`: logits of the factorized `t_k(h_{k-1} | h_k)`.
    pub fn backward_field(&self, h_next: &[f64]) -> DVector<f64> {
        self.weights.tr_mul(&DVector::from_column_slice(h_next)) + &self.visible_bias
    }

    /// Normalized joint over `(h_k, h_{k-1})`, index `idx(h_k) + 2^n idx(h_{k-1})`.
    /// `log_norm` holds `ln z_k`.
    pub fn joint_distribution(&self) -> Result<Distribution> {
        let n = self.n();
        check_bits("layer joint", 2 * n)?;
        let states = state_reals(n);
        let mut log_weights = Vec::with_capacity(1 << (2 * n));
        for h_prev in &states {
            for h in &states {
                log_weights.push(self.log_weight(h, h_prev));
            }
        }
        Distribution::from_log_weights(&log_weights)
    }

    pub fn forward_conditional(&self, h_prev: &BinaryState) -> Result<Distribution> {
        self.check_len(h_prev.len())?;
        factorized(&self.forward_field(&h_prev.to_reals()))
    }

    /// Accepts real-valued `h_next`; binary input reproduces the Bayes
    /// conditional of the joint.
    pub fn backward_conditional(&self, h_next: &[f64]) -> Result<Distribution> {
        self.check_len(h_next.len())?;
        factorized(&self.backward_field(h_next))
    }

    /// Column `j` is `t_k(· | h_{k-1} = state j)`.
    pub fn forward_transfer(&self) -> Result<DMatrix<f64>> {
        self.transfer(|h| self.forward_field(h))
    }

    /// Column `j` is `t_k(· | h_k = state j)`.
    pub fn backward_transfer(&self) -> Result<DMatrix<f64>> {
        self.transfer(|h| self.backward_field(h))
    }

    fn transfer(&self, field: impl Fn(&[f64]) -> DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        check_bits("transfer matrix", n)?;
        let dim = 1 << n;
        let mut m = DMatrix::zeros(dim, dim);
        for (j, s) in state_reals(n).iter().enumerate() {
            let d = factorized(&field(s))?;
            m.column_mut(j).copy_from_slice(d.probs());
        }
        Ok(m)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Dimension(format!(
                "layer width {} but conditioning vector has {len} components",
                self.n()
            )));
        }
        Ok(())
    }
}

/// Distribution of independent nodes with the given logits.
fn factorized(logits: &DVector<f64>) -> Result<Distribution> {
    check_bits("conditional", logits.len())?;
    let dim = 1usize << logits.len();
    let log_weights: Vec<f64> = (0..dim)
        .map(|idx| {
            logits
                .iter()
                .enumerate()
                .filter(|(i, _)| (idx >> i) & 1 == 1)
                .map(|(_, z)| z)
                .sum()
        })
        .collect();
    Distribution::from_log_weights(&log_weights)
}

/// Every state of `n` nodes as a real vector, in index order.
pub(crate) fn state_reals(n: usize) -> Vec<Vec<f64>> {
    (0..1usize << n)
        .map(|idx| (0..n).map(|i| ((idx >> i) & 1) as f64).collect())
        .collect()
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    /// Summed layerwise objective after the last sweep; absent for stacks
    /// that were not trained.
    pub objective_final: Option<f64>,
    pub sweeps: usize,
    #[serde(default)]
    pub config_hash: String,
    /// Name and version of the tool that wrote the stack.
    #[serde(default)]
    pub tool: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StackMeta {
    pub seed: u64,
    pub training: TrainingMeta,
}

/// `N ≥ 1` layers of uniform width `n`; `layers[k - 1]` is layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmStack {
    n: usize,
    layers: Vec<RbmLayer>,
    pub meta: StackMeta,
}

impl RbmStack {
    pub fn new(layers: Vec<RbmLayer>) -> Result<Self> {
        let n = match layers.first() {
            Some(l) => l.n(),
            None => return Err(Error::InvalidArgument("a stack needs at least one layer".into())),
        };
        if let Some(k) = layers.iter().position(|l| l.n() != n) {
            return Err(Error::Dimension(format!(
                "layer {} has width {}, expected {n}",
                k + 1,
                layers[k].n()
            )));
        }
        check_bits("stack width", n)?;
        Ok(RbmStack {
            n,
            layers,
            meta: StackMeta::default(),
        })
    }

    pub fn zeros(n: usize, depth: usize) -> Result<Self> {
        RbmStack::new(vec![RbmLayer::zeros(n); depth])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[RbmLayer] {
        &self.layers
    }

    /// Layer `k`, 1-based.
    pub fn layer(&self, k: usize) -> &RbmLayer {
        &self.layers[k - 1]
    }

    pub(crate) fn layer_mut(&mut self, k: usize) -> &mut RbmLayer {
        &mut self.layers[k - 1]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        RbmStack {
            n: self.n,
            layers: self.layers.iter().map(|l| l.scaled(factor)).collect(),
            meta: self.meta.clone(),
        }
    }

    /// `q_k(· | x)` for `k = 0..=upto`.
    pub(crate) fn classify_upto(&self, x: &BinaryState, upto: usize) -> Result<Vec<Distribution>> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!(
                "input has {} bits, stack width is {}",
                x.len(),
                self.n
            )));
        }
        let mut out = vec![delta_distribution(x)?];
        if upto >= 1 {
            out.push(self.layer(1).forward_conditional(x)?);
        }
        for k in 2..=upto {
            let next = apply(&self.layer(k).forward_transfer()?, &out[k - 1])?;
            out.push(next);
        }
        Ok(out)
    }

    /// `q̃_k(· | y)` for `k = N-1` down to `downto`, returned in that order.
    pub(crate) fn generate_downto(&self, y: &[f64], downto: usize) -> Result<Vec<Distribution>> {
        if y.len() != self.n {
            return Err(Error::Dimension(format!(
                "output has {} components, stack width is {}",
                y.len(),
                self.n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("output components must be finite".into()));
        }
        let depth = self.depth();
        let mut out = Vec::with_capacity(depth);
        if downto < depth {
            out.push(self.layer(depth).backward_conditional(y)?);
        }
        let mut k = depth - 1;
        while k > downto {
            let next = apply(&self.layer(k).backward_transfer()?, out.last().unwrap())?;
            out.push(next);
            k -= 1;
        }
        Ok(out)
    }

    pub fn classify_propagate(&self, x: &BinaryState) -> Result<ConditionedFlow> {
        let mut all = self.classify_upto(x, self.depth())?;
        let boundary = all.remove(0);
        Ok(ConditionedFlow {
            direction: Direction::Classification,
            conditioning: Conditioning::Input(x.clone()),
            boundary: Some(boundary),
            dists: all,
        })
    }

    /// Generation from a possibly real-valued output. The boundary entry is
    /// the product-Bernoulli soft clamp at `y` when `y ∈ [0,1]^n` (the point
    /// mass for binary `y`) and is absent otherwise.
    pub fn generate_propagate(&self, y: &[f64]) -> Result<ConditionedFlow> {
        let mut dists = self.generate_downto(y, 0)?;
        dists.reverse();
        let boundary = if y.iter().all(|v| (0.0..=1.0).contains(v)) {
            Some(Distribution::product_bernoulli(y)?)
        } else {
            None
        };
        Ok(ConditionedFlow {
            direction: Direction::Generation,
            conditioning: Conditioning::Output(y.to_vec()),
            boundary,
            dists,
        })
    }

    /// Argmax-state decode of `q_N(· | x)`, ties to the lowest index.
    pub fn decode(&self, x: &BinaryState) -> Result<BinaryState> {
        let q = self.classify_upto(x, self.depth())?;
        Ok(BinaryState::from_index(q[self.depth()].argmax(), self.n))
    }
}

/// `transfer · dist`, renormalized against rounding drift.
pub(crate) fn apply(transfer: &DMatrix<f64>, dist: &Distribution) -> Result<Distribution> {
    let v = transfer * DVector::from_column_slice(dist.probs());
    Distribution::from_weights(v.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Classification,
    Generation,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Classification => "classification",
            Direction::Generation => "generation",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "class" => Ok(Direction::Classification),
            "generation" | "gen" => Ok(Direction::Generation),
            other => Err(Error::InvalidArgument(format!(
                "unknown direction `{other}` (expected classification or generation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Input(BinaryState),
    Output(Vec<f64>),
}

/// Per-layer conditional distributions of one propagation.
#[derive(Debug, Clone)]
pub struct ConditionedFlow {
    pub direction: Direction,
    pub conditioning: Conditioning,
    pub boundary: Option<Distribution>,
    /// Interior distributions in layer-index order: `q_1..q_N` for
    /// classification, `q̃_0..q̃_{N-1}` for generation.
    pub dists: Vec<Distribution>,
}

impl ConditionedFlow {
    /// Distribution at layer index `k`, including the boundary.
    pub fn layer(&self, k: usize) -> Option<&Distribution> {
        let depth = self.dists.len();
        match self.direction {
            Direction::Classification if k == 0 => self.boundary.as_ref(),
            Direction::Classification => self.dists.get(k - 1),
            Direction::Generation if k == depth => self.boundary.as_ref(),
            Direction::Generation => self.dists.get(k),
        }
    }

    /// Final distribution: `q_N(·|x)` or `q̃_0(·|y)`.
    pub fn output(&self) -> &Distribution {
        match self.direction {
            Direction::Classification => self.dists.last().unwrap(),
            Direction::Generation => &self.dists[0],
        }
    }
}
