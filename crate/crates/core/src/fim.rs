//! Fisher information of the generated input distribution with respect to
//! the output label, and the output poison it induces.
//!
//! The generated distribution `q̃_0(x | y)` is an effective Hamiltonian with
//! couplings `g̃^(0)(y)`, so its Fisher information is `Jᵀ C J`: `J` is the
//! Jacobian of the couplings in `y` and `C` is the operator covariance under
//! `q̃_0`. `J` is assembled by the chain rule from the generation stability
//! matrices and the exact Jacobian of the last layer's couplings. A second
//! estimator built from finite-difference scores of `ln q̃_0` checks it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::flow::{extract_couplings, CouplingVector, OperatorBasis};
use crate::rbm::RbmStack;
use crate::stability::{rows, LayerMap};
use crate::state::{kl_divergence, Distribution, OutputVector};

pub const DEFAULT_POISON_BUDGET: f64 = 0.05;
/// A Fisher matrix whose largest entry is below this has no usable direction.
pub const ZERO_FIM_TOL: f64 = 1e-12;
/// Top eigenvalues closer than this are treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Asymmetry above this (before symmetrizing) attaches a warning.
pub const ASYMMETRY_WARN_TOL: f64 = 1e-6;

/// `g̃^(N-1)(y)` in closed form and its exact Jacobian in `y` (`m × n`).
///
/// The last layer's conditional has logits `yᵀW_N + b_N`, so only singleton
/// couplings are nonzero: `g_{j} = -((yᵀW_N)_j + b_{N,j})`, with
/// `∂g_{j}/∂y_i = -W_N[i, j]`.
pub fn last_layer_couplings(
    stack: &RbmStack,
    y: &[f64],
    basis: &Arc<OperatorBasis>,
) -> Result<(CouplingVector, DMatrix<f64>)> {
    basis.require_complete()?;
    let n = stack.n();
    if y.len() != n || basis.n() != n {
        return Err(Error::Dimension(format!(
            "y has {} components, basis {} nodes, stack width {n}",
            y.len(),
            basis.n()
        )));
    }
    let top = stack.layer(stack.depth());
    let logits = top.backward_field(y);
    let mut g = DVector::zeros(basis.len());
    let mut jac = DMatrix::zeros(basis.len(), n);
    for j in 0..n {
        let alpha = basis.position(1 << j).expect("complete basis has every singleton");
        g[alpha] = -logits[j];
        for i in 0..n {
            jac[(alpha, i)] = -top.weights[(i, j)];
        }
    }
    Ok((CouplingVector::new(Arc::clone(basis), g)?, jac))
}

/// `∂g̃^(0)/∂y = T̃^(1) ··· T̃^(N-1) · ∂g̃^(N-1)/∂y`, with each `T̃^(k)`
/// evaluated on the generation flow at `y`.
pub fn coupling_jacobian(stack: &RbmStack, y: &[f64], fd_step: f64) -> Result<DMatrix<f64>> {
    let basis = Arc::new(OperatorBasis::complete(stack.n())?);
    let (_, last) = last_layer_couplings(stack, y, &basis)?;
    let depth = stack.depth();
    if depth == 1 {
        return Ok(last);
    }
    // q̃_{N-1}, ..., q̃_1
    let dists = stack.generate_downto(y, 1)?;
    let mut jac = last;
    for (offset, dist) in dists.iter().enumerate() {
        let k = depth - 1 - offset;
        let g_k = extract_couplings(dist, &basis)?;
        let t = LayerMap::new(stack, k, crate::rbm::Direction::Generation, &basis)?
            .jacobian(&g_k.values, fd_step)?;
        jac = t * jac;
    }
    Ok(jac)
}

/// `C_{αα'} = E[O_α O_α'] - E[O_α] E[O_α']` by enumeration.
pub fn operator_covariance(dist: &Distribution, basis: &OperatorBasis) -> Result<DMatrix<f64>> {
    if dist.bits() != basis.n() {
        return Err(Error::Dimension(format!(
            "distribution over {} bits, basis over {}",
            dist.bits(),
            basis.n()
        )));
    }
    let m = basis.len();
    let mut mean = DVector::<f64>::zeros(m);
    let mut second = DMatrix::<f64>::zeros(m, m);
    for (h, &p) in dist.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let ops: Vec<f64> = (0..m).map(|a| basis.operator(a, h)).collect();
        for a in 0..m {
            if ops[a] == 0.0 {
                continue;
            }
            mean[a] += p;
            for b in 0..m {
                second[(a, b)] += p * ops[b];
            }
        }
    }
    Ok(second - &mean * mean.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FimMethod {
    #[serde(rename = "chain")]
    ChainRule,
    #[serde(rename = "oracle")]
    ScoreOracle,
}

impl std::fmt::Display for FimMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FimMethod::ChainRule => "chain",
            FimMethod::ScoreOracle => "oracle",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FimResult {
    pub y: Vec<f64>,
    /// Symmetrized `n × n` Fisher matrix.
    pub matrix: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
    pub method: FimMethod,
    pub warning: Option<String>,
}

impl FimResult {
    pub fn from_matrix(y: Vec<f64>, raw: DMatrix<f64>, method: FimMethod) -> Self {
        let asym = (&raw - raw.transpose()).amax();
        let warning = (asym > ASYMMETRY_WARN_TOL)
            .then(|| format!("Fisher matrix asymmetric by {asym:e} before symmetrization"));
        let matrix = (&raw + raw.transpose()) * 0.5;
        let eig = SymmetricEigen::new(matrix.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigenvectors = DMatrix::from_fn(matrix.nrows(), order.len(), |r, c| {
            eig.eigenvectors[(r, order[c])]
        });
        FimResult {
            y,
            matrix,
            eigenvalues,
            eigenvectors,
            method,
            warning,
        }
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let v = DVector::from_column_slice(v);
        (v.transpose() * &self.matrix * &v)[(0, 0)]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "y": self.y,
            "matrix": rows(&self.matrix),
            "eigenvalues": self.eigenvalues,
            "eigenvectors": rows(&self.eigenvectors.transpose()),
            "warning": self.warning,
        })
    }
}

pub fn fim(stack: &RbmStack, y: &[f64], method: FimMethod, fd_step: f64) -> Result<FimResult> {
    let raw = match method {
        FimMethod::ChainRule => {
            let basis = OperatorBasis::complete(stack.n())?;
            let jac = coupling_jacobian(stack, y, fd_step)?;
            let q0 = stack.generate_downto(y, 0)?.pop().unwrap();
            let cov = operator_covariance(&q0, &basis)?;
            jac.transpose() * cov * jac
        }
        FimMethod::ScoreOracle => score_fim(stack, y, fd_step)?,
    };
    Ok(FimResult::from_matrix(y.to_vec(), raw, method))
}

/// `Σ_x q̃_0(x|y) s_i(x) s_j(x)` with scores from central differences of
/// `ln q̃_0(x|y)` in `y`.
fn score_fim(stack: &RbmStack, y: &[f64], step: f64) -> Result<DMatrix<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("fd_step must be positive, got {step}")));
    }
    let n = y.len();
    let q0 = stack.generate_downto(y, 0)?.pop().unwrap();
    let mut scores = DMatrix::zeros(q0.dim(), n);
    for i in 0..n {
        let mut plus = y.to_vec();
        plus[i] += step;
        let mut minus = y.to_vec();
        minus[i] -= step;
        let qp = stack.generate_downto(&plus, 0)?.pop().unwrap();
        let qm = stack.generate_downto(&minus, 0)?.pop().unwrap();
        for x in 0..q0.dim() {
            scores[(x, i)] = (qp.probs()[x].ln() - qm.probs()[x].ln()) / (2.0 * step);
        }
    }
    let weights = DMatrix::from_diagonal(&DVector::from_column_slice(q0.probs()));
    Ok(scores.transpose() * weights * scores)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoisonVector {
    pub delta_y: Vec<f64>,
    /// Max-norm of `delta_y`.
    pub budget: f64,
    pub source_eigenvalue: f64,
}

/// Top Fisher eigenvector scaled to max-norm `budget`, first nonzero
/// component positive.
///
/// When the top eigenvalue is degenerate, the candidate from the degenerate
/// set with the largest quadratic response at that budget wins.
pub fn strongest_poison(fim: &FimResult, budget: f64) -> Result<PoisonVector> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
    }
    let max_abs = fim.matrix.amax();
    if max_abs < ZERO_FIM_TOL {
        return Err(Error::NoUnstableDirection { max_abs });
    }
    let top = fim.top_eigenvalue();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for (c, &lambda) in fim.eigenvalues.iter().enumerate() {
        if top - lambda >= DEGENERACY_TOL {
            break;
        }
        let v = fim.eigenvectors.column(c);
        let scale = v.amax();
        let mut unit: Vec<f64> = v.iter().map(|x| x / scale).collect();
        if let Some(first) = unit.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                unit.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let response = fim.quadratic_form(&unit);
        if best.as_ref().map_or(true, |(r, _, _)| response > *r) {
            best = Some((response, unit, lambda));
        }
    }
    let (_, unit, lambda) = best.expect("top eigenvalue is always a candidate");
    Ok(PoisonVector {
        delta_y: unit.iter().map(|x| x * budget).collect(),
        budget,
        source_eigenvalue: lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeRule {
    /// Componentwise rounding of the soft label.
    #[default]
    Round,
}

impl DecodeRule {
    pub fn decodes_to(&self, y: &[f64], label: &[f64]) -> bool {
        match self {
            DecodeRule::Round => y
                .iter()
                .zip(label)
                .all(|(v, l)| f64::from(u8::from(*v >= 0.5)) == *l),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoisonEntry {
    pub y: Vec<f64>,
    /// Perturbation actually applied, after sign choice and clipping to `[0, 1]`.
    pub delta_y: Vec<f64>,
    pub top_eigenvalue: f64,
    /// `D_KL(q̃_0(·|y) ‖ q̃_0(·|y+δy))`.
    pub kl_discrepancy: f64,
    pub decode_ok: bool,
    pub poisoned: bool,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoisonReport {
    pub budget: f64,
    pub fd_step: f64,
    pub entries: Vec<PoisonEntry>,
}

impl PoisonReport {
    pub fn all_decode_ok(&self) -> bool {
        self.entries.iter().all(|e| e.decode_ok)
    }

    pub fn any_poisoned(&self) -> bool {
        self.entries.iter().any(|e| e.poisoned)
    }
}

fn generated(stack: &RbmStack, y: &[f64]) -> Result<Distribution> {
    Ok(stack.generate_downto(y, 0)?.pop().unwrap())
}

/// Replaces every clean label `y` by `y + δy`, with `δy` the strongest poison
/// at `y`.
///
/// `±δy` have the same Fisher response; the sign whose clipped perturbation
/// moves `q̃_0` further is applied. Labels whose Fisher matrix vanishes pass
/// through unchanged and are flagged `poisoned: false`.
pub fn poison_dataset(
    stack: &RbmStack,
    dataset: &Dataset,
    budget: f64,
    decode: DecodeRule,
    fd_step: f64,
) -> Result<(Dataset, PoisonReport)> {
    if !(budget > 0.0 && budget < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "poison budget must lie in (0, 0.5), got {budget}"
        )));
    }
    if dataset.n() != stack.n() {
        return Err(Error::Dimension(format!(
            "dataset width {} but stack width {}",
            dataset.n(),
            stack.n()
        )));
    }
    let mut entries: Vec<PoisonEntry> = Vec::new();
    for r in dataset.records() {
        let y = r.y.components();
        if !r.y.is_clean() {
            return Err(Error::InvalidArgument(format!(
                "label {y:?} is not binary; only clean labels can be poisoned"
            )));
        }
        if entries.iter().any(|e| e.y == y) {
            continue;
        }
        entries.push(poison_label(stack, y, budget, decode, fd_step)?);
    }
    let records = dataset
        .records()
        .iter()
        .map(|r| {
            let e = entries
                .iter()
                .find(|e| e.y == r.y.components())
                .expect("every label has an entry");
            let y: Vec<f64> = e.y.iter().zip(&e.delta_y).map(|(a, d)| a + d).collect();
            Ok(Record {
                x: r.x.clone(),
                y: OutputVector::new(y)?,
                w: r.w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset::new(records)?,
        PoisonReport {
            budget,
            fd_step,
            entries,
        },
    ))
}

fn poison_label(
    stack: &RbmStack,
    y: &[f64],
    budget: f64,
    decode: DecodeRule,
    fd_step: f64,
) -> Result<PoisonEntry> {
    let info = fim(stack, y, FimMethod::ChainRule, fd_step)?;
    let poison = match strongest_poison(&info, budget) {
        Ok(p) => p,
        Err(Error::NoUnstableDirection { .. }) => {
            return Ok(PoisonEntry {
                y: y.to_vec(),
                delta_y: vec![0.0; y.len()],
                top_eigenvalue: info.top_eigenvalue(),
                kl_discrepancy: 0.0,
                decode_ok: true,
                poisoned: false,
                clipped: false,
            })
        }
        Err(e) => return Err(e),
    };
    let clean = generated(stack, y)?;
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for sign in [1.0, -1.0] {
        let mut clipped = false;
        let delta: Vec<f64> = y
            .iter()
            .zip(&poison.delta_y)
            .map(|(&v, &d)| {
                let target = (v + sign * d).clamp(0.0, 1.0);
                clipped |= target != v + sign * d;
                target - v
            })
            .collect();
        let shifted: Vec<f64> = y.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let kl = kl_divergence(&clean, &generated(stack, &shifted)?)?;
        if best.as_ref().map_or(true, |(k, _, _)| kl > *k) {
            best = Some((kl, delta, clipped));
        }
    }
    let (kl, delta_y, clipped) = best.unwrap();
    let shifted: Vec<f64> = y.iter().zip(&delta_y).map(|(a, d)| a + d).collect();
    if !decode.decodes_to(&shifted, y) {
        return Err(Error::DecodeViolated);
    }
    Ok(PoisonEntry {
        y: y.to_vec(),
        delta_y,
        top_eigenvalue: info.top_eigenvalue(),
        kl_discrepancy: kl,
        decode_ok: true,
        poisoned: true,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::RbmLayer;
    use crate::train::init_stack;

    #[test]
    fn last_layer_closed_form() {
        let stack = RbmStack::zeros(2, 2).unwrap();
        let basis = Arc::new(OperatorBasis::complete(2).unwrap());
        let (g, _) = last_layer_couplings(&stack, &[0.0, 0.0], &basis).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));

        let stack = init_stack(2, 3, 5, 1.0).unwrap();
        let y = [0.3, 0.9];
        let (g, jac) = last_layer_couplings(&stack, &y, &basis).unwrap();
        let w = &stack.layer(3).weights;
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(jac[(j, i)], -w[(i, j)]);
            }
        }
        assert!(jac.row(2).iter().all(|&v| v == 0.0));
        let direct = extract_couplings(&stack.layer(3).backward_conditional(&y).unwrap(), &basis).unwrap();
        assert!(direct.max_norm_diff(&g) < 1e-10);
    }

    #[test]
    fn covariance_examples() {
        let basis = OperatorBasis::complete(1).unwrap();
        let c = operator_covariance(&Distribution::uniform(1).unwrap(), &basis).unwrap();
        assert_eq!(c[(0, 0)], 0.25);
        let point = Distribution::from_weights(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let c = operator_covariance(&point, &OperatorBasis::complete(2).unwrap()).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_stack_has_zero_fisher() {
        let stack = RbmStack::zeros(2, 3).unwrap();
        for method in [FimMethod::ChainRule, FimMethod::ScoreOracle] {
            let f = fim(&stack, &[1.0, 0.0], method, 1e-4).unwrap();
            assert!(f.matrix.amax() < 1e-12);
            assert!(matches!(
                strongest_poison(&f, 0.05),
                Err(Error::NoUnstableDirection { .. })
            ));
        }
    }

    #[test]
    fn axis_aligned_poison() {
        let f = FimResult::from_matrix(vec![0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), FimMethod::ChainRule);
        let p = strongest_poison(&f, 0.05).unwrap();
        assert_eq!(p.delta_y, vec![0.05, 0.0]);
        assert_eq!(p.source_eigenvalue, 4.0);
        assert!(strongest_poison(&f, 0.0).is_err());
    }

    #[test]
    fn degenerate_top_picks_largest_response() {
        // Identity: every direction is an eigenvector; after max-norm scaling
        // a diagonal direction responds twice as strongly as an axis. The
        // eigensolver returns axes, so both candidates tie and the first wins.
        let f = FimResult::from_matrix(vec![0.0, 0.0], DMatrix::identity(2, 2), FimMethod::ChainRule);
        let p = strongest_poison(&f, 0.1).unwrap();
        let norm = p.delta_y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((norm - 0.1).abs() < 1e-15);
        assert!(p.delta_y.iter().copied().find(|v| v.abs() > 1e-12).unwrap() > 0.0);
    }

    #[test]
    fn asymmetry_warning() {
        let raw = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-3, 1.0]);
        let f = FimResult::from_matrix(vec![0.0, 0.0], raw, FimMethod::ScoreOracle);
        assert!(f.warning.is_some());
        assert_eq!(f.matrix[(0, 1)], 5e-4);
    }

    #[test]
    fn poison_dataset_validates() {
        let stack = RbmStack::new(vec![RbmLayer::zeros(2)]).unwrap();
        let data = crate::train::make_task(crate::train::TaskKind::Copy, 2, 0).unwrap();
        assert!(poison_dataset(&stack, &data, 0.5, DecodeRule::Round, 1e-4).is_err());
        assert!(poison_dataset(&stack, &data, 0.0, DecodeRule::Round, 1e-4).is_err());
        // a zero stack has nothing to poison: labels pass through, flagged
        let (out, report) = poison_dataset(&stack, &data, 0.05, DecodeRule::Round, 1e-4).unwrap();
        assert_eq!(out, data);
        assert!(!report.any_poisoned());
        assert!(report.all_decode_ok());
    }
}
