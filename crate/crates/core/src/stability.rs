//! Stability matrices of the per-layer coupling map and the relevance of
//! their directions.
//!
//! One layer maps the couplings of its input distribution to the couplings of
//! its output distribution: classification layer `k` sends `g^(k-1)` to
//! `g^(k)`, generation layer `k` sends `g̃^(k)` to `g̃^(k-1)`. The Jacobian of
//! that map is estimated by central differences.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{
    detect_fixed_point, extract_couplings, reconstruct_distribution, CouplingVector, FlowTrace,
    OperatorBasis, DEFAULT_FIXED_POINT_TOL, DEFAULT_FIXED_POINT_WINDOW,
};
use crate::rbm::{apply, Direction, RbmStack};

pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_TOL_EIG: f64 = 1e-6;

/// One layer's coupling map with its transfer matrix built once.
pub(crate) struct LayerMap {
    transfer: DMatrix<f64>,
    basis: Arc<OperatorBasis>,
}

impl LayerMap {
    pub(crate) fn new(
        stack: &RbmStack,
        k: usize,
        direction: Direction,
        basis: &Arc<OperatorBasis>,
    ) -> Result<Self> {
        basis.require_complete()?;
        if basis.n() != stack.n() {
            return Err(Error::Dimension(format!(
                "basis over {} nodes, stack width {}",
                basis.n(),
                stack.n()
            )));
        }
        if k == 0 || k > stack.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer {k} outside 1..={}",
                stack.depth()
            )));
        }
        let layer = stack.layer(k);
        let transfer = match direction {
            Direction::Classification => layer.forward_transfer()?,
            Direction::Generation => layer.backward_transfer()?,
        };
        Ok(LayerMap {
            transfer,
            basis: Arc::clone(basis),
        })
    }

    pub(crate) fn eval(&self, g_in: &DVector<f64>) -> Result<DVector<f64>> {
        let input = CouplingVector::new(Arc::clone(&self.basis), g_in.clone())?;
        let out = apply(&self.transfer, &reconstruct_distribution(&input)?)?;
        Ok(extract_couplings(&out, &self.basis)?.values)
    }

    pub(crate) fn jacobian(&self, g_at: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!("fd_step must be positive, got {step}")));
        }
        let m = g_at.len();
        let mut jac = DMatrix::zeros(m, m);
        for beta in 0..m {
            let mut plus = g_at.clone();
            plus[beta] += step;
            let mut minus = g_at.clone();
            minus[beta] -= step;
            let column = (self.eval(&plus)? - self.eval(&minus)?) / (2.0 * step);
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteColumn { column: beta });
            }
            jac.set_column(beta, &column);
        }
        Ok(jac)
    }
}

/// Applies layer `k`'s transfer to the distribution with couplings `g_in`
/// and returns the couplings of the result. Needs the complete basis.
pub fn layer_map(
    stack: &RbmStack,
    k: usize,
    g_in: &CouplingVector,
    direction: Direction,
) -> Result<CouplingVector> {
    let map = LayerMap::new(stack, k, direction, &g_in.basis)?;
    CouplingVector::new(Arc::clone(&g_in.basis), map.eval(&g_in.values)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityMatrix {
    pub layer: usize,
    pub direction: Direction,
    /// Entry `(α, β)` is `∂g_out_α / ∂g_in_β`.
    pub matrix: DMatrix<f64>,
    pub fd_step: f64,
}

pub fn stability_matrix(
    stack: &RbmStack,
    k: usize,
    g_at: &CouplingVector,
    direction: Direction,
    fd_step: f64,
) -> Result<StabilityMatrix> {
    let map = LayerMap::new(stack, k, direction, &g_at.basis)?;
    Ok(StabilityMatrix {
        layer: k,
        direction,
        matrix: map.jacobian(&g_at.values, fd_step)?,
        fd_step,
    })
}

#[derive(Debug, Clone)]
pub struct LayerStability {
    pub stability: StabilityMatrix,
    /// Sorted by decreasing modulus.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Sorted decreasing.
    pub singular_values: Vec<f64>,
    pub spectral_radius: f64,
}

impl LayerStability {
    pub fn from_matrix(stability: StabilityMatrix) -> Self {
        let eigenvalues = eigenvalues_by_modulus(&stability.matrix);
        let singular_values = singular_values(&stability.matrix);
        let spectral_radius = eigenvalues.first().map_or(0.0, |l| l.norm());
        LayerStability {
            stability,
            eigenvalues,
            singular_values,
            spectral_radius,
        }
    }
}

const DECOMPOSITION_MAX_ITER: usize = 10_000;

/// Eigenvalues sorted by decreasing modulus. nalgebra's unbounded Schur
/// iteration never terminates on an exact zero matrix, so that case is
/// answered directly and the rest run with an iteration cap.
pub fn eigenvalues_by_modulus(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut ev: Vec<Complex<f64>> = if m.amax() == 0.0 {
        vec![Complex::new(0.0, 0.0); m.nrows()]
    } else {
        m.clone()
            .try_schur(f64::EPSILON, DECOMPOSITION_MAX_ITER)
            .map(|s| s.complex_eigenvalues().iter().copied().collect())
            .unwrap_or_else(|| vec![Complex::new(f64::NAN, f64::NAN); m.nrows()])
    };
    ev.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
    ev
}

/// Singular values sorted decreasing.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = if m.amax() == 0.0 {
        vec![0.0; m.nrows().min(m.ncols())]
    } else {
        m.clone()
            .try_svd(false, false, f64::EPSILON, DECOMPOSITION_MAX_ITER)
            .map(|s| s.singular_values.iter().copied().collect())
            .unwrap_or_else(|| vec![f64::NAN; m.nrows().min(m.ncols())])
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[derive(Debug, Clone)]
pub struct RelevanceReport {
    pub direction: Direction,
    pub fd_step: f64,
    pub tol_eig: f64,
    /// In flow order: classification `k = 2..=N`, generation `k = N-1` down to 1.
    pub layers: Vec<LayerStability>,
    /// Some eigenvalue modulus exceeds `1 + tol_eig`.
    pub has_relevant: bool,
    /// Ordered product of the layer matrices, the chain-rule Jacobian from the
    /// first interior couplings to the last: `T^(N)···T^(2)` for
    /// classification, `T̃^(1)···T̃^(N-1)` for generation. Identity when the
    /// stack has a single layer.
    pub cumulative: DMatrix<f64>,
    pub cumulative_top_singular: f64,
    /// Matrix of the last applied layer evaluated at the flow's fixed point,
    /// when the flow converged under the default criterion.
    pub at_fixed_point: Option<LayerStability>,
}

impl RelevanceReport {
    pub fn max_spectral_radius(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.spectral_radius)
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct LayerJson {
            layer: usize,
            eigenvalues: Vec<[f64; 2]>,
            singular_values: Vec<f64>,
            spectral_radius: f64,
            matrix: Vec<Vec<f64>>,
        }
        let layer_json = |l: &LayerStability| LayerJson {
            layer: l.stability.layer,
            eigenvalues: l.eigenvalues.iter().map(|c| [c.re, c.im]).collect(),
            singular_values: l.singular_values.clone(),
            spectral_radius: l.spectral_radius,
            matrix: rows(&l.stability.matrix),
        };
        serde_json::json!({
            "direction": self.direction,
            "fd_step": self.fd_step,
            "tol_eig": self.tol_eig,
            "approximate": false,
            "has_relevant": self.has_relevant,
            "max_spectral_radius": self.max_spectral_radius(),
            "cumulative_top_singular": self.cumulative_top_singular,
            "layers": self.layers.iter().map(layer_json).collect::<Vec<_>>(),
            "at_fixed_point": self.at_fixed_point.as_ref().map(layer_json),
        })
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Stability analysis along an actual flow through `stack`.
pub fn relevance_report(
    stack: &RbmStack,
    flow: &FlowTrace,
    fd_step: f64,
    tol_eig: f64,
) -> Result<RelevanceReport> {
    let basis = flow.basis();
    basis.require_complete()?;
    let depth = stack.depth();
    if flow.couplings.len() != depth {
        return Err(Error::Dimension(format!(
            "flow has {} layers, stack has {depth}",
            flow.couplings.len()
        )));
    }
    let direction = flow.direction;
    // (layer applied, layer index of its input couplings)
    let steps: Vec<(usize, usize)> = match direction {
        Direction::Classification => (2..=depth).map(|k| (k, k - 1)).collect(),
        Direction::Generation => (1..depth).rev().map(|k| (k, k)).collect(),
    };
    let mut layers = Vec::with_capacity(steps.len());
    for (k, input) in steps {
        let g_at = flow
            .at_layer(input)
            .ok_or_else(|| Error::InvalidArgument(format!("flow lacks layer {input}")))?;
        layers.push(LayerStability::from_matrix(stability_matrix(
            stack, k, g_at, direction, fd_step,
        )?));
    }

    let m = basis.len();
    // Flow order applies layers in sequence; each new matrix multiplies from the left.
    let mut cumulative = DMatrix::identity(m, m);
    for l in &layers {
        cumulative = &l.stability.matrix * cumulative;
    }
    let cumulative_top_singular = singular_values(&cumulative)[0];

    let has_relevant = layers
        .iter()
        .any(|l| l.spectral_radius > 1.0 + tol_eig);

    let at_fixed_point = if flow.deltas.is_empty() {
        None
    } else {
        let window = DEFAULT_FIXED_POINT_WINDOW.min(flow.deltas.len());
        let verdict = detect_fixed_point(flow, DEFAULT_FIXED_POINT_TOL, window)?;
        match verdict.fixed_couplings {
            Some(g_star) => {
                let last = match direction {
                    Direction::Classification => depth,
                    Direction::Generation => 1,
                };
                Some(LayerStability::from_matrix(stability_matrix(
                    stack, last, &g_star, direction, fd_step,
                )?))
            }
            None => None,
        }
    };

    Ok(RelevanceReport {
        direction,
        fd_step,
        tol_eig,
        layers,
        has_relevant,
        cumulative,
        cumulative_top_singular,
        at_fixed_point,
    })
}
