//! Effective Hamiltonians over a monomial operator basis and the coupling
//! flows they trace through a stack.
//!
//! A strictly positive distribution over `n` binary nodes is written as
//! `q(h) ∝ exp(-Σ_S g_S O_S(h))` with `O_S(h) = Π_{i∈S} h_i`. The constant
//! (empty-set) term is absorbed into the normalizer, so a complete basis has
//! `2^n - 1` couplings. For the complete basis the couplings are the subset
//! Möbius transform of `-ln q` evaluated at the indicator states.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{Conditioning, Direction, RbmStack};
use crate::state::{check_bits, Distribution};

pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-3;
pub const DEFAULT_FIXED_POINT_WINDOW: usize = 2;

/// Nonempty node subsets, each stored as a bitmask, ordered by size and then
/// lexicographically by their sorted elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorBasis {
    n: usize,
    subsets: Vec<u32>,
    complete: bool,
}

fn elements(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| (mask >> i) & 1 == 1).collect()
}

fn sort_subsets(subsets: &mut [u32]) {
    subsets.sort_by_key(|&m| (m.count_ones(), elements(m)));
}

impl OperatorBasis {
    pub fn complete(n: usize) -> Result<Self> {
        Self::up_to_order(n, n)
    }

    /// All subsets with at most `order` elements.
    pub fn up_to_order(n: usize, order: usize) -> Result<Self> {
        check_bits("operator basis", n)?;
        let mut subsets: Vec<u32> = (1u32..1 << n)
            .filter(|m| m.count_ones() as usize <= order)
            .collect();
        sort_subsets(&mut subsets);
        Ok(OperatorBasis {
            n,
            complete: subsets.len() == (1 << n) - 1,
            subsets,
        })
    }

    pub fn from_subsets(n: usize, subsets: &[Vec<usize>]) -> Result<Self> {
        check_bits("operator basis", n)?;
        let mut masks = Vec::with_capacity(subsets.len());
        for s in subsets {
            if s.is_empty() {
                return Err(Error::InvalidArgument("operator subsets must be nonempty".into()));
            }
            let mut mask = 0u32;
            for &i in s {
                if i >= n {
                    return Err(Error::InvalidArgument(format!("node {i} outside 0..{n}")));
                }
                mask |= 1 << i;
            }
            if masks.contains(&mask) {
                return Err(Error::InvalidArgument(format!("duplicate subset {s:?}")));
            }
            masks.push(mask);
        }
        sort_subsets(&mut masks);
        Ok(OperatorBasis {
            n,
            complete: masks.len() == (1 << n) - 1,
            subsets: masks,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn subsets(&self) -> &[u32] {
        &self.subsets
    }

    pub fn position(&self, mask: u32) -> Option<usize> {
        self.subsets.iter().position(|&m| m == mask)
    }

    /// Column label such as `g{0,2}`.
    pub fn name(&self, alpha: usize) -> String {
        let inner: Vec<String> = elements(self.subsets[alpha])
            .iter()
            .map(|i| i.to_string())
            .collect();
        format!("g{{{}}}", inner.join(","))
    }

    /// `O_α` evaluated at state index `h`.
    pub fn operator(&self, alpha: usize, h: usize) -> f64 {
        let m = self.subsets[alpha] as usize;
        if h & m == m {
            1.0
        } else {
            0.0
        }
    }

    pub fn require_complete(&self) -> Result<()> {
        if self.complete {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "this operation needs the complete operator basis".into(),
            ))
        }
    }
}

/// How a basis is requested in configs and on the command line:
/// `complete`, `order:K`, or subsets like `0;0,1;1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisSpec {
    #[default]
    Complete,
    Order(usize),
    Subsets(Vec<Vec<usize>>),
}

impl BasisSpec {
    pub fn build(&self, n: usize) -> Result<OperatorBasis> {
        match self {
            BasisSpec::Complete => OperatorBasis::complete(n),
            BasisSpec::Order(k) => OperatorBasis::up_to_order(n, *k),
            BasisSpec::Subsets(s) => OperatorBasis::from_subsets(n, s),
        }
    }
}

impl std::str::FromStr for BasisSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse basis `{s}`"));
        if s == "complete" {
            return Ok(BasisSpec::Complete);
        }
        if let Some(k) = s.strip_prefix("order:") {
            return k.parse().map(BasisSpec::Order).map_err(|_| bad());
        }
        s.split(';')
            .map(|set| set.split(',').map(|i| i.trim().parse::<usize>().map_err(|_| bad())).collect())
            .collect::<Result<Vec<Vec<usize>>>>()
            .map(BasisSpec::Subsets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingVector {
    pub basis: Arc<OperatorBasis>,
    pub values: DVector<f64>,
}

impl CouplingVector {
    pub fn new(basis: Arc<OperatorBasis>, values: DVector<f64>) -> Result<Self> {
        if values.len() != basis.len() {
            return Err(Error::Dimension(format!(
                "{} couplings for a basis of {} operators",
                values.len(),
                basis.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("couplings must be finite".into()));
        }
        Ok(CouplingVector { basis, values })
    }

    pub fn zeros(basis: Arc<OperatorBasis>) -> Self {
        let m = basis.len();
        CouplingVector {
            basis,
            values: DVector::zeros(m),
        }
    }

    /// True when the couplings come from a least-squares fit in a truncated basis.
    pub fn is_approximate(&self) -> bool {
        !self.basis.is_complete()
    }

    pub fn max_norm_diff(&self, other: &CouplingVector) -> f64 {
        (&self.values - &other.values).amax()
    }
}

/// In-place inverse of the subset-sum transform over bitmask indices.
fn mobius(values: &mut [f64]) {
    let len = values.len();
    let mut bit = 1;
    while bit < len {
        for mask in 0..len {
            if mask & bit != 0 {
                values[mask] -= values[mask ^ bit];
            }
        }
        bit <<= 1;
    }
}

/// In-place subset-sum (zeta) transform over bitmask indices.
fn zeta(values: &mut [f64]) {
    let len = values.len();
    let mut bit = 1;
    while bit < len {
        for mask in 0..len {
            if mask & bit != 0 {
                values[mask] += values[mask ^ bit];
            }
        }
        bit <<= 1;
    }
}

/// Couplings `g` with `dist(h) ∝ exp(-Σ g_S O_S(h))`.
///
/// Complete bases are inverted exactly. Truncated bases are fitted to
/// `-ln dist` by least squares (with a free constant) and flagged approximate.
pub fn extract_couplings(dist: &Distribution, basis: &Arc<OperatorBasis>) -> Result<CouplingVector> {
    if dist.bits() != basis.n() {
        return Err(Error::Dimension(format!(
            "distribution over {} bits, basis over {}",
            dist.bits(),
            basis.n()
        )));
    }
    dist.ensure_positive()?;
    let mut energy: Vec<f64> = dist.probs().iter().map(|p| -p.ln()).collect();
    let values = if basis.is_complete() {
        mobius(&mut energy);
        DVector::from_iterator(basis.len(), basis.subsets().iter().map(|&m| energy[m as usize]))
    } else {
        let dim = dist.dim();
        let design = DMatrix::from_fn(dim, basis.len() + 1, |h, c| {
            if c == 0 {
                1.0
            } else {
                basis.operator(c - 1, h)
            }
        });
        let rhs = DVector::from_vec(energy);
        let solution = design
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::InvalidArgument(format!("least-squares fit failed: {e}")))?;
        solution.rows(1, basis.len()).into_owned()
    };
    CouplingVector::new(Arc::clone(basis), values)
}

/// `exp(-H) / Z` with `H = Σ g_S O_S`; `log_norm` holds `ln Z`.
pub fn reconstruct_distribution(g: &CouplingVector) -> Result<Distribution> {
    let n = g.basis.n();
    check_bits("reconstruction", n)?;
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("couplings must be finite".into()));
    }
    let mut h = vec![0.0; 1 << n];
    for (alpha, &mask) in g.basis.subsets().iter().enumerate() {
        h[mask as usize] = g.values[alpha];
    }
    zeta(&mut h);
    let log_weights: Vec<f64> = h.into_iter().map(|e| -e).collect();
    Distribution::from_log_weights(&log_weights)
}

/// Couplings of every interior layer of one propagation.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub direction: Direction,
    pub conditioning: Conditioning,
    /// Layer index of each entry: `1..=N` for classification, `N-1` down to
    /// `0` for generation.
    pub layer_indices: Vec<usize>,
    pub couplings: Vec<CouplingVector>,
    /// `deltas[i]` is the max-norm change from `couplings[i]` to `couplings[i + 1]`.
    pub deltas: Vec<f64>,
}

impl FlowTrace {
    pub fn basis(&self) -> &Arc<OperatorBasis> {
        &self.couplings[0].basis
    }

    pub fn is_approximate(&self) -> bool {
        !self.basis().is_complete()
    }

    /// Couplings at layer index `k`, if the trace covers it.
    pub fn at_layer(&self, k: usize) -> Option<&CouplingVector> {
        self.layer_indices
            .iter()
            .position(|&i| i == k)
            .map(|p| &self.couplings[p])
    }

    /// `layer_index,g{0},...,delta`; the first row has an empty delta.
    /// Subset names containing commas are quoted.
    pub fn to_csv(&self) -> String {
        let basis = self.basis();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer_index".to_string()];
        header.extend((0..basis.len()).map(|a| basis.name(a)));
        header.push("delta".into());
        w.write_record(&header).expect("in-memory write");
        for (row, (k, g)) in self.layer_indices.iter().zip(&self.couplings).enumerate() {
            let mut cells = vec![k.to_string()];
            cells.extend(g.values.iter().map(f64::to_string));
            cells.push(if row > 0 { self.deltas[row - 1].to_string() } else { String::new() });
            w.write_record(&cells).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn csv_columns(&self) -> Vec<String> {
        let basis = self.basis();
        let mut cols = vec!["layer_index".to_string()];
        cols.extend((0..basis.len()).map(|a| basis.name(a)));
        cols.push("delta".into());
        cols
    }
}

pub fn flow_trace(
    stack: &RbmStack,
    conditioning: &Conditioning,
    direction: Direction,
    basis: &Arc<OperatorBasis>,
) -> Result<FlowTrace> {
    let depth = stack.depth();
    let (dists, layer_indices): (Vec<Distribution>, Vec<usize>) = match (direction, conditioning) {
        (Direction::Classification, Conditioning::Input(x)) => {
            (stack.classify_propagate(x)?.dists, (1..=depth).collect())
        }
        (Direction::Generation, Conditioning::Output(y)) => {
            // generate_downto yields q̃_{N-1} first, matching the trace order
            (stack.generate_downto(y, 0)?, (0..depth).rev().collect())
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{direction} flow needs {} conditioning",
                match direction {
                    Direction::Classification => "a binary input",
                    Direction::Generation => "an output",
                }
            )))
        }
    };
    let couplings = dists
        .iter()
        .map(|d| extract_couplings(d, basis))
        .collect::<Result<Vec<_>>>()?;
    let deltas = couplings
        .windows(2)
        .map(|w| w[1].max_norm_diff(&w[0]))
        .collect();
    Ok(FlowTrace {
        direction,
        conditioning: conditioning.clone(),
        layer_indices,
        couplings,
        deltas,
    })
}

#[derive(Debug, Clone)]
pub struct FixedPointVerdict {
    pub converged: bool,
    /// Largest step change over the inspected window.
    pub tail_delta: f64,
    pub tol: f64,
    pub window: usize,
    /// Final couplings of the flow when it converged.
    pub fixed_couplings: Option<CouplingVector>,
}

/// Converged when every one of the last `window` step changes is below `tol`.
pub fn detect_fixed_point(trace: &FlowTrace, tol: f64, window: usize) -> Result<FixedPointVerdict> {
    let steps = trace.deltas.len();
    if window > steps {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds the {steps} steps in the flow"
        )));
    }
    let tail_delta = trace.deltas[steps - window..]
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let converged = tail_delta < tol;
    Ok(FixedPointVerdict {
        converged,
        tail_delta,
        tol,
        window,
        fixed_couplings: converged.then(|| trace.couplings.last().unwrap().clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::RbmLayer;
    use crate::state::BinaryState;

    fn basis(n: usize) -> Arc<OperatorBasis> {
        Arc::new(OperatorBasis::complete(n).unwrap())
    }

    #[test]
    fn basis_order_and_names() {
        let b = OperatorBasis::complete(3).unwrap();
        let names: Vec<String> = (0..b.len()).map(|a| b.name(a)).collect();
        assert_eq!(
            names,
            ["g{0}", "g{1}", "g{2}", "g{0,1}", "g{0,2}", "g{1,2}", "g{0,1,2}"]
        );
        assert!(b.is_complete());
        let pairs = OperatorBasis::up_to_order(3, 2).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(!pairs.is_complete());
        let custom = OperatorBasis::from_subsets(3, &[vec![2, 0], vec![1]]).unwrap();
        assert_eq!(custom.subsets(), &[0b010, 0b101]);
        assert!(OperatorBasis::from_subsets(2, &[vec![0], vec![0]]).is_err());
        assert!(OperatorBasis::from_subsets(2, &[vec![]]).is_err());
        assert!(OperatorBasis::from_subsets(2, &[vec![2]]).is_err());
    }

    #[test]
    fn extraction_examples() {
        let g = extract_couplings(&Distribution::uniform(2).unwrap(), &basis(2)).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));

        let d = Distribution::from_weights(vec![0.25, 0.75]).unwrap();
        let g = extract_couplings(&d, &basis(1)).unwrap();
        assert!((g.values[0] + 3f64.ln()).abs() < 1e-15);

        let d = Distribution::from_weights(vec![0.5, 0.0]).unwrap();
        assert!(matches!(
            extract_couplings(&d, &basis(1)),
            Err(Error::NotPositive { index: 1, .. })
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let z = reconstruct_distribution(&CouplingVector::zeros(basis(3))).unwrap();
        assert!(z.probs().iter().all(|&p| p == 0.125));
        let g = CouplingVector::new(basis(1), DVector::from_vec(vec![3f64.ln()])).unwrap();
        let d = reconstruct_distribution(&g).unwrap();
        assert!((d.probs()[0] - 0.75).abs() < 1e-15);
        assert!((d.probs()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn truncated_fit_recovers_pairwise_model() {
        let b = Arc::new(OperatorBasis::up_to_order(3, 2).unwrap());
        let g = CouplingVector::new(Arc::clone(&b), DVector::from_vec(vec![0.3, -0.2, 0.5, 1.1, -0.7, 0.4])).unwrap();
        let d = reconstruct_distribution(&g).unwrap();
        let back = extract_couplings(&d, &b).unwrap();
        assert!(back.is_approximate());
        assert!(back.max_norm_diff(&g) < 1e-10);
    }

    #[test]
    fn zero_stack_flow() {
        let stack = crate::rbm::RbmStack::zeros(2, 3).unwrap();
        let cond = Conditioning::Input(BinaryState::new(vec![1, 0]).unwrap());
        let t = flow_trace(&stack, &cond, Direction::Classification, &basis(2)).unwrap();
        assert_eq!(t.layer_indices, vec![1, 2, 3]);
        assert!(t.couplings.iter().all(|g| g.values.amax() < 1e-15));
        assert!(t.deltas.iter().all(|&d| d < 1e-15));
        let v = detect_fixed_point(&t, 1e-12, 2).unwrap();
        assert!(v.converged);
        assert!(v.fixed_couplings.unwrap().values.amax() < 1e-15);

        let g = flow_trace(&stack, &Conditioning::Output(vec![0.0, 1.0]), Direction::Generation, &basis(2)).unwrap();
        assert_eq!(g.layer_indices, vec![2, 1, 0]);
        assert!(flow_trace(&stack, &cond, Direction::Generation, &basis(2)).is_err());
    }

    #[test]
    fn single_layer_classification_flow() {
        let layer = RbmLayer::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.25, 2.0]),
            DVector::from_vec(vec![0.1, 0.2]),
            DVector::from_vec(vec![0.0, -0.3]),
        )
        .unwrap();
        let stack = crate::rbm::RbmStack::new(vec![layer.clone()]).unwrap();
        let x = BinaryState::new(vec![0, 1]).unwrap();
        let t = flow_trace(&stack, &Conditioning::Input(x.clone()), Direction::Classification, &basis(2)).unwrap();
        assert_eq!(t.couplings.len(), 1);
        assert!(t.deltas.is_empty());
        let direct = extract_couplings(&layer.forward_conditional(&x).unwrap(), &basis(2)).unwrap();
        assert_eq!(t.couplings[0], direct);
        // factorized conditional: no pair coupling, singletons are minus the logits
        assert!(direct.values[2].abs() < 1e-12);
        assert!((direct.values[0] + (-1.0 + 0.1)).abs() < 1e-12);
        assert!((direct.values[1] + (2.0 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_threshold() {
        let b = basis(1);
        let trace = FlowTrace {
            direction: Direction::Classification,
            conditioning: Conditioning::Input(BinaryState::zeros(1)),
            layer_indices: vec![1, 2, 3, 4],
            couplings: [0.0, 0.5, 0.9, 1.2]
                .iter()
                .map(|&v| CouplingVector::new(Arc::clone(&b), DVector::from_element(1, v)).unwrap())
                .collect(),
            deltas: vec![0.5, 0.4, 0.3],
        };
        let v = detect_fixed_point(&trace, 0.1, 2).unwrap();
        assert!(!v.converged);
        assert!((v.tail_delta - 0.4).abs() < 1e-15);
        assert!(v.fixed_couplings.is_none());
        assert!(detect_fixed_point(&trace, 0.1, 4).is_err());
    }

    #[test]
    fn csv_layout() {
        let stack = crate::rbm::RbmStack::zeros(2, 2).unwrap();
        let cond = Conditioning::Input(BinaryState::zeros(2));
        let csv = flow_trace(&stack, &cond, Direction::Classification, &basis(2)).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        // names with commas are quoted
        assert_eq!(lines[0], "layer_index,g{0},g{1},\"g{0,1}\",delta");
        assert_eq!(lines[1], "1,0,0,0,");
        assert_eq!(lines[2], "2,0,0,0,0");
    }
}
