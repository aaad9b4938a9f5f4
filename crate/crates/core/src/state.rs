//! Binary state spaces and exact dense distributions over them.
//!
//! States are `{0,1}` vectors indexed little-endian: bit `i` of the state
//! index is node `i`. Every module in the crate shares this ordering, so an
//! indicator state `1_T` of a node subset `T` has index equal to the bitmask
//! of `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of bits any enumerated state space may have.
pub const MAX_BITS: usize = 16;

/// Tolerance for the unit-sum invariant of [`Distribution`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

pub(crate) fn check_bits(what: &'static str, bits: usize) -> Result<()> {
    if bits > MAX_BITS {
        return Err(Error::Capacity {
            what,
            requested: bits,
            limit: MAX_BITS,
        });
    }
    Ok(())
}

/// A configuration of `n` binary nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BinaryState(Vec<u8>);

impl BinaryState {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "binary state component {pos} is {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(BinaryState(bits))
    }

    /// The state with little-endian index `index` over `n` nodes.
    pub fn from_index(index: usize, n: usize) -> Self {
        BinaryState((0..n).map(|i| ((index >> i) & 1) as u8).collect())
    }

    pub fn zeros(n: usize) -> Self {
        BinaryState(vec![0; n])
    }

    pub fn index(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

impl TryFrom<Vec<u8>> for BinaryState {
    type Error = Error;
    fn try_from(bits: Vec<u8>) -> Result<Self> {
        BinaryState::new(bits)
    }
}

impl From<BinaryState> for Vec<u8> {
    fn from(s: BinaryState) -> Self {
        s.0
    }
}

impl std::fmt::Display for BinaryState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// A soft output label: `n` reals in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OutputVector(Vec<f64>);

impl OutputVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if let Some(pos) = components
            .iter()
            .position(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
        {
            return Err(Error::InvalidArgument(format!(
                "output component {pos} is {}, expected a value in [0, 1]",
                components[pos]
            )));
        }
        Ok(OutputVector(components))
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every component is exactly 0 or 1.
    pub fn is_clean(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0 || c == 1.0)
    }

    /// Componentwise rounding to the nearest binary label (ties round up).
    pub fn round(&self) -> BinaryState {
        BinaryState(self.0.iter().map(|&c| u8::from(c >= 0.5)).collect())
    }
}

impl TryFrom<Vec<f64>> for OutputVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        OutputVector::new(v)
    }
}

impl From<OutputVector> for Vec<f64> {
    fn from(y: OutputVector) -> Self {
        y.0
    }
}

impl From<&BinaryState> for OutputVector {
    fn from(s: &BinaryState) -> Self {
        OutputVector(s.to_reals())
    }
}

/// Exact probability vector over all `2^bits` states.
///
/// `log_norm` keeps the log of whatever normalizer was divided out when the
/// distribution was built from unnormalized weights (a partition function for
/// Boltzmann weights, zero for already-normalized input).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    bits: usize,
    probs: Vec<f64>,
    log_norm: f64,
}

impl Distribution {
    /// Builds from unnormalized log-weights, subtracting the maximum before
    /// exponentiating.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let bits = dim_bits(log_weights.len())?;
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidArgument(
                "log-weights must contain a finite maximum".into(),
            ));
        }
        let mut probs: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Distribution {
            bits,
            probs,
            log_norm: max + sum.ln(),
        })
    }

    /// Builds from nonnegative weights, normalizing them.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let bits = dim_bits(weights.len())?;
        if let Some(pos) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight {pos} is {}, expected a finite nonnegative value",
                weights[pos]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(Distribution {
            bits,
            probs,
            log_norm: sum.ln(),
        })
    }

    pub fn uniform(bits: usize) -> Result<Self> {
        check_bits("uniform distribution", bits)?;
        let dim = 1usize << bits;
        Ok(Distribution {
            bits,
            probs: vec![1.0 / dim as f64; dim],
            log_norm: (dim as f64).ln(),
        })
    }

    /// Independent Bernoulli nodes with the given success probabilities. A
    /// binary mean vector yields the point mass on that state.
    pub fn product_bernoulli(means: &[f64]) -> Result<Self> {
        check_bits("product distribution", means.len())?;
        let dim = 1usize << means.len();
        let probs = (0..dim)
            .map(|idx| {
                means
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| if (idx >> i) & 1 == 1 { m } else { 1.0 - m })
                    .product()
            })
            .collect();
        Ok(Distribution {
            bits: means.len(),
            probs,
            log_norm: 0.0,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the most probable state; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.probs.iter().enumerate().map(|(i, &p)| p * f(i)).sum()
    }

    pub fn ensure_positive(&self) -> Result<()> {
        match self.probs.iter().position(|&p| p <= 0.0) {
            Some(index) => Err(Error::NotPositive {
                index,
                value: self.probs[index],
            }),
            None => Ok(()),
        }
    }
}

fn dim_bits(dim: usize) -> Result<usize> {
    if !dim.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "distribution length {dim} is not a power of two"
        )));
    }
    let bits = dim.trailing_zeros() as usize;
    check_bits("distribution", bits)?;
    Ok(bits)
}

/// All `2^n` states in ascending little-endian index order.
pub fn enumerate_states(n: usize) -> Result<Vec<BinaryState>> {
    check_bits("state enumeration", n)?;
    Ok((0..1usize << n)
        .map(|idx| BinaryState::from_index(idx, n))
        .collect())
}

/// Point mass on `s`.
pub fn delta_distribution(s: &BinaryState) -> Result<Distribution> {
    check_bits("delta distribution", s.len())?;
    let mut probs = vec![0.0; 1 << s.len()];
    probs[s.index()] = 1.0;
    Ok(Distribution {
        bits: s.len(),
        probs,
        log_norm: 0.0,
    })
}

/// `Σ p1 ln(p1/p2)` in nats, with `0 ln(0/q) = 0`.
pub fn kl_divergence(p1: &Distribution, p2: &Distribution) -> Result<f64> {
    if p1.dim() != p2.dim() {
        return Err(Error::Dimension(format!(
            "kl_divergence over {} and {} states",
            p1.dim(),
            p2.dim()
        )));
    }
    let mut total = 0.0;
    for (index, (&a, &b)) in p1.probs.iter().zip(&p2.probs).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::InfiniteDivergence { index, mass: a });
            }
            total += a * (a / b).ln();
        }
    }
    // Rounding can push an exact zero slightly negative.
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(n: usize) -> Vec<Vec<u8>> {
        enumerate_states(n)
            .unwrap()
            .into_iter()
            .map(Vec::from)
            .collect()
    }

    #[test]
    fn enumeration_order_is_little_endian() {
        assert_eq!(states(0), vec![Vec::<u8>::new()]);
        assert_eq!(states(1), vec![vec![0], vec![1]]);
        assert_eq!(
            states(2),
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]
        );
    }

    #[test]
    fn enumeration_and_index_are_inverse() {
        for n in 0..=6 {
            for (i, s) in enumerate_states(n).unwrap().iter().enumerate() {
                assert_eq!(s.index(), i);
            }
        }
    }

    #[test]
    fn enumeration_capacity() {
        assert!(enumerate_states(16).is_ok());
        match enumerate_states(17) {
            Err(Error::Capacity { limit, .. }) => assert_eq!(limit, 16),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn delta_examples() {
        let d = delta_distribution(&BinaryState::new(vec![1]).unwrap()).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0]);
        let d = delta_distribution(&BinaryState::new(vec![0, 0]).unwrap()).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0, 0.0, 0.0]);
        let d = delta_distribution(&BinaryState::new(vec![1, 0, 1]).unwrap()).unwrap();
        assert_eq!(d.probs().iter().sum::<f64>(), 1.0);
        assert_eq!(d.probs()[5], 1.0);
    }

    #[test]
    fn kl_examples() {
        let half = Distribution::from_weights(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);

        let point = Distribution::from_weights(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&point, &half).unwrap();
        assert!((kl - 0.693_147_180_559_945_3).abs() < 1e-15);

        let skew = Distribution::from_weights(vec![0.25, 0.75]).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        let kl = kl_divergence(&half, &skew).unwrap();
        assert!((kl - 0.143_841_036_225_890_1).abs() < 1e-12, "{kl}");
    }

    #[test]
    fn kl_infinite_and_mismatch() {
        let point = Distribution::from_weights(vec![1.0, 0.0]).unwrap();
        let other = Distribution::from_weights(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            kl_divergence(&point, &other),
            Err(Error::InfiniteDivergence { index: 0, .. })
        ));
        let four = Distribution::uniform(2).unwrap();
        assert!(matches!(
            kl_divergence(&point, &four),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn log_weights_record_partition_function() {
        let d = Distribution::from_log_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-15);
        assert!((d.log_norm() - 4f64.ln()).abs() < 1e-15);
        // overflow-prone energies
        let d = Distribution::from_log_weights(&[1000.0, 1000.0]).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn product_bernoulli_binary_mean_is_delta() {
        let d = Distribution::product_bernoulli(&[1.0, 0.0]).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn states_and_outputs_validate() {
        assert!(BinaryState::new(vec![0, 2]).is_err());
        assert!(OutputVector::new(vec![0.5, 1.1]).is_err());
        assert!(OutputVector::new(vec![f64::NAN]).is_err());
        let y = OutputVector::new(vec![0.96, 0.04]).unwrap();
        assert!(!y.is_clean());
        assert_eq!(y.round().bits(), &[1, 0]);
    }
}
