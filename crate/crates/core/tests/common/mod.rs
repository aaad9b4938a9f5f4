//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's propagation, coupling or eigen code; stacks are only read
//! through their public parameters.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgshield::rbm::{RbmLayer, RbmStack};
use rgshield::train::{kl_gradient, layer_objective, LayerTarget};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bit(idx: usize, i: usize) -> f64 {
    ((idx >> i) & 1) as f64
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Probability of state `idx` under independent nodes with these logits.
fn factor_prob(logits: &[f64], idx: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if bit(idx, i) == 1.0 { sigmoid(z) } else { sigmoid(-z) })
        .product()
}

/// `p(h_k = idx | h_{k-1} = prev)`.
pub fn up_prob(layer: &RbmLayer, prev: usize, idx: usize) -> f64 {
    let n = layer.n();
    let logits: Vec<f64> = (0..n)
        .map(|i| layer.hidden_bias[i] + (0..n).map(|j| layer.weights[(i, j)] * bit(prev, j)).sum::<f64>())
        .collect();
    factor_prob(&logits, idx)
}

/// `p(h_{k-1} = idx | h_k = v)` for a possibly real `v`.
pub fn down_prob(layer: &RbmLayer, v: &[f64], idx: usize) -> f64 {
    let n = layer.n();
    let logits: Vec<f64> = (0..n)
        .map(|j| layer.visible_bias[j] + (0..n).map(|i| layer.weights[(i, j)] * v[i]).sum::<f64>())
        .collect();
    factor_prob(&logits, idx)
}

fn reals(idx: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| bit(idx, i)).collect()
}

/// Marginals `q_1..q_N` of the input-clamped chain, summing over every
/// joint hidden configuration.
pub fn brute_classify(stack: &RbmStack, x: usize) -> Vec<Vec<f64>> {
    let (n, depth) = (stack.n(), stack.depth());
    let dim = 1usize << n;
    let mut marg = vec![vec![0.0; dim]; depth];
    for path in 0..dim.pow(depth as u32) {
        let states: Vec<usize> = (0..depth).map(|k| (path / dim.pow(k as u32)) % dim).collect();
        let mut p = 1.0;
        let mut prev = x;
        for (k, &h) in states.iter().enumerate() {
            p *= up_prob(stack.layer(k + 1), prev, h);
            prev = h;
        }
        for (k, &h) in states.iter().enumerate() {
            marg[k][h] += p;
        }
    }
    marg
}

/// Marginals of the output-clamped chain; entry `k` is `q̃_k` for
/// `k = 0..N-1`.
pub fn brute_generate(stack: &RbmStack, y: &[f64]) -> Vec<Vec<f64>> {
    let (n, depth) = (stack.n(), stack.depth());
    let dim = 1usize << n;
    let mut marg = vec![vec![0.0; dim]; depth];
    for path in 0..dim.pow(depth as u32) {
        // states[k] is h_k for k = 0..N-1
        let states: Vec<usize> = (0..depth).map(|k| (path / dim.pow(k as u32)) % dim).collect();
        let mut p = down_prob(stack.layer(depth), y, states[depth - 1]);
        for k in (1..depth).rev() {
            p *= down_prob(stack.layer(k), &reals(states[k], n), states[k - 1]);
        }
        for (k, &h) in states.iter().enumerate() {
            marg[k][h] += p;
        }
    }
    marg
}

/// Couplings of a positive distribution by solving `M g = -ln p`, where
/// `M[h, S] = 1` iff `S ⊆ h` and `S` runs over the empty set (the free
/// constant) followed by `masks`. The constant is dropped from the result.
pub fn solve_couplings(probs: &[f64], masks: &[u32]) -> Vec<f64> {
    let dim = probs.len();
    let all: Vec<u32> = std::iter::once(0).chain(masks.iter().copied()).collect();
    let m = DMatrix::from_fn(dim, all.len(), |h, s| {
        if (h as u32) & all[s] == all[s] { 1.0 } else { 0.0 }
    });
    let rhs = DVector::from_iterator(dim, probs.iter().map(|p| -p.ln()));
    let sol = m.lu().solve(&rhs).expect("subset incidence matrix is invertible");
    sol.iter().skip(1).copied().collect()
}

/// `p ∝ exp(-Σ g_S O_S)` by direct summation.
pub fn probs_from_couplings(g: &[f64], masks: &[u32], n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..1usize << n)
        .map(|h| {
            let e: f64 = masks
                .iter()
                .zip(g)
                .filter(|(s, _)| (h as u32) & **s == **s)
                .map(|(_, c)| c)
                .sum();
            (-e).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

pub fn random_positive(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues
/// descending with matching unit eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut rot = DMatrix::<f64>::identity(n, n);
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = s;
                rot[(q, p)] = -s;
                a = rot.transpose() * &a * &rot;
                v = &v * rot;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Generated `q̃_0(·|y)` from the brute-force oracle.
pub fn generated(stack: &RbmStack, y: &[f64]) -> Vec<f64> {
    brute_generate(stack, y).swap_remove(0)
}

/// Fisher information from central-difference scores of the brute-force
/// `ln q̃_0`, an estimator sharing no code with the library.
pub fn oracle_fim(stack: &RbmStack, y: &[f64], step: f64) -> DMatrix<f64> {
    let n = y.len();
    let q = generated(stack, y);
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut p = y.to_vec();
            p[i] += step;
            let mut m = y.to_vec();
            m[i] -= step;
            let (qp, qm) = (generated(stack, &p), generated(stack, &m));
            (0..q.len()).map(|x| (qp[x].ln() - qm[x].ln()) / (2.0 * step)).collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| (0..q.len()).map(|x| q[x] * scores[i][x] * scores[j][x]).sum())
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn random_layer(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> RbmLayer {
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.5..1.5)).collect() };
    RbmLayer::new(
        DMatrix::from_row_slice(n, n, &draw(n * n)),
        DVector::from_vec(draw(n)),
        DVector::from_vec(draw(n)),
    )
    .unwrap()
}

/// `‖analytic - numeric‖ / ‖analytic‖` for the layer gradient, numeric
/// from central differences of the objective in every parameter.
pub fn gradient_error(layer: &RbmLayer, target: &LayerTarget) -> f64 {
    let n = layer.n();
    let g = kl_gradient(layer, target).unwrap();
    let analytic: Vec<f64> = g
        .weights
        .iter()
        .chain(g.hidden_bias.iter())
        .chain(g.visible_bias.iter())
        .copied()
        .collect();
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..analytic.len() {
        let bump = |delta: f64| {
            let mut l = layer.clone();
            if p < n * n {
                l.weights[p] += delta;
            } else if p < n * n + n {
                l.hidden_bias[p - n * n] += delta;
            } else {
                l.visible_bias[p - n * n - n] += delta;
            }
            layer_objective(&l, target).unwrap()
        };
        numeric.push((bump(h) - bump(-h)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}
