mod common;

use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use rgshield::flow::{
    detect_fixed_point, extract_couplings, flow_trace, reconstruct_distribution, CouplingVector, OperatorBasis,
};
use rgshield::rbm::{Conditioning, Direction, RbmStack};
use rgshield::state::{delta_distribution, enumerate_states, kl_divergence, BinaryState, Distribution};
use rgshield::Error;

fn weights(max_bits: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_bits).prop_flat_map(|n| prop::collection::vec(0.01f64..1.0, 1usize << n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_equal(
        (a, b) in (1usize..=4).prop_flat_map(|n| (
            prop::collection::vec(0.01f64..1.0, 1usize << n),
            prop::collection::vec(0.01f64..1.0, 1usize << n),
        ))
    ) {
        let p = Distribution::from_weights(a).unwrap();
        let q = Distribution::from_weights(b).unwrap();
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - common::kl(p.probs(), q.probs())).abs() < 1e-12);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        if d == 0.0 {
            prop_assert!(p.max_abs_diff(&q) < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn construction_normalizes(w in weights(6), shift in -50.0f64..50.0) {
        let p = Distribution::from_weights(w.clone()).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lw: Vec<f64> = w.iter().map(|v| v.ln() + shift).collect();
        let q = Distribution::from_log_weights(&lw).unwrap();
        prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn index_and_enumeration_agree(n in 1usize..=10) {
        let states = enumerate_states(n).unwrap();
        prop_assert_eq!(states.len(), 1 << n);
        for (i, s) in states.iter().enumerate() {
            prop_assert_eq!(s.index(), i);
            prop_assert_eq!(&BinaryState::from_index(i, n), s);
            let bits: Vec<u8> = (0..n).map(|b| ((i >> b) & 1) as u8).collect();
            prop_assert_eq!(s.bits(), bits.as_slice());
        }
    }

    #[test]
    fn couplings_round_trip(w in weights(4)) {
        let p = Distribution::from_weights(w).unwrap();
        let basis = Arc::new(OperatorBasis::complete(p.bits()).unwrap());
        let g = extract_couplings(&p, &basis).unwrap();
        prop_assert!(!g.is_approximate());
        let back = reconstruct_distribution(&g).unwrap();
        prop_assert!(back.max_abs_diff(&p) < 1e-10);
        let again = extract_couplings(&back, &basis).unwrap();
        prop_assert!(again.max_norm_diff(&g) < 1e-10);
    }

    #[test]
    fn couplings_match_linear_solve(w in weights(4)) {
        let p = Distribution::from_weights(w).unwrap();
        let basis = Arc::new(OperatorBasis::complete(p.bits()).unwrap());
        let g = extract_couplings(&p, &basis).unwrap();
        let oracle = common::solve_couplings(p.probs(), basis.subsets());
        for (a, b) in g.values.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        let direct = common::probs_from_couplings(&oracle, basis.subsets(), p.bits());
        let rebuilt = reconstruct_distribution(&g).unwrap();
        for (a, b) in rebuilt.probs().iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn couplings_ignore_normalization(w in weights(4), shift in -30.0f64..30.0) {
        let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        let shifted: Vec<f64> = lw.iter().map(|v| v + shift).collect();
        let p = Distribution::from_log_weights(&lw).unwrap();
        let q = Distribution::from_log_weights(&shifted).unwrap();
        let basis = Arc::new(OperatorBasis::complete(p.bits()).unwrap());
        let gp = extract_couplings(&p, &basis).unwrap();
        let gq = extract_couplings(&q, &basis).unwrap();
        prop_assert!(gp.max_norm_diff(&gq) < 1e-10);
    }

    #[test]
    fn truncated_fit_is_exact_inside_its_span(
        g in prop::collection::vec(-2.0f64..2.0, 6)
    ) {
        // n = 3: singletons and pairs only, no triple term
        let basis = Arc::new(OperatorBasis::up_to_order(3, 2).unwrap());
        prop_assert_eq!(basis.len(), 6);
        let true_g = CouplingVector::new(Arc::clone(&basis), DVector::from_vec(g)).unwrap();
        let p = reconstruct_distribution(&true_g).unwrap();
        let fit = extract_couplings(&p, &basis).unwrap();
        prop_assert!(fit.is_approximate());
        prop_assert!(fit.max_norm_diff(&true_g) < 1e-9);
    }
}

#[test]
fn two_state_example() {
    let p = Distribution::from_weights(vec![0.25, 0.75]).unwrap();
    let basis = Arc::new(OperatorBasis::complete(1).unwrap());
    let g = extract_couplings(&p, &basis).unwrap();
    assert!((g.values[0] + 3f64.ln()).abs() < 1e-14);
}

#[test]
fn kl_with_missing_support_is_an_error() {
    let p = Distribution::from_weights(vec![0.5, 0.5]).unwrap();
    let q = delta_distribution(&BinaryState::new(vec![0]).unwrap()).unwrap();
    assert!(matches!(kl_divergence(&p, &q), Err(Error::InfiniteDivergence { index: 1, .. })));
    // zero mass in p is harmless
    assert!((kl_divergence(&q, &p).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn couplings_need_strict_positivity() {
    let p = delta_distribution(&BinaryState::new(vec![1, 0]).unwrap()).unwrap();
    let basis = Arc::new(OperatorBasis::complete(2).unwrap());
    assert!(matches!(extract_couplings(&p, &basis), Err(Error::NotPositive { .. })));
}

#[test]
fn zero_stack_flows_to_vanishing_couplings() {
    let stack = RbmStack::zeros(2, 4).unwrap();
    let basis = Arc::new(OperatorBasis::complete(2).unwrap());
    let x = BinaryState::new(vec![1, 0]).unwrap();
    let trace = flow_trace(&stack, &Conditioning::Input(x), Direction::Classification, &basis).unwrap();
    let verdict = detect_fixed_point(&trace, 1e-3, 2).unwrap();
    assert!(verdict.converged);
    let fixed = verdict.fixed_couplings.unwrap();
    assert!(fixed.values.amax() < 1e-15);

    let trace = flow_trace(&stack, &Conditioning::Output(vec![0.3, 0.9]), Direction::Generation, &basis).unwrap();
    assert!(trace.couplings.iter().all(|g| g.values.amax() < 1e-15));
}

#[test]
fn trace_csv_quotes_multi_node_names() {
    let stack = RbmStack::zeros(2, 2).unwrap();
    let basis = Arc::new(OperatorBasis::complete(2).unwrap());
    let x = BinaryState::new(vec![0, 1]).unwrap();
    let trace = flow_trace(&stack, &Conditioning::Input(x), Direction::Classification, &basis).unwrap();
    let csv = trace.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "layer_index,g{0},g{1},\"g{0,1}\",delta");
    assert_eq!(csv.lines().count(), 3);
}
