use rgshield::clone::{
    attack_experiment, clone_train, compare_models, engineer_victim, victim_observations, AttackConfig,
    EngineeringConfig,
};
use rgshield::rbm::RbmStack;
use rgshield::state::{enumerate_states, BinaryState};
use rgshield::train::{make_task, train_layerwise, TaskKind, TrainingConfig};

fn victim() -> RbmStack {
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    train_layerwise(2, 2, &task, &TrainingConfig::default()).unwrap().stack
}

fn labels(stack: &RbmStack, xs: &[BinaryState]) -> Vec<BinaryState> {
    xs.iter().map(|x| stack.decode(x).unwrap()).collect()
}

#[test]
fn a_model_agrees_with_itself() {
    let v = victim();
    let xs = enumerate_states(2).unwrap();
    let c = compare_models(&v, &v, &xs, &labels(&v, &xs)).unwrap();
    assert_eq!(c.output_kl, 0.0);
    assert_eq!((c.agreement, c.bit_agreement, c.misclassification), (1.0, 1.0, 0.0));
}

#[test]
fn zero_clone_agrees_at_chance_per_bit() {
    // the zero clone decodes every input to 00; against the copy labels that
    // matches exactly half the bits
    let v = victim();
    let zero = RbmStack::zeros(2, 2).unwrap();
    let xs = enumerate_states(2).unwrap();
    let task_labels: Vec<BinaryState> = xs.clone();
    assert_eq!(labels(&v, &xs), task_labels, "trained victim solves copy");
    let c = compare_models(&v, &zero, &xs, &task_labels).unwrap();
    assert_eq!(c.bit_agreement, 0.5);
    assert_eq!(c.agreement, 0.25);
    assert_eq!(c.misclassification, 0.75);
    assert!(c.output_kl > 0.0);
}

#[test]
fn clone_fit_improves_with_training() {
    let v = victim();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let obs = victim_observations(&v, &task).unwrap();
    let xs = enumerate_states(2).unwrap();
    let kl_after = |sweeps: usize| {
        let config = AttackConfig {
            trainer: TrainingConfig { max_sweeps: sweeps, ..TrainingConfig::default() },
            ..AttackConfig::default()
        };
        let clone = clone_train(&obs, &config, 0).unwrap().stack;
        compare_models(&v, &clone, &xs, &xs).unwrap().output_kl
    };
    let (early, late) = (kl_after(1), kl_after(500));
    assert!(early.is_finite() && late.is_finite());
    assert!(late < early, "{late} vs {early}");
}

#[test]
fn clean_clone_learns_the_copy_task() {
    let v = victim();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let obs = victim_observations(&v, &task).unwrap();
    let xs = enumerate_states(2).unwrap();
    let accurate = (0..5)
        .filter(|&seed| {
            let clone = clone_train(&obs, &AttackConfig::default(), seed).unwrap().stack;
            compare_models(&v, &clone, &xs, &xs).unwrap().misclassification <= 0.1
        })
        .count();
    assert!(accurate >= 4, "{accurate}/5 clones reach 0.9 accuracy");
}

#[test]
fn experiment_is_deterministic_and_seed_paired() {
    let v = victim();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let config = AttackConfig { seeds: vec![4, 1, 3], ..AttackConfig::default() };
    let a = attack_experiment(&v, &task, &config).unwrap();
    let b = attack_experiment(&v, &task, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    let seeds: Vec<u64> = a.clean.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![4, 1, 3]);
    assert_eq!(a.poisoned.iter().map(|r| r.seed).collect::<Vec<_>>(), seeds);
    assert_eq!(a.to_csv().lines().count(), 1 + 6);
}

#[test]
fn zero_budget_makes_conditions_identical() {
    let v = victim();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let config = AttackConfig { budget: 0.0, seeds: vec![0, 1], ..AttackConfig::default() };
    let r = attack_experiment(&v, &task, &config).unwrap();
    for (c, p) in r.clean.iter().zip(&r.poisoned) {
        assert_eq!(c.residual, p.residual);
        assert_eq!(c.comparison, p.comparison);
    }
    assert!(!r.poison_always_hurts());
}

#[test]
fn zero_victim_cannot_be_poisoned_but_baseline_runs() {
    let zero = RbmStack::zeros(2, 2).unwrap();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let config = AttackConfig { seeds: vec![0], ..AttackConfig::default() };
    let r = attack_experiment(&zero, &task, &config).unwrap();
    assert!(r.poisoning_unavailable.is_some());
    assert!(r.poisoned.is_empty());
    assert_eq!(r.clean.len(), 1);
}

#[test]
fn engineering_records_every_probe_and_never_exceeds_its_cap() {
    let v = victim();
    let task = make_task(TaskKind::Copy, 2, 0).unwrap();
    let e = engineer_victim(&v, &task, &EngineeringConfig::default()).unwrap();
    assert!(!e.probes.is_empty());
    assert!(e.probes.iter().all(|p| p.scale <= 64.0));
    assert!(e.probes.windows(2).all(|w| w[1].scale == 2.0 * w[0].scale));
    if e.has_relevant {
        assert!(e.probes.last().unwrap().has_relevant);
    } else {
        assert_eq!(e.scale, 1.0);
        assert_eq!(e.stack, v);
    }
}
