//! Paired clean/poisoned cloning attack against a trained victim.

use rgshield::clone::{attack_experiment, AttackConfig};
use rgshield::train::{make_task, train_layerwise, TaskKind, TrainingConfig};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(TaskKind::Copy, 2, 0)?;
    let victim = train_layerwise(2, 2, &task, &TrainingConfig::default())?.stack;

    for budget in [0.0, 0.02, 0.05] {
        let config = AttackConfig { budget, ..AttackConfig::default() };
        let report = attack_experiment(&victim, &task, &config)?;
        println!("budget {budget}");
        print!("{}", report.to_csv());
        if let Some(d) = report.detectability {
            println!(
                "poison always hurts: {}, residual gap {:.3e} (detectable: {})\n",
                report.poison_always_hurts(),
                d.residual_gap,
                d.detectable
            );
        }
    }
    Ok(())
}
