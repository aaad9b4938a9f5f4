//! Fisher information of generation with respect to the label, its
//! strongest poison, and a poisoned copy of a task.

use rgshield::fim::{fim, poison_dataset, strongest_poison, DecodeRule, FimMethod};
use rgshield::stability::DEFAULT_FD_STEP;
use rgshield::train::{make_task, train_layerwise, TaskKind, TrainingConfig};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(TaskKind::Copy, 3, 0)?;
    let config = TrainingConfig { max_sweeps: 200, ..TrainingConfig::default() };
    let stack = train_layerwise(3, 2, &task, &config)?.stack;

    let y = [1.0, 0.0, 1.0];
    let chain = fim(&stack, &y, FimMethod::ChainRule, DEFAULT_FD_STEP)?;
    let oracle = fim(&stack, &y, FimMethod::ScoreOracle, DEFAULT_FD_STEP)?;
    let rel = (&chain.matrix - &oracle.matrix).norm() / chain.matrix.norm();
    println!("F at y = {y:?}:\n{:.5}", chain.matrix);
    let eig: Vec<String> = chain.eigenvalues.iter().map(|v| format!("{v:.4e}")).collect();
    println!("eigenvalues {}", eig.join(" "));
    println!("chain rule vs score oracle: relative Frobenius difference {rel:.2e}");

    let poison = strongest_poison(&chain, 0.05)?;
    println!("strongest poison at budget 0.05: {:?}", poison.delta_y);

    let (poisoned, report) = poison_dataset(&stack, &task, 0.05, DecodeRule::Round, DEFAULT_FD_STEP)?;
    for e in &report.entries {
        println!("y {:?}  KL {:.3e}  clipped {}", e.y, e.kl_discrepancy, e.clipped);
    }
    assert!(report.all_decode_ok());
    print!("{}", poisoned.to_jsonl());
    Ok(())
}
