//! Layerwise training on the copy task, then a save/load round trip.

use rgshield::model::{load_model, save_model};
use rgshield::train::{make_task, train_layerwise, TaskKind, TrainingConfig};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(TaskKind::Copy, 2, 0)?;
    for seed in 0..5 {
        let config = TrainingConfig { seed, ..TrainingConfig::default() };
        let outcome = train_layerwise(2, 2, &task, &config)?;
        let correct = task
            .records()
            .iter()
            .filter(|r| outcome.stack.decode(&r.x).map(|d| d == r.y.round()).unwrap_or(false))
            .count();
        println!(
            "seed {seed}: {} sweeps, objective {:.3e} -> {:.3e}, decode {correct}/{}",
            outcome.trace.len(),
            outcome.initial_objective,
            outcome.trace.last().unwrap(),
            task.len()
        );
        if seed == 0 {
            let text = save_model(&outcome.stack);
            assert_eq!(load_model(&text)?.layers(), outcome.stack.layers());
            println!("model file is {} bytes and round-trips exactly", text.len());
        }
    }
    Ok(())
}
