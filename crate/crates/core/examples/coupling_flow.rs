//! Coupling flows of a trained stack in both directions, plus a deep
//! identical-layer stack whose flow settles on a fixed point.

use rgshield::flow::{detect_fixed_point, flow_trace, OperatorBasis};
use rgshield::rbm::{Conditioning, Direction, RbmStack};
use rgshield::state::BinaryState;
use rgshield::train::{init_stack, make_task, train_layerwise, TaskKind, TrainingConfig};
use std::error::Error;
use std::sync::Arc;

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(TaskKind::Copy, 2, 0)?;
    let stack = train_layerwise(2, 2, &task, &TrainingConfig::default())?.stack;
    let basis = Arc::new(OperatorBasis::complete(2)?);

    let x = BinaryState::new(vec![0, 1])?;
    let up = flow_trace(&stack, &Conditioning::Input(x), Direction::Classification, &basis)?;
    println!("classification flow\n{}", up.to_csv());
    let down = flow_trace(&stack, &Conditioning::Output(vec![0.0, 1.0]), Direction::Generation, &basis)?;
    println!("generation flow\n{}", down.to_csv());

    // Twelve copies of one weak layer contract onto a fixed point.
    let layer = init_stack(2, 1, 3, 0.8)?.layer(1).clone();
    let deep = RbmStack::new(vec![layer; 12])?;
    let flow = flow_trace(&deep, &Conditioning::Input(BinaryState::zeros(2)), Direction::Classification, &basis)?;
    let verdict = detect_fixed_point(&flow, 1e-6, 2)?;
    let steps: Vec<String> = flow.deltas.iter().map(|d| format!("{d:.2e}")).collect();
    println!("deep stack step sizes: {}", steps.join(" "));
    println!("fixed point reached: {} (tail {:.2e})", verdict.converged, verdict.tail_delta);

    let pairs = Arc::new(OperatorBasis::up_to_order(3, 1)?);
    let wide = init_stack(3, 2, 5, 1.0)?;
    let approx = flow_trace(&wide, &Conditioning::Input(BinaryState::zeros(3)), Direction::Classification, &pairs)?;
    println!("singleton-only basis is approximate: {}", approx.is_approximate());
    Ok(())
}
