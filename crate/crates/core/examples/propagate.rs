//! Exact classification and generation through a small random stack.

use rgshield::state::BinaryState;
use rgshield::train::init_stack;
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let stack = init_stack(3, 3, 11, 1.0)?;
    let x = BinaryState::new(vec![1, 0, 1])?;

    let up = stack.classify_propagate(&x)?;
    println!("classification from x = {x}");
    for k in 1..=stack.depth() {
        let q = up.layer(k).expect("interior layer");
        let top = BinaryState::from_index(q.argmax(), stack.n());
        println!("  q_{k}: argmax {top}  p = {:.4}", q.probs()[q.argmax()]);
    }

    let y = stack.decode(&x)?;
    let down = stack.generate_propagate(&y.to_reals())?;
    println!("generation from y = {y}");
    for k in (0..stack.depth()).rev() {
        let q = down.layer(k).expect("interior layer");
        println!("  q~_{k}: {:?}", q.probs().iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
