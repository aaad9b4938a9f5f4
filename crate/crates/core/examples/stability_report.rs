//! Per-layer stability matrices along actual flows. Every layer map is a
//! strictly positive stochastic channel, so the spectral radius stays below
//! one however hard the weights are scaled.

use rgshield::flow::{flow_trace, OperatorBasis};
use rgshield::rbm::{Conditioning, Direction};
use rgshield::stability::{relevance_report, DEFAULT_FD_STEP, DEFAULT_TOL_EIG};
use rgshield::state::BinaryState;
use rgshield::train::init_stack;
use std::error::Error;
use std::sync::Arc;

fn main() -> Result<(), Box<dyn Error>> {
    let base = init_stack(2, 4, 1, 1.0)?;
    let basis = Arc::new(OperatorBasis::complete(2)?);
    println!("scale  class_rho  gen_rho    gen_cumulative_sigma");
    for scale in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let stack = base.scaled(scale);
        let up = flow_trace(&stack, &Conditioning::Input(BinaryState::zeros(2)), Direction::Classification, &basis)?;
        let down = flow_trace(&stack, &Conditioning::Output(vec![1.0, 0.0]), Direction::Generation, &basis)?;
        let class = relevance_report(&stack, &up, DEFAULT_FD_STEP, DEFAULT_TOL_EIG)?;
        let gen = relevance_report(&stack, &down, DEFAULT_FD_STEP, DEFAULT_TOL_EIG)?;
        println!(
            "{scale:>5}  {:.6}   {:.6}   {:.3e}",
            class.max_spectral_radius(),
            gen.max_spectral_radius(),
            gen.cumulative_top_singular
        );
        assert!(!class.has_relevant && !gen.has_relevant);
    }
    let stack = base.scaled(4.0);
    let down = flow_trace(&stack, &Conditioning::Output(vec![1.0, 0.0]), Direction::Generation, &basis)?;
    let report = relevance_report(&stack, &down, DEFAULT_FD_STEP, DEFAULT_TOL_EIG)?;
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    Ok(())
}
