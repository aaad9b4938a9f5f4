//! Runs every stage from a config file into a bundle directory.
//!
//! cargo run --release --example full_pipeline -- [config.json] [out_dir]

use rgshield::pipeline::{full_pipeline, ExperimentConfig};
use std::error::Error;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn Error>> {
    let mut args = std::env::args().skip(1);
    let config_path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/copy2.json"));
    let config = ExperimentConfig::from_json(&std::fs::read_to_string(&config_path)?)?;
    let out = args
        .next()
        .map(PathBuf::from)
        .or_else(|| config.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| std::env::temp_dir().join("rgshield-bundle"));

    println!("config {} (hash {})", config_path.display(), config.hash());
    let summary = full_pipeline(&config, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("bundle written to {}", out.display());
    Ok(())
}
