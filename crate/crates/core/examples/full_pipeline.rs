//! The whole lab in one run directory: data, base model, erasure, hardened
//! erasure, timestep sweeps for both, and the report.
//!
//! cargo run --release --example full_pipeline [-- run-dir]

use std::path::PathBuf;

use race_lab::config::RunConfig;
use race_lab::pipeline::{self, Run};

fn main() -> race_lab::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("race-lab-example"));
    let cfg = RunConfig::default();
    let run = Run::open(cfg.clone(), &dir)?;
    pipeline::gen_data(&run)?;
    pipeline::train_base(&run)?;
    pipeline::erase(&run)?;
    pipeline::race(&run)?;
    pipeline::sweep(&run)?;

    let mut on_race = cfg.clone();
    on_race.paths.checkpoint = Some("race".into());
    pipeline::sweep(&Run::open(on_race, &dir)?)?;

    print!("{}", pipeline::report(&Run::open(cfg, &dir)?)?);
    println!("artifacts in {}", dir.display());
    Ok(())
}
