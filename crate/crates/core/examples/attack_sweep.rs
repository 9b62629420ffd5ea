//! Attack an erased model by perturbing the concept's condition vector at a
//! single timestep, for each timestep on a grid.
//!
//! cargo run --release --example attack_sweep

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{run_esd, train_base, EraseConfig, TrainConfig};
use race_lab::eval::{asr, default_grid, timestep_sweep, AsrSetup};
use race_lab::model::Arch;
use race_lab::race::{AttackConfig, TrajectoryStart};

fn main() -> race_lab::Result<()> {
    let data = ConceptDataset::generate(DatasetSpec::default())?;
    let spec = ScheduleSpec::default();
    let schedule = spec.build()?;
    let (params, _) = train_base(&data, &schedule, &Arch::default(), &TrainConfig::default())?;
    let base = Checkpoint::new(
        params,
        spec,
        Provenance {
            stage: Stage::Base,
            parent: None,
            config_digest: "example".into(),
        },
    )?;
    let (esd, _) = run_esd(&base, &EraseConfig::default(), "example")?;

    let setup = AsrSetup {
        attack: AttackConfig::default(),
        guidance: 3.0,
        trials: 200,
        seed: 7,
        start: TrajectoryStart::FreshNoise,
    };
    let clean = AsrSetup {
        attack: AttackConfig {
            epsilon: 0.0,
            ..setup.attack
        },
        ..setup
    };
    let curve = timestep_sweep(&esd.params, &schedule, &data, &data, 0, &default_grid(100), &setup)?;
    let (unattacked, _) = asr(&esd.params, &schedule, &data, &data, 0, 50, &clean)?;
    println!("unattacked target rate {:.1}%", 100.0 * unattacked);
    for (t, rate) in curve {
        println!("t* = {t:>3}  ASR {:>5.1}%  {}", 100.0 * rate, "#".repeat((rate * 50.0) as usize));
    }
    Ok(())
}
