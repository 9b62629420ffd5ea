//! Harden the erasure by training against the attack, then attack both
//! erased models with the same budget and seeds.
//!
//! cargo run --release --example race_defense

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{run_esd, train_base, EraseConfig, TrainConfig};
use race_lab::eval::{asr, disentanglement_report, AsrSetup};
use race_lab::model::Arch;
use race_lab::race::{run_race, AttackConfig, RaceConfig, TrajectoryStart};

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
    let (race, log) = run_race(&base, 0, &RaceConfig::default(), "example")?;
    println!("race: {} steps, final loss {:.4}", log.losses.len(), log.losses[log.losses.len() - 1]);

    let setup = AsrSetup {
        attack: AttackConfig::default(),
        guidance: 3.0,
        trials: 200,
        seed: 7,
        start: TrajectoryStart::FreshNoise,
    };
    for t_star in [30, 50, 70] {
        let (a, _) = asr(&esd.params, &schedule, &data, &data, 0, t_star, &setup)?;
        let (b, _) = asr(&race.params, &schedule, &data, &data, 0, t_star, &setup)?;
        println!("t* = {t_star}: ASR esd {:>5.1}%  race {:>5.1}%", 100.0 * a, 100.0 * b);
    }
    let acc = disentanglement_report(&race.params, &schedule, &data, 500, 3.0, 7)?;
    println!("race per-concept accuracy {acc:.3?}");
    Ok(())
}
