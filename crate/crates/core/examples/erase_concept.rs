//! Erase one concept with a negatively guided frozen teacher and compare
//! per-concept generation accuracy before and after.
//!
//! cargo run --release --example erase_concept

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{run_esd, train_base, EraseConfig, TrainConfig};
use race_lab::eval::disentanglement_report;
use race_lab::model::Arch;

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

    let cfg = EraseConfig::default();
    let (erased, log) = run_esd(&base, &cfg, "example")?;
    println!(
        "erasing concept {}: loss {:.4} -> {:.4} over {} steps",
        cfg.target,
        log.losses[0],
        log.losses[log.losses.len() - 1],
        log.losses.len()
    );

    let before = disentanglement_report(&base.params, &schedule, &data, 500, 3.0, 7)?;
    let after = disentanglement_report(&erased.params, &schedule, &data, 500, 3.0, 7)?;
    println!("concept  base    erased");
    for c in 0..before.len() {
        println!("{c:>7}  {:>5.1}%  {:>5.1}%", 100.0 * before[c], 100.0 * after[c]);
    }
    Ok(())
}
