//! Robustness versus quality: adversarial erasure with and without an L1
//! pull towards the base weights, scored by energy distance to held-out
//! data on the concepts that were not erased.
//!
//! cargo run --release --example quality_tradeoff

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{train_base, TrainConfig};
use race_lab::eval::quality_proxy;
use race_lab::model::Arch;
use race_lab::race::{run_race, RaceConfig};

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
    let held = data.held_out(500)?;
    let others = [1, 2, 3];
    println!("model      energy distance on concepts {others:?}");
    let q = quality_proxy(&base.params, &schedule, &held, &others, 200, 3.0, 7)?;
    println!("base       {:.3?}", q.iter().map(|p| p.1).collect::<Vec<_>>());
    for lambda in [0.0, 0.1] {
        let cfg = RaceConfig {
            lambda,
            ..Default::default()
        };
        let (ck, _) = run_race(&base, 0, &cfg, "example")?;
        let q = quality_proxy(&ck.params, &schedule, &held, &others, 200, 3.0, 7)?;
        println!("{:<10} {:.3?}", ck.stage().tag(), q.iter().map(|p| p.1).collect::<Vec<_>>());
    }
    Ok(())
}
