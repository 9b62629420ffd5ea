//! Train the base conditional denoiser on the four-cluster dataset and
//! report how often guided samples land in the requested cluster.
//!
//! cargo run --release --example train_base [-- out.ckpt]

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{train_base, TrainConfig};
use race_lab::eval::disentanglement_report;
use race_lab::model::Arch;

fn main() -> race_lab::Result<()> {
    let data = ConceptDataset::generate(DatasetSpec::default())?;
    let spec = ScheduleSpec::default();
    let schedule = spec.build()?;
    let arch = Arch::default();
    println!("{} points, {} parameters", data.len(), arch.parameter_count());

    let (params, log) = train_base(&data, &schedule, &arch, &TrainConfig::default())?;
    for step in [0, 500, 1000, 2500, log.losses.len() - 1] {
        println!("step {step:>5}  loss {:.4}", log.losses[step]);
    }

    let acc = disentanglement_report(&params, &schedule, &data, 500, 3.0, 7)?;
    for (c, a) in acc.iter().enumerate() {
        println!("concept {c}: {:.1}% of guided samples judged correct", 100.0 * a);
    }

    if let Some(path) = std::env::args().nth(1) {
        let ck = Checkpoint::new(
            params,
            spec,
            Provenance {
                stage: Stage::Base,
                parent: None,
                config_digest: "example".into(),
            },
        )?;
        ck.save(path.as_ref())?;
        println!("saved {path} ({})", &ck.digest()[..16]);
    }
    Ok(())
}
