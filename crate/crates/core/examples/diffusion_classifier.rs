//! Use the trained denoiser as a classifier: the concept whose condition
//! best denoises a point is its label.
//!
//! cargo run --release --example diffusion_classifier

use race_lab::data::{ConceptDataset, DatasetSpec};
use race_lab::diffusion::ScheduleSpec;
use race_lab::erasure::{train_base, TrainConfig};
use race_lab::eval::{argmax, posterior, TimestepPlan};
use race_lab::model::Arch;

fn main() -> race_lab::Result<()> {
    let data = ConceptDataset::generate(DatasetSpec::default())?;
    let schedule = ScheduleSpec::default().build()?;
    let (params, _) = train_base(&data, &schedule, &Arch::default(), &TrainConfig::default())?;
    let held = data.held_out(25)?;
    let ids = [0, 1, 2, 3];

    for (name, plan) in [("uniform t", TimestepPlan::Uniform), ("t = 20 only", TimestepPlan::Fixed(20))] {
        let mut hits = 0;
        for (i, x) in held.points.rows().into_iter().enumerate() {
            let p = posterior(&params, &schedule, x, &ids, 64, plan, i as u64)?;
            if argmax(p.view()) == held.labels[i] {
                hits += 1;
            }
            if i == 0 {
                println!("{name}: posterior of first point (label {}) = {:.3}", held.labels[0], p);
            }
        }
        println!("{name}: {hits}/{} held-out points classified correctly", held.len());
    }
    Ok(())
}
