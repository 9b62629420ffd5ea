//! Checks that need a trained base model. The model is trained once (default
//! configuration) and shared by every test in this file.

use std::sync::OnceLock;

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::data::{ConceptDataset, DatasetSpec, Judge, Verdict};
use race_lab::diffusion::{NoiseSchedule, ScheduleSpec};
use race_lab::erasure::{train_base, TrainConfig};
use race_lab::eval::{argmax, concept_samples, diffusion_classify, posterior, TimestepPlan};
use race_lab::model::Arch;
use race_lab::race::{run_race, RaceConfig};

struct Fixture {
    data: ConceptDataset,
    schedule: NoiseSchedule,
    base: Checkpoint,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = ConceptDataset::generate(DatasetSpec::default()).unwrap();
        let spec = ScheduleSpec::default();
        let schedule = spec.build().unwrap();
        let (params, _) = train_base(&data, &schedule, &Arch::default(), &TrainConfig::default()).unwrap();
        let base = Checkpoint::new(
            params,
            spec,
            Provenance {
                stage: Stage::Base,
                parent: None,
                config_digest: "trained-model-tests".into(),
            },
        )
        .unwrap();
        Fixture { data, schedule, base }
    })
}

#[test]
fn guided_chains_land_in_the_data_support() {
    let f = fixture();
    let mut inside = 0;
    let mut total = 0;
    for c in 0..4 {
        let xs = concept_samples(&f.base.params, &f.schedule, c, 250, 3.0, 11).unwrap();
        for x in xs.rows() {
            total += 1;
            if f.data.judge(x) != Verdict::Reject {
                inside += 1;
            }
        }
    }
    let rate = inside as f64 / total as f64;
    assert!(rate >= 0.9, "{rate}");
}

#[test]
fn unconditional_sampling_is_a_mixture() {
    let f = fixture();
    let p = &f.base.params;
    // g = 0 ignores the concept embedding entirely
    let xs = concept_samples(p, &f.schedule, 0, 1000, 0.0, 5).unwrap();
    let mut counts = [0usize; 5];
    for x in xs.rows() {
        match f.data.judge(x) {
            Verdict::Concept(i) => counts[i] += 1,
            Verdict::Reject => counts[4] += 1,
        }
    }
    let max = counts[..4].iter().copied().max().unwrap() as f64 / 1000.0;
    assert!(max <= 0.6, "{counts:?}");
    assert!(counts[..4].iter().all(|&n| n > 0), "{counts:?}");
}

#[test]
fn posterior_picks_the_true_concept_on_held_out_points() {
    let f = fixture();
    let held = f.data.held_out(50).unwrap();
    let ids = [0, 1, 2, 3];
    let mut hits = 0;
    for (i, x) in held.points.rows().into_iter().enumerate() {
        let post = posterior(&f.base.params, &f.schedule, x, &ids, 64, TimestepPlan::Uniform, i as u64).unwrap();
        if argmax(post.view()) == held.labels[i] {
            hits += 1;
        }
    }
    let rate = hits as f64 / held.len() as f64;
    assert!(rate >= 0.95, "{rate}");
}

#[test]
fn single_timestep_classifier_on_generated_samples() {
    let f = fixture();
    let ids = [0, 1, 2, 3];
    for t_star in [10, 30] {
        let mut hits = 0;
        let mut total = 0;
        for c in 0..4 {
            let xs = concept_samples(&f.base.params, &f.schedule, c, 50, 3.0, 21).unwrap();
            for (i, x) in xs.rows().into_iter().enumerate() {
                let got =
                    diffusion_classify(&f.base.params, &f.schedule, x, &ids, 64, TimestepPlan::Fixed(t_star), i as u64)
                        .unwrap();
                total += 1;
                if got == c {
                    hits += 1;
                }
            }
        }
        let rate = hits as f64 / total as f64;
        assert!(rate >= 0.9, "t*={t_star}: {rate}");
    }
}

#[test]
fn l1_regulariser_pulls_towards_the_start() {
    let f = fixture();
    let plain = RaceConfig {
        steps: 150,
        ..Default::default()
    };
    let reg = RaceConfig { lambda: 0.1, ..plain.clone() };
    let (a, _) = run_race(&f.base, 0, &plain, "x").unwrap();
    let (b, _) = run_race(&f.base, 0, &reg, "x").unwrap();
    let theta = f.base.params.arrays.flatten();
    let l1 = |ck: &Checkpoint| {
        ck.params
            .arrays
            .flatten()
            .iter()
            .zip(&theta)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
    };
    assert_eq!(b.stage(), Stage::RaceReg);
    assert!(l1(&b) < l1(&a), "{} vs {}", l1(&b), l1(&a));
}
