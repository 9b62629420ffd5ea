mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use race_lab::checkpoint::{Checkpoint, Provenance, Stage};
use race_lab::diffusion::{NoiseSchedule, ScheduleSpec};
use race_lab::erasure::erase_loss;
use race_lab::eval::{argmax, diffusion_classify, energy_distance, posterior, TimestepPlan};
use race_lab::model::NoisePredictor;
use race_lab::race::{initial_delta, pgd_refine, race_loss, AttackConfig};

fn vec_of(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn points(max_rows: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1usize..=3).prop_flat_map(|(r, d)| {
        vec_of(r * d, -5.0, 5.0).prop_map(move |v| Array2::from_shape_vec((r, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_central_differences(seed in any::<u64>()) {
        let g = common::gradient_check(seed, 1e-6);
        prop_assert!(g.params <= 1e-5, "{g:?}");
        prop_assert!(g.condition <= 1e-5, "{g:?}");
    }

    #[test]
    fn forward_shape_closure(seed in any::<u64>(), rows in 1usize..20) {
        let p = common::random_model(seed);
        let a = &p.arch;
        let z = Array2::from_elem((rows, a.data_dim), 0.3);
        let c = Array2::from_elem((rows, a.embed_dim), -0.2);
        let t: Vec<usize> = (0..rows).map(|i| 1 + i % a.timesteps).collect();
        let out = p.predict(z.view(), &t, c.view()).unwrap();
        prop_assert_eq!(out.dim(), (rows, a.data_dim));
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn race_loss_at_zero_delta_is_erase_loss_bitwise(seed in any::<u64>(), other in any::<u64>(), eta in -3.0f64..3.0) {
        let teacher = common::random_model(seed);
        let mut student = teacher.clone();
        let noise = common::random_model(other);
        // perturb the student without changing its shape
        if noise.arch == teacher.arch {
            student = noise;
        } else {
            for b in &mut student.arrays.biases {
                b.mapv_inplace(|v| v + 0.1);
            }
        }
        let a = &teacher.arch;
        let z = Array1::from_iter((0..a.data_dim).map(|i| 0.5 - i as f64));
        let c = teacher.concept(0);
        let t = 1 + (seed as usize) % a.timesteps;
        let zero = Array1::zeros(a.embed_dim);
        let r = race_loss(&student, &teacher, z.view(), t, c.view(), zero.view(), eta).unwrap();
        let e = erase_loss(&student, &teacher, z.view(), t, c.view(), eta).unwrap();
        prop_assert_eq!(r.to_bits(), e.to_bits());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval(steps in 2usize..400, lo in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn posterior_normalised_and_consistent_with_classifier(seed in any::<u64>(), mc in 1usize..24, fixed in any::<bool>()) {
        let p = common::random_model(seed);
        let a = &p.arch;
        let schedule = NoiseSchedule::linear(a.timesteps, 1e-4, 0.2).unwrap();
        let x = Array1::from_iter((0..a.data_dim).map(|i| (seed % 7) as f64 * 0.3 - i as f64));
        let ids: Vec<usize> = (0..a.num_concepts).collect();
        let plan = if fixed { TimestepPlan::Fixed(1 + seed as usize % a.timesteps) } else { TimestepPlan::Uniform };
        let post = posterior(&p, &schedule, x.view(), &ids, mc, plan, seed).unwrap();
        prop_assert!((post.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(post.iter().all(|&v| v > 0.0 && v < 1.0));
        let chosen = diffusion_classify(&p, &schedule, x.view(), &ids, mc, plan, seed).unwrap();
        prop_assert_eq!(ids[argmax(post.view())], chosen);
    }

    #[test]
    fn energy_distance_symmetric_nonnegative(a in points(12), seed in any::<u64>()) {
        let shift = (seed % 5) as f64 - 2.0;
        let b = a.mapv(|v| v * 0.5 + shift);
        let ab = energy_distance(a.view(), b.view());
        let ba = energy_distance(b.view(), a.view());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(energy_distance(a.view(), a.view()), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact(seed in any::<u64>()) {
        let p = common::random_model(seed);
        let spec = ScheduleSpec { steps: p.arch.timesteps, beta_min: 1e-4, beta_max: 0.2 };
        let ck = Checkpoint::new(p, spec, Provenance { stage: Stage::Base, parent: None, config_digest: "x".into() }).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let bits = |c: &Checkpoint| c.params.arrays.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    // 1000 cases x 10 steps = 10k projected iterations
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pgd_stays_in_the_ball_after_every_step(
        seed in any::<u64>(),
        eps in prop_oneof![Just(0.0), 0.0f64..0.5],
        alpha in 1e-3f64..0.3,
    ) {
        let p = common::random_model(seed);
        let a = &p.arch;
        let cfg = AttackConfig { epsilon: eps, step_size: alpha, steps: 1, seed };
        let z = Array2::from_shape_fn((1, a.data_dim), |(_, j)| 0.7 - j as f64);
        let target = Array2::from_shape_fn((1, a.data_dim), |(_, j)| j as f64 - 0.2);
        let cond = p.concept(0).insert_axis(ndarray::Axis(0));
        let t = [1 + seed as usize % a.timesteps];
        let mut delta = initial_delta(seed, a.embed_dim, eps).insert_axis(ndarray::Axis(0));
        prop_assert!(delta.iter().all(|d| d.abs() <= eps));
        for _ in 0..10 {
            let (next, _) = pgd_refine(&p, z.view(), &t, cond.view(), target.view(), delta, &cfg).unwrap();
            prop_assert!(next.iter().all(|d| d.abs() <= eps), "{next:?} eps {eps}");
            delta = next;
        }
        if eps == 0.0 {
            prop_assert!(delta.iter().all(|&d| d == 0.0));
        }
    }
}
