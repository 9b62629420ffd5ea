//! Evaluation: diffusion classifier, attack success rate, timestep sweeps,
//! per-concept generation accuracy, and an energy-distance quality proxy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::data::{ConceptDataset, Judge, Verdict};
use crate::diffusion::{chain_seeds, forward_diffuse_batch, sample_batch, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::model::{tile, DenoiserParams, NoisePredictor};
use crate::race::{eval_attack_batch, AttackConfig, TrajectoryStart};
use crate::rng::{self, stream};

/// How the Monte Carlo `(t, n)` pairs of the diffusion classifier are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepPlan {
    Uniform,
    /// Every pair uses the same timestep.
    Fixed(usize),
}

/// Shared `(t, n)` sample set used for every candidate concept.
#[derive(Clone, Debug)]
pub struct McSamples {
    pub t: Vec<usize>,
    pub noise: Array2<f64>,
}

impl McSamples {
    pub fn draw(count: usize, dim: usize, steps: usize, plan: TimestepPlan, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(LabError::Config("need at least one Monte Carlo pair".into()));
        }
        let mut r = rng::rng(seed, &[stream::MONTE_CARLO]);
        let t = (0..count)
            .map(|_| match plan {
                TimestepPlan::Uniform => r.random_range(1..=steps),
                TimestepPlan::Fixed(t) => t,
            })
            .collect();
        let noise = Array2::from_shape_vec((count, dim), rng::normals(&mut r, count * dim)).expect("sized");
        Ok(McSamples { t, noise })
    }
}

/// Mean squared denoising error of `x` under each candidate condition.
pub fn denoising_errors<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x: ArrayView1<f64>,
    conditions: ArrayView2<f64>,
    mc: &McSamples,
) -> Result<Array1<f64>> {
    let count = mc.t.len();
    let k = conditions.nrows();
    let xs = tile(x, count);
    let zt = forward_diffuse_batch(xs.view(), &mc.t, mc.noise.view(), schedule)?;
    // one batch of k·count rows
    let z_all = ndarray::concatenate(Axis(0), &vec![zt.view(); k]).expect("same width");
    let t_all: Vec<usize> = (0..k).flat_map(|_| mc.t.iter().copied()).collect();
    let mut c_all = Array2::zeros((k * count, conditions.ncols()));
    for i in 0..k {
        c_all
            .slice_mut(ndarray::s![i * count..(i + 1) * count, ..])
            .assign(&tile(conditions.row(i), count));
    }
    let pred = model.predict(z_all.view(), &t_all, c_all.view())?;
    let mut errors = Array1::zeros(k);
    for i in 0..k {
        let block = pred.slice(ndarray::s![i * count..(i + 1) * count, ..]);
        let resid = &mc.noise - &block;
        errors[i] = resid.iter().map(|v| v * v).sum::<f64>() / count as f64;
    }
    Ok(errors)
}

/// Softmax over negative mean errors.
pub fn posterior_from_errors(errors: ArrayView1<f64>) -> Array1<f64> {
    let min = errors.fold(f64::INFINITY, |m, &v| m.min(v));
    let w = errors.mapv(|e| (-(e - min)).exp());
    let z = w.sum();
    w / z
}

/// Index of the smallest entry, lowest index on ties.
pub fn argmin(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn condition_rows<P: NoisePredictor + ?Sized>(model: &P, ids: &[usize]) -> Result<Array2<f64>> {
    let m = model.arch().embed_dim;
    let mut out = Array2::zeros((ids.len(), m));
    for (r, &id) in ids.iter().enumerate() {
        if id >= model.arch().num_concepts {
            return Err(LabError::Config(format!("concept {id} out of range")));
        }
        out.row_mut(r).assign(&model.concept_embedding(id));
    }
    Ok(out)
}

/// Posterior over `ids` for point `x` from `mc` shared Monte Carlo pairs.
pub fn posterior<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x: ArrayView1<f64>,
    ids: &[usize],
    mc: usize,
    plan: TimestepPlan,
    seed: u64,
) -> Result<Array1<f64>> {
    let conds = condition_rows(model, ids)?;
    let samples = McSamples::draw(mc, x.len(), schedule.steps(), plan, seed)?;
    let errors = denoising_errors(model, schedule, x, conds.view(), &samples)?;
    Ok(posterior_from_errors(errors.view()))
}

/// Concept id in `ids` with the lowest total denoising error.
pub fn diffusion_classify<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x: ArrayView1<f64>,
    ids: &[usize],
    mc: usize,
    plan: TimestepPlan,
    seed: u64,
) -> Result<usize> {
    let conds = condition_rows(model, ids)?;
    let samples = McSamples::draw(mc, x.len(), schedule.steps(), plan, seed)?;
    let errors = denoising_errors(model, schedule, x, conds.view(), &samples)?;
    Ok(ids[argmin(errors.view())])
}

/// One attacked generation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTrial {
    pub seed: u64,
    pub condition: Array1<f64>,
    pub delta: Array1<f64>,
    pub generated: Array1<f64>,
    pub verdict: Verdict,
    pub t_star: usize,
}

/// A named scalar result.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub concept: Option<usize>,
    pub t_star: Option<usize>,
    pub value: f64,
    pub count: usize,
    pub seed: u64,
}

/// Knobs shared by the attack-based evaluations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsrSetup {
    pub attack: AttackConfig,
    pub guidance: f64,
    pub trials: usize,
    pub seed: u64,
    pub start: TrajectoryStart,
}

/// Fraction of attacked generations the judge labels as `target`.
/// Trial `i` uses seed `seed + i` and real example `i mod n_target`.
pub fn asr<J: Judge + ?Sized>(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    judge: &J,
    target: usize,
    t_star: usize,
    setup: &AsrSetup,
) -> Result<(f64, Vec<EvalTrial>)> {
    if setup.trials == 0 {
        return Err(LabError::Config("need at least one trial".into()));
    }
    let pool = dataset.concept_points(target);
    if pool.nrows() == 0 {
        return Err(LabError::Config(format!("dataset has no samples of concept {target}")));
    }
    let seeds: Vec<u64> = (0..setup.trials as u64).map(|i| setup.seed.wrapping_add(i)).collect();
    let picks: Vec<usize> = (0..setup.trials).map(|i| i % pool.nrows()).collect();
    let examples = pool.select(Axis(0), &picks);
    let c = params.concept(target);
    let out = eval_attack_batch(
        params,
        schedule,
        examples.view(),
        t_star,
        c.view(),
        setup.guidance,
        &setup.attack,
        &seeds,
        setup.start,
    )?;
    let trials: Vec<EvalTrial> = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let generated = out.samples.row(i).to_owned();
            EvalTrial {
                seed,
                condition: out.conditions.row(i).to_owned(),
                delta: out.deltas.row(i).to_owned(),
                verdict: judge.judge(generated.view()),
                generated,
                t_star,
            }
        })
        .collect();
    let hits = trials.iter().filter(|t| t.verdict.is(target)).count();
    Ok((hits as f64 / trials.len() as f64, trials))
}

/// `t*` every `T/10` steps: `T/10, 2T/10, …, T`.
pub fn default_grid(steps: usize) -> Vec<usize> {
    let stride = (steps / 10).max(1);
    (1..=steps / stride).map(|i| i * stride).collect()
}

/// ASR at each grid point with a common base seed.
pub fn timestep_sweep<J: Judge + ?Sized>(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    judge: &J,
    target: usize,
    grid: &[usize],
    setup: &AsrSetup,
) -> Result<Vec<(usize, f64)>> {
    grid.iter()
        .map(|&t| asr(params, schedule, dataset, judge, target, t, setup).map(|(r, _)| (t, r)))
        .collect()
}

/// Conditional samples for each concept, `count` chains per concept.
pub fn concept_samples(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    concept: usize,
    count: usize,
    guidance: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let seeds = chain_seeds(rng::derive(seed, &[concept as u64]), count);
    let cond = tile(params.concept_embedding(concept), count);
    sample_batch(params, schedule, cond.view(), guidance, &seeds)
}

/// Fraction of each concept's conditional samples judged as that concept.
pub fn disentanglement_report<J: Judge + ?Sized>(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    judge: &J,
    per_concept: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if per_concept == 0 {
        return Err(LabError::Config("need at least one sample per concept".into()));
    }
    (0..params.arch.num_concepts)
        .map(|c| {
            let xs = concept_samples(params, schedule, c, per_concept, guidance, seed)?;
            Ok(crate::data::hit_rate(judge, xs.view(), c))
        })
        .collect()
}

fn mean_pairwise(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for x in a.rows() {
        for y in b.rows() {
            let mut s = 0.0;
            for k in 0..x.len() {
                let d = x[k] - y[k];
                s += d * d;
            }
            total += s.sqrt();
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// `sqrt(2E|X−Y| − E|X−X'| − E|Y−Y'|)` over the empirical distributions.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let cross = mean_pairwise(a, b);
    let within_a = mean_pairwise(a, a);
    let within_b = mean_pairwise(b, b);
    (2.0 * cross - within_a - within_b).max(0.0).sqrt()
}

/// Energy distance between generated and held-out real samples, per concept.
#[allow(clippy::too_many_arguments)]
pub fn quality_proxy(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    held_out: &ConceptDataset,
    concepts: &[usize],
    n_gen: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if n_gen < 2 {
        return Err(LabError::Config("need at least two generated samples".into()));
    }
    concepts
        .iter()
        .map(|&c| {
            let real = held_out.concept_points(c);
            if real.nrows() == 0 {
                return Err(LabError::Config(format!("no held-out samples of concept {c}")));
            }
            let gen = concept_samples(params, schedule, c, n_gen, guidance, seed)?;
            Ok((c, energy_distance(gen.view(), real.view())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::Arch;
    use ndarray::array;

    /// Predicts a constant per concept; the concept id is the condition value.
    struct PerConcept {
        arch: Arch,
        table: Array2<f64>,
        offsets: Vec<f64>,
    }

    impl NoisePredictor for PerConcept {
        fn arch(&self) -> &Arch {
            &self.arch
        }
        fn predict(&self, z: ArrayView2<f64>, _: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
            let mut out = z.to_owned();
            for (i, c) in cond.rows().into_iter().enumerate() {
                let id = c[0] as usize;
                out.row_mut(i).fill(self.offsets[id]);
            }
            Ok(out)
        }
        fn null_embedding(&self) -> ArrayView1<'_, f64> {
            self.table.row(0)
        }
        fn concept_embedding(&self, id: usize) -> ArrayView1<'_, f64> {
            self.table.row(id)
        }
    }

    fn stub(offsets: Vec<f64>) -> PerConcept {
        let k = offsets.len();
        let arch = Arch {
            num_concepts: k.max(2),
            embed_dim: 1,
            ..Arch::default()
        };
        let table = Array2::from_shape_fn((k.max(2), 1), |(i, _)| i as f64);
        PerConcept { arch, table, offsets }
    }

    #[test]
    fn single_candidate_has_probability_one() {
        let s = crate::diffusion::ScheduleSpec::default().build().unwrap();
        let m = stub(vec![0.0, 0.0]);
        let p = posterior(&m, &s, array![0.0, 0.0].view(), &[1], 8, TimestepPlan::Uniform, 0).unwrap();
        assert_eq!(p, array![1.0]);
    }

    #[test]
    fn symmetric_stub_gives_uniform_posterior() {
        let s = crate::diffusion::ScheduleSpec::default().build().unwrap();
        let m = stub(vec![0.3, 0.3, 0.3, 0.3]);
        let p = posterior(&m, &s, array![1.0, 0.0].view(), &[0, 1, 2, 3], 16, TimestepPlan::Uniform, 1).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_error_stub_prefers_smaller_error() {
        let errors = array![0.1, 0.5];
        assert_eq!(argmin(errors.view()), 0);
        let post = posterior_from_errors(errors.view());
        assert_eq!(argmax(post.view()), 0);
        assert!((post.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_plan_uses_one_timestep() {
        let mc = McSamples::draw(10, 2, 100, TimestepPlan::Fixed(40), 3).unwrap();
        assert!(mc.t.iter().all(|&t| t == 40));
        assert!(McSamples::draw(0, 2, 100, TimestepPlan::Uniform, 3).is_err());
    }

    #[test]
    fn energy_distance_cases() {
        let a = array![[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]];
        assert_eq!(energy_distance(a.view(), a.view()), 0.0);
        let p = array![[0.0, 0.0], [0.0, 0.0]];
        let q = array![[2.0, 0.0]];
        assert!((energy_distance(p.view(), q.view()) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn default_grid_has_ten_points() {
        assert_eq!(default_grid(100), vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        assert_eq!(default_grid(20).len(), 10);
    }

    struct Always(Verdict);
    impl Judge for Always {
        fn judge(&self, _: ArrayView1<f64>) -> Verdict {
            self.0
        }
    }

    #[test]
    fn asr_with_stub_judges() {
        let arch = Arch {
            hidden: vec![8],
            timesteps: 10,
            ..Arch::default()
        };
        let p = DenoiserParams::init(0, &arch).unwrap();
        let s = crate::diffusion::NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let ds = ConceptDataset::generate(DatasetSpec {
            per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let setup = AsrSetup {
            attack: AttackConfig::default(),
            guidance: 3.0,
            trials: 7,
            seed: 11,
            start: TrajectoryStart::FreshNoise,
        };
        let (r, log) = asr(&p, &s, &ds, &Always(Verdict::Reject), 1, 5, &setup).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(log.len(), 7);
        let (r, _) = asr(&p, &s, &ds, &Always(Verdict::Concept(1)), 1, 5, &setup).unwrap();
        assert_eq!(r, 1.0);
        let sweep = timestep_sweep(&p, &s, &ds, &Always(Verdict::Concept(1)), 1, &[5], &setup).unwrap();
        assert_eq!(sweep, vec![(5, 1.0)]);

        let empty = ConceptDataset::generate(DatasetSpec {
            per_class: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(asr(&p, &s, &empty, &Always(Verdict::Reject), 1, 5, &setup).is_err());
    }

    #[test]
    fn report_rows_equal_concepts() {
        let arch = Arch {
            hidden: vec![8],
            timesteps: 10,
            ..Arch::default()
        };
        let p = DenoiserParams::init(0, &arch).unwrap();
        let s = crate::diffusion::NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let r = disentanglement_report(&p, &s, &Always(Verdict::Reject), 3, 3.0, 0).unwrap();
        assert_eq!(r.len(), 4);
    }
}
