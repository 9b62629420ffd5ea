//! Single-timestep PGD attacks on condition embeddings and adversarial
//! erasure training against them.
//!
//! The attacker perturbs the condition vector `c` by `δ` with `‖δ‖_∞ ≤ ε`,
//! taking signed gradient steps that make the erased model denoise a real
//! example of the target concept well at one timestep. The defender
//! repeatedly finds such `δ` against the current student and erases
//! `c + δ` instead of `c`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::diffusion::{
    denoise_range_batch, denoise_to_batch, forward_diffuse_batch, start_noise, NoiseSchedule,
};
use crate::erasure::{draw_latents, erasure_residual, LatentSource, TrainLog};
use crate::error::{check_len, LabError, Result};
use crate::model::{FineTuneScope, row, tile, AdamConfig, AdamState, DenoiserParams, NoisePredictor, ParamArrays};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// ∞-norm bound on `δ`.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            step_size: 0.025,
            steps: 10,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LabError::Config("epsilon must be finite and >= 0".into()));
        }
        if self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(LabError::Config("step size must be > 0 when steps > 0".into()));
        }
        Ok(())
    }
}

/// An adversarial offset to a condition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Array1<f64>,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `δ₀ ∼ U(−ε, ε)` per coordinate.
pub fn initial_delta(seed: u64, dim: usize, epsilon: f64) -> Array1<f64> {
    let mut r = rng::rng(seed, &[stream::PGD_INIT]);
    Array1::from_iter((0..dim).map(|_| epsilon * (2.0 * r.random::<f64>() - 1.0)))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed-gradient PGD from given starting offsets, one row per attack.
///
/// Each step moves `δ ← clamp(δ + α·sign(−∇_δ ‖n − Φ(z, t, c + δ)‖²), ±ε)`.
/// Returns the final offsets and a `rows × (steps + 1)` loss trace (the
/// loss at every iterate, starting with `δ₀`).
#[allow(clippy::too_many_arguments)]
pub fn pgd_refine(
    params: &DenoiserParams,
    z: ArrayView2<f64>,
    t: &[usize],
    cond: ArrayView2<f64>,
    target_noise: ArrayView2<f64>,
    delta0: Array2<f64>,
    cfg: &AttackConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    check_len("initial offsets", cond.nrows(), delta0.nrows())?;
    let eps = cfg.epsilon;
    let mut delta = delta0;
    let mut trace = Array2::zeros((cond.nrows(), cfg.steps + 1));
    for step in 0..cfg.steps {
        let attacked = &cond + &delta;
        let (losses, grad) = params.condition_loss_grad(z, t, attacked.view(), target_noise)?;
        trace.column_mut(step).assign(&losses);
        ndarray::Zip::from(&mut delta).and(&grad).for_each(|d, &g| {
            *d = (*d + cfg.step_size * sign(-g)).clamp(-eps, eps);
        });
    }
    let attacked = &cond + &delta;
    let pred = params.forward_batch(z, t, attacked.view())?;
    let resid = &target_noise - &pred;
    trace
        .column_mut(cfg.steps)
        .assign(&resid.map_axis(Axis(1), |r| r.dot(&r)));
    Ok((delta, trace))
}

/// Batched PGD with per-row initialisation seeds.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_batch(
    params: &DenoiserParams,
    z: ArrayView2<f64>,
    t: &[usize],
    cond: ArrayView2<f64>,
    target_noise: ArrayView2<f64>,
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_len("attack seeds", cond.nrows(), seeds.len())?;
    let m = cond.ncols();
    let mut delta0 = Array2::zeros((seeds.len(), m));
    for (i, &s) in seeds.iter().enumerate() {
        delta0.row_mut(i).assign(&initial_delta(s, m, cfg.epsilon));
    }
    pgd_refine(params, z, t, cond, target_noise, delta0, cfg)
}

/// Targeted attack on one latent: find `δ` that makes the model predict
/// `target_noise` for `(z_t, t, c + δ)`. Seeded by `cfg.seed`.
pub fn pgd_attack(
    params: &DenoiserParams,
    z_t: ArrayView1<f64>,
    t: usize,
    cond: ArrayView1<f64>,
    target_noise: ArrayView1<f64>,
    cfg: &AttackConfig,
) -> Result<(Perturbation, Vec<f64>)> {
    let (delta, trace) = pgd_attack_batch(params, row(z_t), &[t], row(cond), row(target_noise), cfg, &[cfg.seed])?;
    Ok((
        Perturbation {
            delta: delta.row(0).to_owned(),
            epsilon: cfg.epsilon,
        },
        trace.row(0).to_vec(),
    ))
}

/// Erasure loss with the student conditioned on `c + δ` and the teacher
/// target built from the clean `c`.
pub fn race_loss<S, T>(
    student: &S,
    teacher: &T,
    z: ArrayView1<f64>,
    t: usize,
    cond: ArrayView1<f64>,
    delta: ArrayView1<f64>,
    eta: f64,
) -> Result<f64>
where
    S: NoisePredictor + ?Sized,
    T: NoisePredictor + ?Sized,
{
    check_len("perturbation length", cond.len(), delta.len())?;
    let attacked = &cond + &delta;
    let (losses, _) = erasure_residual(student, teacher, row(z), &[t], row(attacked.view()), row(cond), eta)?;
    Ok(losses[0])
}

/// `λ·Σ|θ − θ*|` and its subgradient (0 where equal).
pub fn reg_term(student: &DenoiserParams, teacher: &DenoiserParams, lambda: f64) -> Result<(f64, ParamArrays)> {
    if student.arch != teacher.arch {
        return Err(LabError::Config("student and teacher architectures differ".into()));
    }
    let mut grad = ParamArrays::zeros(&student.arch);
    let mut value = 0.0;
    let theirs: Vec<&[f64]> = teacher.arrays.named().into_iter().map(|(_, _, v)| v).collect();
    let mine: Vec<&[f64]> = student.arrays.named().into_iter().map(|(_, _, v)| v).collect();
    for ((g, a), b) in grad.slices_mut().into_iter().zip(mine).zip(theirs) {
        for i in 0..g.len() {
            let diff = a[i] - b[i];
            value += diff.abs();
            g[i] = lambda * sign(diff);
        }
    }
    Ok((lambda * value, grad))
}

/// Target embedding followed by the `k` most cosine-similar other concepts.
pub fn expand_keywords(params: &DenoiserParams, target: usize, k: usize) -> Result<Vec<(usize, Array1<f64>)>> {
    let table = &params.arrays.concept_embeddings;
    let count = table.nrows();
    if target >= count {
        return Err(LabError::Config(format!("target concept {target} out of range")));
    }
    if k >= count {
        return Err(LabError::Config(format!("cannot expand to {k} keywords with {count} concepts")));
    }
    let norm = |v: ArrayView1<f64>| v.dot(&v).sqrt();
    let anchor = table.row(target);
    let mut others: Vec<(usize, f64)> = (0..count)
        .filter(|&i| i != target)
        .map(|i| {
            let r = table.row(i);
            let denom = norm(anchor) * norm(r);
            let sim = if denom > 0.0 { anchor.dot(&r) / denom } else { 0.0 };
            (i, sim)
        })
        .collect();
    // stable sort keeps lower ids first on ties
    others.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(std::iter::once(target)
        .chain(others.into_iter().take(k).map(|(i, _)| i))
        .map(|i| (i, table.row(i).to_owned()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    pub steps: usize,
    pub attack: AttackConfig,
    pub eta: f64,
    pub lr: f64,
    pub batch: usize,
    pub guidance: f64,
    pub latent_source: LatentSource,
    pub scope: FineTuneScope,
    /// L1 pull towards the frozen teacher; 0 disables.
    pub lambda: f64,
    /// Number of related concepts erased alongside the target.
    pub keywords: usize,
    pub seed: u64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            steps: 2000,
            attack: AttackConfig::default(),
            eta: 1.0,
            lr: 3e-5,
            batch: 16,
            guidance: 3.0,
            latent_source: LatentSource::Teacher,
            scope: FineTuneScope::All,
            lambda: 0.0,
            keywords: 0,
            seed: 0,
        }
    }
}

impl RaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(LabError::Config("race steps and batch must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LabError::Config("lambda must be finite and >= 0".into()));
        }
        self.attack.validate()
    }

    pub fn stage(&self) -> Stage {
        if self.keywords > 0 {
            Stage::RaceKw
        } else if self.lambda > 0.0 {
            Stage::RaceReg
        } else {
            Stage::Race
        }
    }
}

/// Adversarial erasure: at every step attack the student's condition with
/// PGD and erase the attacked condition.
pub fn run_race(start: &Checkpoint, target: usize, cfg: &RaceConfig, config_digest: &str) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let teacher = &start.params;
    let schedule = start.schedule.build()?;
    let keywords = expand_keywords(teacher, target, cfg.keywords)?;
    let mut student = teacher.clone();
    let mut adam = AdamState::new(&teacher.arch);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let c = teacher.concept(target);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let source = match cfg.latent_source {
            LatentSource::Teacher => teacher,
            LatentSource::Student => &student,
        };
        let batch = draw_latents(source, &schedule, c.view(), cfg.guidance, cfg.batch, cfg.seed, step)?;
        let mut loss = 0.0;
        let mut grad = ParamArrays::zeros(&teacher.arch);
        for (j, (_, kw)) in keywords.iter().enumerate() {
            let conds = tile(kw.view(), cfg.batch);
            let seeds: Vec<u64> = (0..cfg.batch as u64)
                .map(|i| rng::derive(cfg.seed, &[stream::PGD_INIT, step as u64, j as u64, i]))
                .collect();
            let (delta, _) = pgd_attack_batch(
                &student,
                batch.z_t.view(),
                &batch.t,
                conds.view(),
                batch.noise.view(),
                &cfg.attack,
                &seeds,
            )?;
            let attacked = &conds + &delta;
            let (l, g) = crate::erasure::erase_step_grad(
                &student,
                teacher,
                &batch,
                attacked.view(),
                conds.view(),
                cfg.eta,
            )?;
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        if cfg.lambda > 0.0 {
            let (r, g) = reg_term(&student, teacher, cfg.lambda)?;
            loss += r;
            grad.add_scaled(&g, 1.0);
        }
        grad.restrict(cfg.scope, &teacher.arch);
        adam.apply(&mut student.arrays, &grad, &adam_cfg)?;
        log.losses.push(loss);
    }
    let ck = start.derive(student, cfg.stage(), config_digest)?;
    Ok((ck, log))
}

/// Where the evaluation trajectory starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStart {
    /// Fresh `N(0, I)` noise from the trial seed.
    #[default]
    FreshNoise,
    /// The real example diffused to `T` with the trial's attack noise.
    NoisedExample,
}

/// Output of a batch of evaluation attacks.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub samples: Array2<f64>,
    /// Attacked conditions `c + δ`, one row per trial.
    pub conditions: Array2<f64>,
    pub deltas: Array2<f64>,
    pub traces: Array2<f64>,
}

/// The noise shared by PGD's target and the real example's diffusion.
pub fn trial_noise(seed: u64, dim: usize) -> Array1<f64> {
    let mut r = rng::rng(seed, &[stream::DIFFUSE_NOISE]);
    Array1::from(rng::normals(&mut r, dim))
}

/// Single-timestep attack pipeline for a batch of trials:
/// denoise to `t*` with `c`, find `δ` against the real example diffused to
/// `t*`, then finish denoising with `c + δ`. Row `i` uses `seeds[i]` and
/// `examples[i]`.
#[allow(clippy::too_many_arguments)]
pub fn eval_attack_batch(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    examples: ArrayView2<f64>,
    t_star: usize,
    cond: ArrayView1<f64>,
    guidance: f64,
    cfg: &AttackConfig,
    seeds: &[u64],
    start: TrajectoryStart,
) -> Result<AttackOutcome> {
    schedule.check(t_star)?;
    check_len("examples", seeds.len(), examples.nrows())?;
    let rows = seeds.len();
    let d = params.arch.data_dim;
    let mut noise = Array2::zeros((rows, d));
    let mut init = Array2::zeros((rows, d));
    for (i, &s) in seeds.iter().enumerate() {
        noise.row_mut(i).assign(&trial_noise(s, d));
        init.row_mut(i).assign(&start_noise(s, d));
    }
    if start == TrajectoryStart::NoisedExample {
        let top = vec![schedule.steps(); rows];
        init = forward_diffuse_batch(examples, &top, noise.view(), schedule)?;
    }
    let conds = tile(cond, rows);
    let z_star = denoise_to_batch(params, schedule, init.view(), t_star, conds.view(), guidance, seeds)?;

    let ts = vec![t_star; rows];
    let z_tilde = forward_diffuse_batch(examples, &ts, noise.view(), schedule)?;
    let pgd_seeds: Vec<u64> = seeds.iter().map(|&s| rng::derive(s, &[stream::PGD_INIT])).collect();
    let (delta, traces) = pgd_attack_batch(params, z_tilde.view(), &ts, conds.view(), noise.view(), cfg, &pgd_seeds)?;
    let attacked = &conds + &delta;
    let samples = denoise_range_batch(params, schedule, z_star.view(), t_star, 0, attacked.view(), guidance, seeds)?;
    Ok(AttackOutcome {
        samples,
        conditions: attacked,
        deltas: delta,
        traces,
    })
}

/// Single-trial form of [`eval_attack_batch`].
#[allow(clippy::too_many_arguments)]
pub fn eval_attack_on_example(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    example: ArrayView1<f64>,
    t_star: usize,
    cond: ArrayView1<f64>,
    guidance: f64,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Array1<f64>> {
    let out = eval_attack_batch(
        params,
        schedule,
        row(example),
        t_star,
        cond,
        guidance,
        cfg,
        &[seed],
        TrajectoryStart::FreshNoise,
    )?;
    Ok(out.samples.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Provenance;
    use crate::diffusion::{sample, ScheduleSpec};
    use crate::erasure::{erase_loss, run_esd, EraseConfig};
    use crate::model::{Activation, Arch};
    use ndarray::array;

    fn arch() -> Arch {
        Arch {
            data_dim: 2,
            embed_dim: 4,
            time_dim: 4,
            hidden: vec![16, 16],
            activation: Activation::Silu,
            num_concepts: 4,
            timesteps: 20,
        }
    }

    fn base() -> Checkpoint {
        Checkpoint::new(
            DenoiserParams::init(9, &arch()).unwrap(),
            ScheduleSpec {
                steps: 20,
                beta_min: 1e-3,
                beta_max: 0.2,
            },
            Provenance {
                stage: Stage::Base,
                parent: None,
                config_digest: "t".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_epsilon_gives_zero_delta() {
        let p = DenoiserParams::init(1, &arch()).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let (d, trace) = pgd_attack(&p, array![0.1, 0.2].view(), 5, p.concept(0).view(), array![1.0, -1.0].view(), &cfg)
            .unwrap();
        assert!(d.delta.iter().all(|&v| v == 0.0));
        assert_eq!(trace.len(), 11);
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let p = DenoiserParams::init(1, &arch()).unwrap();
        let cfg = AttackConfig {
            steps: 0,
            seed: 42,
            ..Default::default()
        };
        let (d, trace) = pgd_attack(&p, array![0.1, 0.2].view(), 5, p.concept(0).view(), array![1.0, -1.0].view(), &cfg)
            .unwrap();
        assert_eq!(d.delta, initial_delta(42, 4, 0.1));
        assert!(d.linf() <= 0.1);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn one_step_from_zero_follows_the_negative_loss_gradient() {
        let p = DenoiserParams::init(2, &arch()).unwrap();
        let z = array![0.3, -0.7];
        let n = array![0.5, 1.5];
        let c = p.concept(1);
        let cfg = AttackConfig {
            epsilon: 1.0,
            step_size: 0.025,
            steps: 1,
            seed: 0,
        };
        let (delta, _) = pgd_refine(&p, row(z.view()), &[7], row(c.view()), row(n.view()), Array2::zeros((1, 4)), &cfg)
            .unwrap();
        let pred = p.forward(z.view(), 7, c.view()).unwrap();
        let upstream = (&n - &pred) * -2.0;
        let g = p.backward(z.view(), 7, c.view(), upstream.view()).unwrap();
        let expected = g.condition_grad.mapv(|v| 0.025 * sign(-v));
        assert_eq!(delta.row(0), expected);
    }

    #[test]
    fn race_loss_at_zero_delta_is_erase_loss() {
        let s = DenoiserParams::init(3, &arch()).unwrap();
        let t = DenoiserParams::init(4, &arch()).unwrap();
        let z = array![0.2, 0.9];
        let c = t.concept(2);
        let a = race_loss(&s, &t, z.view(), 6, c.view(), Array1::zeros(4).view(), 1.0).unwrap();
        let b = erase_loss(&s, &t, z.view(), 6, c.view(), 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn reg_term_cases() {
        let a = arch();
        let mut s = DenoiserParams::init(0, &a).unwrap();
        let t = s.clone();
        assert_eq!(reg_term(&s, &t, 0.1).unwrap().0, 0.0);
        s.arrays = ParamArrays::zeros(&a);
        let mut t0 = s.clone();
        s.arrays.biases[0][0] = 1.0;
        s.arrays.biases[0][1] = -2.0;
        let (v, g) = reg_term(&s, &t0, 0.1).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(g.biases[0][0], 0.1);
        assert_eq!(g.biases[0][1], -0.1);
        assert_eq!(g.biases[0][2], 0.0);
        assert_eq!(reg_term(&s, &t0, 0.0).unwrap().0, 0.0);
        t0.arch.hidden = vec![3];
        assert!(reg_term(&s, &t0, 0.1).is_err());
    }

    #[test]
    fn keyword_expansion_rules() {
        let mut p = DenoiserParams::init(0, &arch()).unwrap();
        assert_eq!(expand_keywords(&p, 2, 0).unwrap().len(), 1);
        p.arrays.concept_embeddings = Array2::eye(4);
        let kw = expand_keywords(&p, 2, 1).unwrap();
        assert_eq!(kw.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![2, 0]);
        p.arrays.concept_embeddings = array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.1, 0.99, 0.0]
        ];
        let kw = expand_keywords(&p, 2, 2).unwrap();
        assert_eq!(kw.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![2, 3, 0]);
        assert!(expand_keywords(&p, 2, 4).is_err());
    }

    #[test]
    fn zero_lr_race_leaves_params() {
        let b = base();
        let cfg = RaceConfig {
            steps: 1,
            lr: 0.0,
            batch: 4,
            ..Default::default()
        };
        let (out, log) = run_race(&b, 0, &cfg, "x").unwrap();
        assert_eq!(out.params, b.params);
        assert_eq!(log.losses.len(), 1);
        assert_eq!(out.stage(), Stage::Race);
    }

    #[test]
    fn degenerate_race_matches_esd() {
        let b = base();
        let erase = EraseConfig {
            target: 1,
            steps: 6,
            batch: 4,
            lr: 1e-2,
            seed: 5,
            ..Default::default()
        };
        let race = RaceConfig {
            steps: 6,
            batch: 4,
            lr: 1e-2,
            seed: 5,
            attack: AttackConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (e, el) = run_esd(&b, &erase, "x").unwrap();
        let (r, rl) = run_race(&b, 1, &race, "x").unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&el.losses), bits(&rl.losses));
        assert_eq!(e.params, r.params);
    }

    #[test]
    fn zero_epsilon_eval_attack_equals_plain_sample() {
        let b = base();
        let s = b.schedule.build().unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let c = b.params.concept(0);
        let x = array![2.0, 0.0];
        for t_star in [1, 7, 20] {
            let a = eval_attack_on_example(&b.params, &s, x.view(), t_star, c.view(), 3.0, &cfg, 77).unwrap();
            let plain = sample(&b.params, &s, c.view(), 3.0, 77).unwrap();
            for k in 0..2 {
                assert!((a[k] - plain[k]).abs() < 1e-12, "t*={t_star}");
            }
        }
        let cfg = AttackConfig::default();
        let a = eval_attack_on_example(&b.params, &s, x.view(), 9, c.view(), 3.0, &cfg, 3).unwrap();
        let again = eval_attack_on_example(&b.params, &s, x.view(), 9, c.view(), 3.0, &cfg, 3).unwrap();
        assert_eq!(a, again);
    }
}
