//! DDPM forward process, classifier-free guidance, and ancestral sampling.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy state and `t = T` the
//! most. `alpha_bar(0)` is defined as 1.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LabError, Result};
use crate::model::{row, tile, NoisePredictor};
use crate::rng::{self, stream};

/// Parameters that rebuild a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_min` to `beta_max` over `steps` timesteps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(LabError::Config("schedule needs at least 2 steps".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(LabError::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            spec: ScheduleSpec {
                steps,
                beta_min,
                beta_max,
            },
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(LabError::Timestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior standard deviation of the ancestral step out of `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        let var = self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t));
        var.sqrt()
    }
}

/// `sqrt(ᾱ_t)·z_0 + sqrt(1 − ᾱ_t)·n`.
pub fn forward_diffuse(
    z0: ArrayView1<f64>,
    t: usize,
    noise: ArrayView1<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    schedule.check(t)?;
    check_len("noise length", z0.len(), noise.len())?;
    let ab = schedule.alpha_bar(t);
    Ok(&z0 * ab.sqrt() + &noise * (1.0 - ab).sqrt())
}

/// Row-wise [`forward_diffuse`] with per-row timesteps.
pub fn forward_diffuse_batch(
    z0: ArrayView2<f64>,
    t: &[usize],
    noise: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_len("timestep count", z0.nrows(), t.len())?;
    check_len("noise rows", z0.nrows(), noise.nrows())?;
    let mut out = Array2::zeros(z0.raw_dim());
    for (i, &ti) in t.iter().enumerate() {
        out.row_mut(i)
            .assign(&forward_diffuse(z0.row(i), ti, noise.row(i), schedule)?);
    }
    Ok(out)
}

/// `(1 − g)·u + g·e_c` where `u` uses the null embedding. Equal to
/// `u + g(e_c − u)`; written this way so `g = 0` and `g = 1` are exact.
pub fn guided_predict_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    z: ArrayView2<f64>,
    t: &[usize],
    cond: ArrayView2<f64>,
    g: f64,
) -> Result<Array2<f64>> {
    let rows = z.nrows();
    let null = tile(model.null_embedding(), rows);
    let zz = ndarray::concatenate(Axis(0), &[z, z]).expect("same width");
    let cc = ndarray::concatenate(Axis(0), &[cond, null.view()])
        .map_err(|_| LabError::Shape {
            what: "condition width",
            expected: model.arch().embed_dim,
            got: cond.ncols(),
        })?;
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let both = model.predict(zz.view(), &tt, cc.view())?;
    let e = both.slice(ndarray::s![..rows, ..]);
    let u = both.slice(ndarray::s![rows.., ..]);
    Ok(&u * (1.0 - g) + &e * g)
}

pub fn guided_predict<P: NoisePredictor + ?Sized>(
    model: &P,
    z: ArrayView1<f64>,
    t: usize,
    cond: ArrayView1<f64>,
    g: f64,
) -> Result<Array1<f64>> {
    Ok(guided_predict_batch(model, row(z), &[t], row(cond), g)?
        .row(0)
        .to_owned())
}

/// One ancestral DDPM step from `t` to `t − 1` for a batch sharing `t`.
/// Row `i` of `noise` is the step noise of chain `i`; ignored at `t = 1`.
pub fn denoise_step_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    z: ArrayView2<f64>,
    t: usize,
    cond: ArrayView2<f64>,
    g: f64,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    schedule.check(t)?;
    let ts = vec![t; z.nrows()];
    let eps = guided_predict_batch(model, z, &ts, cond, g)?;
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut next = (&z - &(eps * coef)) / schedule.alpha(t).sqrt();
    if t > 1 {
        next.scaled_add(schedule.sigma(t), &noise);
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Divergence(format!("non-finite latent at t={t}")));
    }
    Ok(next)
}

pub fn denoise_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    z: ArrayView1<f64>,
    t: usize,
    cond: ArrayView1<f64>,
    g: f64,
    noise: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    Ok(denoise_step_batch(model, schedule, row(z), t, row(cond), g, row(noise))?
        .row(0)
        .to_owned())
}

/// Step noise of one chain at timestep `t`; depends only on `(seed, t)`.
pub fn step_noise(seed: u64, t: usize, dim: usize) -> Array1<f64> {
    let mut r = rng::rng(seed, &[stream::STEP_NOISE, t as u64]);
    Array1::from(rng::normals(&mut r, dim))
}

/// Initial `N(0, I)` latent of a chain.
pub fn start_noise(seed: u64, dim: usize) -> Array1<f64> {
    let mut r = rng::rng(seed, &[stream::START_NOISE]);
    Array1::from(rng::normals(&mut r, dim))
}

/// Run chains from the state at `t_from` down to the state at `t_to`
/// (`t_to < t_from` applies steps `t_from, …, t_to + 1`). Each row has its
/// own chain seed.
#[allow(clippy::too_many_arguments)]
pub fn denoise_range_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    start: ArrayView2<f64>,
    t_from: usize,
    t_to: usize,
    cond: ArrayView2<f64>,
    g: f64,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    if t_from > schedule.steps() || t_to > t_from {
        return Err(LabError::Timestep {
            t: t_to,
            max: t_from,
        });
    }
    check_len("chain seeds", start.nrows(), seeds.len())?;
    let d = start.ncols();
    let mut z = start.to_owned();
    let mut noise = Array2::zeros((start.nrows(), d));
    for t in (t_to + 1..=t_from).rev() {
        if t > 1 {
            for (i, &s) in seeds.iter().enumerate() {
                noise.row_mut(i).assign(&step_noise(s, t, d));
            }
        }
        z = denoise_step_batch(model, schedule, z.view(), t, cond, g, noise.view())?;
    }
    Ok(z)
}

/// Denoise from the state at `T` down to `t_stop`, each row with its own
/// seed and (possibly different) condition.
pub fn denoise_to_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    start: ArrayView2<f64>,
    t_stop: usize,
    cond: ArrayView2<f64>,
    g: f64,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    schedule.check(t_stop)?;
    denoise_range_batch(model, schedule, start, schedule.steps(), t_stop, cond, g, seeds)
}

#[allow(clippy::too_many_arguments)]
pub fn denoise_to<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    start: ArrayView1<f64>,
    t_stop: usize,
    cond: ArrayView1<f64>,
    g: f64,
    seed: u64,
) -> Result<Array1<f64>> {
    Ok(denoise_to_batch(model, schedule, row(start), t_stop, row(cond), g, &[seed])?
        .row(0)
        .to_owned())
}

/// Like [`denoise_to_batch`] but every row stops at its own timestep.
pub fn denoise_to_each<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    start: ArrayView2<f64>,
    t_stops: &[usize],
    cond: ArrayView2<f64>,
    g: f64,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    check_len("stop count", start.nrows(), t_stops.len())?;
    check_len("chain seeds", start.nrows(), seeds.len())?;
    for &t in t_stops {
        schedule.check(t)?;
    }
    let d = start.ncols();
    let mut z = start.to_owned();
    let lowest = t_stops.iter().copied().min().unwrap_or(schedule.steps());
    for t in (lowest + 1..=schedule.steps()).rev() {
        let active: Vec<usize> = (0..t_stops.len()).filter(|&i| t_stops[i] < t).collect();
        let zs = z.select(Axis(0), &active);
        let cs = cond.select(Axis(0), &active);
        let mut noise = Array2::zeros((active.len(), d));
        if t > 1 {
            for (r, &i) in active.iter().enumerate() {
                noise.row_mut(r).assign(&step_noise(seeds[i], t, d));
            }
        }
        let next = denoise_step_batch(model, schedule, zs.view(), t, cs.view(), g, noise.view())?;
        for (r, &i) in active.iter().enumerate() {
            z.row_mut(i).assign(&next.row(r));
        }
    }
    Ok(z)
}

/// Full ancestral sampling for a batch of chains; one seed per chain.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: ArrayView2<f64>,
    g: f64,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    let d = model.arch().data_dim;
    let mut start = Array2::zeros((seeds.len(), d));
    for (i, &s) in seeds.iter().enumerate() {
        start.row_mut(i).assign(&start_noise(s, d));
    }
    denoise_range_batch(model, schedule, start.view(), schedule.steps(), 0, cond, g, seeds)
}

pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: ArrayView1<f64>,
    g: f64,
    seed: u64,
) -> Result<Array1<f64>> {
    Ok(sample_batch(model, schedule, row(cond), g, &[seed])?
        .row(0)
        .to_owned())
}

/// Per-chain seeds `derive(seed, [CHAIN, i])` for `count` chains.
pub fn chain_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| rng::derive(seed, &[stream::CHAIN, i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, DenoiserParams, ParamArrays};
    use ndarray::array;

    fn tiny() -> (DenoiserParams, NoiseSchedule) {
        let arch = Arch {
            data_dim: 2,
            embed_dim: 3,
            time_dim: 4,
            hidden: vec![8, 8],
            activation: crate::model::Activation::Silu,
            num_concepts: 2,
            timesteps: 20,
        };
        let p = DenoiserParams::init(5, &arch).unwrap();
        (p, NoiseSchedule::linear(20, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn two_step_constant_schedule() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn ddpm_range_terminal_alpha_bar() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let direct: f64 = (0..100)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0))
            .product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 0.4);
    }

    #[test]
    fn default_schedule_reaches_near_pure_noise() {
        // exp(-sum beta) bounds the product from above
        let s = ScheduleSpec::default().build().unwrap();
        let sum: f64 = (0..100).map(|i| 1e-4 + (0.2 - 1e-4) * i as f64 / 99.0).sum();
        assert!(s.alpha_bar(100) < (-sum).exp());
        assert!(s.alpha_bar(100) < 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_without_noise_scales() {
        let s = ScheduleSpec::default().build().unwrap();
        let z0 = array![1.0, -2.0];
        let out = forward_diffuse(z0.view(), 40, array![0.0, 0.0].view(), &s).unwrap();
        assert_eq!(out, &z0 * s.alpha_bar(40).sqrt());
        assert!(forward_diffuse(z0.view(), 0, z0.view(), &s).is_err());
        assert!(forward_diffuse(z0.view(), 101, z0.view(), &s).is_err());
    }

    #[test]
    fn diffuse_at_first_step_with_tiny_beta_is_near_identity() {
        let s = NoiseSchedule::linear(100, 1e-8, 0.02).unwrap();
        let z0 = array![0.7, -0.3];
        let out = forward_diffuse(z0.view(), 1, array![1.0, -1.0].view(), &s).unwrap();
        assert!((&out - &z0).iter().all(|d| d.abs() < 1e-3));
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let (p, _) = tiny();
        let z = array![0.3, -0.2];
        let c = p.concept(1);
        let u = p.forward(z.view(), 7, p.null().view()).unwrap();
        let e = p.forward(z.view(), 7, c.view()).unwrap();
        assert_eq!(guided_predict(&p, z.view(), 7, c.view(), 0.0).unwrap(), u);
        assert_eq!(guided_predict(&p, z.view(), 7, c.view(), 1.0).unwrap(), e);
        let neg = guided_predict(&p, z.view(), 7, c.view(), -1.0).unwrap();
        assert_eq!(neg, &u * 2.0 - &e);
    }

    #[test]
    fn last_step_is_deterministic() {
        let (p, s) = tiny();
        let z = array![0.1, 0.2];
        let c = p.concept(0);
        let a = denoise_step(&p, &s, z.view(), 1, c.view(), 3.0, array![5.0, 5.0].view()).unwrap();
        let b = denoise_step(&p, &s, z.view(), 1, c.view(), 3.0, array![-5.0, 0.0].view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_model_at_origin_has_zero_mean() {
        let (mut p, s) = tiny();
        p.arrays = ParamArrays::zeros(&p.arch);
        let out = denoise_step(&p, &s, array![0.0, 0.0].view(), 5, p.null().view(), 2.0, array![0.0, 0.0].view())
            .unwrap();
        assert_eq!(out, array![0.0, 0.0]);
    }

    #[test]
    fn denoise_to_top_is_identity_and_split_composes() {
        let (p, s) = tiny();
        let start = start_noise(11, 2);
        let c = p.concept(1);
        let same = denoise_to(&p, &s, start.view(), 20, c.view(), 2.0, 11).unwrap();
        assert_eq!(same, start);

        let mid = denoise_to(&p, &s, start.view(), 8, c.view(), 2.0, 11).unwrap();
        let rest = denoise_range_batch(&p, &s, row(mid.view()), 8, 1, row(c.view()), 2.0, &[11]).unwrap();
        let one_shot = denoise_to(&p, &s, start.view(), 1, c.view(), 2.0, 11).unwrap();
        assert_eq!(rest.row(0), one_shot);

        let last = denoise_range_batch(&p, &s, row(one_shot.view()), 1, 0, row(c.view()), 2.0, &[11]).unwrap();
        let full = sample(&p, &s, c.view(), 2.0, 11).unwrap();
        assert_eq!(last.row(0), full);
    }

    #[test]
    fn per_row_stops_match_single_chains() {
        let (p, s) = tiny();
        let c = p.concept(1);
        let stops = [20, 3, 11];
        let seeds = [4, 5, 6];
        let mut start = Array2::zeros((3, 2));
        for (i, &seed) in seeds.iter().enumerate() {
            start.row_mut(i).assign(&start_noise(seed, 2));
        }
        let cond = tile(c.view(), 3);
        let out = denoise_to_each(&p, &s, start.view(), &stops, cond.view(), 2.0, &seeds).unwrap();
        for i in 0..3 {
            let one = denoise_to(&p, &s, start.row(i), stops[i], c.view(), 2.0, seeds[i]).unwrap();
            for k in 0..2 {
                assert!((out[[i, k]] - one[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let (p, s) = tiny();
        let c = p.concept(0);
        let a = sample(&p, &s, c.view(), 3.0, 1).unwrap();
        assert_eq!(a, sample(&p, &s, c.view(), 3.0, 1).unwrap());
        assert_ne!(a, sample(&p, &s, c.view(), 3.0, 2).unwrap());
    }

    #[test]
    fn batch_and_single_agree() {
        let (p, s) = tiny();
        let seeds = chain_seeds(3, 4);
        let cond = tile(p.concept(0).view(), 4);
        let batch = sample_batch(&p, &s, cond.view(), 2.0, &seeds).unwrap();
        for (i, &seed) in seeds.iter().enumerate() {
            let one = sample(&p, &s, p.concept(0).view(), 2.0, seed).unwrap();
            for k in 0..2 {
                assert!((batch[[i, k]] - one[k]).abs() < 1e-12);
            }
        }
    }
}
