//! Base-model training and ESD-style concept erasure.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::data::ConceptDataset;
use crate::diffusion::{denoise_to_each, forward_diffuse_batch, guided_predict_batch, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::model::{FineTuneScope, row, tile, AdamConfig, AdamState, Arch, DenoiserParams, NoisePredictor};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 128,
            lr: 1e-3,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(LabError::Config("train steps and batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(LabError::Config("p_uncond must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which network drives the sampler that produces training latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraseConfig {
    pub target: usize,
    pub eta: f64,
    pub steps: usize,
    pub lr: f64,
    /// Latents per optimizer step.
    pub batch: usize,
    /// Guidance scale of the sampler that produces `z_t`.
    pub guidance: f64,
    pub latent_source: LatentSource,
    pub scope: FineTuneScope,
    pub seed: u64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        EraseConfig {
            target: 0,
            eta: 1.0,
            steps: 2000,
            lr: 3e-5,
            batch: 16,
            guidance: 3.0,
            latent_source: LatentSource::Teacher,
            scope: FineTuneScope::All,
            seed: 0,
        }
    }
}

impl EraseConfig {
    pub fn validate(&self, arch: &Arch) -> Result<()> {
        if self.target >= arch.num_concepts {
            return Err(LabError::Config(format!("target concept {} out of range", self.target)));
        }
        if !self.eta.is_finite() || !self.lr.is_finite() || !self.guidance.is_finite() {
            return Err(LabError::Config("eta, lr and guidance must be finite".into()));
        }
        if self.batch == 0 {
            return Err(LabError::Config("erase batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// `‖n − Φ(forward_diffuse(z_0, t, n), t, cond)‖²`.
pub fn sd_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    z0: ArrayView1<f64>,
    t: usize,
    noise: ArrayView1<f64>,
    cond: ArrayView1<f64>,
) -> Result<f64> {
    let zt = forward_diffuse_batch(row(z0), &[t], row(noise), schedule)?;
    let pred = model.predict(zt.view(), &[t], row(cond))?;
    let r = &noise - &pred.row(0);
    Ok(r.dot(&r))
}

/// Batch mean of [`sd_loss`] and its gradient: parameters plus one
/// condition gradient per row.
pub fn sd_loss_grad(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    z0: ArrayView2<f64>,
    t: &[usize],
    noise: ArrayView2<f64>,
    cond: ArrayView2<f64>,
) -> Result<(f64, crate::model::BatchGradient)> {
    let zt = forward_diffuse_batch(z0, t, noise, schedule)?;
    let pred = params.forward_batch(zt.view(), t, cond)?;
    let resid = &pred - &noise;
    let b = z0.nrows() as f64;
    let loss = resid.iter().map(|v| v * v).sum::<f64>() / b;
    let upstream = resid * (2.0 / b);
    let grad = params.backward_batch(zt.view(), t, cond, upstream.view())?;
    Ok((loss, grad))
}

/// Train a fresh denoiser on `dataset` with condition dropout.
pub fn train_base(
    dataset: &ConceptDataset,
    schedule: &NoiseSchedule,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(LabError::Config("training dataset is empty".into()));
    }
    if dataset.concepts() != arch.num_concepts || dataset.dim() != arch.data_dim {
        return Err(LabError::Config("dataset does not match architecture".into()));
    }
    if schedule.steps() != arch.timesteps {
        return Err(LabError::Config("schedule length does not match architecture".into()));
    }
    let mut params = DenoiserParams::init(cfg.seed, arch)?;
    let mut adam = AdamState::new(arch);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let (b, d, m) = (cfg.batch, arch.data_dim, arch.embed_dim);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut r = rng::rng(cfg.seed, &[stream::BATCH, step as u64]);
        let mut z0 = Array2::zeros((b, d));
        let mut cond = Array2::zeros((b, m));
        let mut slot: Vec<Option<usize>> = Vec::with_capacity(b);
        let mut t = Vec::with_capacity(b);
        for i in 0..b {
            let idx = r.random_range(0..dataset.len());
            z0.row_mut(i).assign(&dataset.points.row(idx));
            t.push(r.random_range(1..=schedule.steps()));
            if r.random::<f64>() < cfg.p_uncond {
                cond.row_mut(i).assign(&params.arrays.null_embedding);
                slot.push(None);
            } else {
                let label = dataset.labels[idx];
                cond.row_mut(i).assign(&params.arrays.concept_embeddings.row(label));
                slot.push(Some(label));
            }
        }
        let noise = Array2::from_shape_vec((b, d), rng::normals(&mut r, b * d)).expect("sized");
        let (loss, grad) = sd_loss_grad(&params, schedule, z0.view(), &t, noise.view(), cond.view())?;
        if !loss.is_finite() {
            return Err(LabError::Divergence(format!("base loss is {loss} at step {step}")));
        }
        let mut pg = grad.params;
        for (i, s) in slot.iter().enumerate() {
            let g = grad.condition_grads.row(i);
            match s {
                Some(c) => {
                    let mut dst = pg.concept_embeddings.row_mut(*c);
                    dst += &g;
                }
                None => pg.null_embedding += &g,
            }
        }
        adam.apply(&mut params.arrays, &pg, &adam_cfg)?;
        log.losses.push(loss);
    }
    Ok((params, log))
}

/// `‖Φ_student(z, t, student_cond) − guided(teacher, z, t, teacher_cond, −η)‖²`
/// per row, plus the residuals. Shared by the plain and adversarial losses.
pub(crate) fn erasure_residual<S, T>(
    student: &S,
    teacher: &T,
    z: ArrayView2<f64>,
    t: &[usize],
    student_cond: ArrayView2<f64>,
    teacher_cond: ArrayView2<f64>,
    eta: f64,
) -> Result<(Array1<f64>, Array2<f64>)>
where
    S: NoisePredictor + ?Sized,
    T: NoisePredictor + ?Sized,
{
    if student.arch() != teacher.arch() {
        return Err(LabError::Config("student and teacher architectures differ".into()));
    }
    let target = guided_predict_batch(teacher, z, t, teacher_cond, -eta)?;
    let pred = student.predict(z, t, student_cond)?;
    let resid = pred - target;
    let losses = resid.map_axis(Axis(1), |r| r.dot(&r));
    Ok((losses, resid))
}

/// Erasure loss against a frozen teacher's negatively guided prediction.
pub fn erase_loss<S, T>(
    student: &S,
    teacher: &T,
    z: ArrayView1<f64>,
    t: usize,
    cond: ArrayView1<f64>,
    eta: f64,
) -> Result<f64>
where
    S: NoisePredictor + ?Sized,
    T: NoisePredictor + ?Sized,
{
    let (losses, _) = erasure_residual(student, teacher, row(z), &[t], row(cond), row(cond), eta)?;
    Ok(losses[0])
}

/// One batch of training latents for a fine-tuning step.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub t: Vec<usize>,
    pub noise: Array2<f64>,
    pub z_t: Array2<f64>,
}

/// Draw `n ∼ N(0, I)`, `t ∼ U(1, T)` per row and denoise `n` from `T` to
/// `t` with `source` conditioned on `cond`.
pub fn draw_latents(
    source: &DenoiserParams,
    schedule: &NoiseSchedule,
    cond: ArrayView1<f64>,
    guidance: f64,
    batch: usize,
    seed: u64,
    step: usize,
) -> Result<LatentBatch> {
    let d = source.arch.data_dim;
    let mut r = rng::rng(seed, &[stream::BATCH, step as u64]);
    let noise = Array2::from_shape_vec((batch, d), rng::normals(&mut r, batch * d)).expect("sized");
    let t: Vec<usize> = (0..batch).map(|_| r.random_range(1..=schedule.steps())).collect();
    let seeds: Vec<u64> = (0..batch as u64)
        .map(|i| rng::derive(seed, &[stream::CHAIN, step as u64, i]))
        .collect();
    let conds = tile(cond, batch);
    let z_t = denoise_to_each(source, schedule, noise.view(), &t, conds.view(), guidance, &seeds)?;
    Ok(LatentBatch { t, noise, z_t })
}

/// Fine-tune all network weights of `base` so that the target concept maps
/// to its negatively guided teacher prediction. The embedding table stays
/// frozen.
pub fn run_esd(base: &Checkpoint, cfg: &EraseConfig, config_digest: &str) -> Result<(Checkpoint, TrainLog)> {
    let teacher = &base.params;
    cfg.validate(&teacher.arch)?;
    let schedule = base.schedule.build()?;
    let mut student = teacher.clone();
    let mut adam = AdamState::new(&teacher.arch);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let c = teacher.concept(cfg.target);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let source = match cfg.latent_source {
            LatentSource::Teacher => teacher,
            LatentSource::Student => &student,
        };
        let batch = draw_latents(source, &schedule, c.view(), cfg.guidance, cfg.batch, cfg.seed, step)?;
        let conds = tile(c.view(), cfg.batch);
        let (loss, mut grad) = erase_step_grad(&student, teacher, &batch, conds.view(), conds.view(), cfg.eta)?;
        grad.restrict(cfg.scope, &teacher.arch);
        adam.apply(&mut student.arrays, &grad, &adam_cfg)?;
        log.losses.push(loss);
    }
    let ck = base.derive(student, Stage::Esd, config_digest)?;
    Ok((ck, log))
}

/// Mean erasure loss over the batch and its parameter gradient.
pub(crate) fn erase_step_grad(
    student: &DenoiserParams,
    teacher: &DenoiserParams,
    batch: &LatentBatch,
    student_cond: ArrayView2<f64>,
    teacher_cond: ArrayView2<f64>,
    eta: f64,
) -> Result<(f64, crate::model::ParamArrays)> {
    let (losses, resid) = erasure_residual(
        student,
        teacher,
        batch.z_t.view(),
        &batch.t,
        student_cond,
        teacher_cond,
        eta,
    )?;
    let b = losses.len() as f64;
    let loss = losses.sum() / b;
    if !loss.is_finite() {
        return Err(LabError::Divergence(format!("erasure loss is {loss}")));
    }
    let upstream = resid * (2.0 / b);
    let grad = student.backward_batch(batch.z_t.view(), &batch.t, student_cond, upstream.view())?;
    Ok((loss, grad.params))
}
