//! Conditional noise-prediction network.
//!
//! The denoiser is a plain MLP over `[z_t ‖ time features ‖ cond]` with smooth
//! activations. Forward and backward passes are written out by hand over
//! row-major batches so that gradients with respect to both the weights and
//! the condition vector are exact.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LabError, Result};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(LabError::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture descriptor. Everything needed to rebuild a network of the
/// same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub num_concepts: usize,
    /// Number of diffusion steps the time features are normalised by.
    pub timesteps: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            data_dim: 2,
            embed_dim: 8,
            time_dim: 16,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            num_concepts: 4,
            timesteps: 100,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(LabError::Config(msg.to_string()));
        if self.data_dim == 0 || self.embed_dim == 0 {
            return err("data and embedding dims must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return err("time feature dim must be positive and even");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden widths must be positive and non-empty");
        }
        if self.num_concepts < 2 {
            return err("at least two concepts are required");
        }
        if self.timesteps < 2 {
            return err("timesteps must be at least 2");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.embed_dim
    }

    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` for each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        let dense: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        dense + (self.num_concepts + 1) * self.embed_dim
    }
}

/// Sinusoidal features of `t / T` with geometric frequencies from 1 to `T/2`.
pub fn time_features(t: usize, timesteps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = t as f64 / timesteps as f64;
    let top = timesteps as f64 / 2.0;
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            top.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (freq(k) * tau).sin()));
    out.extend((0..half).map(|k| (freq(k) * tau).cos()));
    out
}

/// Named arrays sharing the denoiser's parameter layout. Used for the
/// parameters themselves, their gradients, and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArrays {
    /// `fan_in × fan_out` per layer.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// `K × m`; row `i` is the embedding of concept `i`.
    pub concept_embeddings: Array2<f64>,
    pub null_embedding: Array1<f64>,
}

impl ParamArrays {
    pub fn zeros(arch: &Arch) -> Self {
        let dims = arch.layer_dims();
        ParamArrays {
            weights: dims.iter().map(|&(i, o)| Array2::zeros((i, o))).collect(),
            biases: dims.iter().map(|&(_, o)| Array1::zeros(o)).collect(),
            concept_embeddings: Array2::zeros((arch.num_concepts, arch.embed_dim)),
            null_embedding: Array1::zeros(arch.embed_dim),
        }
    }

    /// `(name, shape, values)` for every array, in canonical order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{l}.weight"), w.shape().to_vec(), slice(w.as_slice())));
            out.push((format!("layer{l}.bias"), b.shape().to_vec(), slice(b.as_slice())));
        }
        out.push((
            "concept_embeddings".to_string(),
            self.concept_embeddings.shape().to_vec(),
            slice(self.concept_embeddings.as_slice()),
        ));
        out.push((
            "null_embedding".to_string(),
            self.null_embedding.shape().to_vec(),
            slice(self.null_embedding.as_slice()),
        ));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.concept_embeddings.as_slice_mut().expect("standard layout"));
        out.push(self.null_embedding.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.named().into_iter().map(|(_, shape, _)| shape).collect()
    }

    pub fn same_shape(&self, other: &ParamArrays) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamArrays, scale: f64) {
        let theirs: Vec<&[f64]> = other.named().into_iter().map(|(_, _, v)| v).collect();
        for (mine, theirs) in self.slices_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += scale * b;
            }
        }
    }

    pub fn zero_embeddings(&mut self) {
        self.concept_embeddings.fill(0.0);
        self.null_embedding.fill(0.0);
    }

    /// Zero every gradient entry outside `scope`. Embeddings are always frozen.
    pub fn restrict(&mut self, scope: FineTuneScope, arch: &Arch) {
        self.zero_embeddings();
        if scope == FineTuneScope::Condition {
            let first = arch.data_dim + arch.time_dim;
            self.weights[0].slice_mut(s![..first, ..]).fill(0.0);
            for w in &mut self.weights[1..] {
                w.fill(0.0);
            }
            for b in &mut self.biases {
                b.fill(0.0);
            }
        }
    }
}

/// Which network parameters a fine-tuning run may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneScope {
    /// Every weight and bias.
    #[default]
    All,
    /// Only the first-layer weights that read the condition vector.
    Condition,
}

fn slice<'a>(s: Option<&'a [f64]>) -> &'a [f64] {
    s.expect("parameter arrays are kept in standard layout")
}

/// Learnable state of the denoiser plus its concept-embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub arrays: ParamArrays,
}

/// Parameter gradient plus the gradient with respect to the condition.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub params: ParamArrays,
    pub condition_grad: Array1<f64>,
}

/// Batched variant: parameter gradient summed over rows, one condition
/// gradient per row.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub params: ParamArrays,
    pub condition_grads: Array2<f64>,
}

/// Anything that predicts noise for a batch of latents.
pub trait NoisePredictor {
    fn arch(&self) -> &Arch;

    /// Predicted noise, one row per input row. `t[i]` is the timestep of row `i`.
    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn null_embedding(&self) -> ArrayView1<'_, f64>;

    fn concept_embedding(&self, id: usize) -> ArrayView1<'_, f64>;
}

struct Cache {
    /// Inputs to each layer (`h_0 = x`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl DenoiserParams {
    /// Glorot-uniform weights, zero biases, `0.1 · N(0, 1)` embeddings.
    pub fn init(seed: u64, arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::rng(seed, &[stream::INIT]);
        let mut arrays = ParamArrays::zeros(arch);
        for w in arrays.weights.iter_mut() {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        let k = arch.num_concepts * arch.embed_dim;
        let table = rng::normals(&mut rng, k);
        arrays.concept_embeddings =
            Array2::from_shape_vec((arch.num_concepts, arch.embed_dim), table)
                .expect("shape matches")
                * 0.1;
        arrays.null_embedding = Array1::from(rng::normals(&mut rng, arch.embed_dim)) * 0.1;
        Ok(DenoiserParams {
            arch: arch.clone(),
            arrays,
        })
    }

    pub fn from_arrays(arch: Arch, arrays: ParamArrays) -> Result<Self> {
        arch.validate()?;
        if !arrays.same_shape(&ParamArrays::zeros(&arch)) {
            return Err(LabError::Config("parameter arrays do not match arch".into()));
        }
        if !arrays.all_finite() {
            return Err(LabError::Config("parameter arrays contain non-finite values".into()));
        }
        Ok(DenoiserParams { arch, arrays })
    }

    pub fn concept(&self, id: usize) -> Array1<f64> {
        self.arrays.concept_embeddings.row(id).to_owned()
    }

    pub fn null(&self) -> Array1<f64> {
        self.arrays.null_embedding.clone()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.arch.timesteps {
            Err(LabError::Timestep {
                t,
                max: self.arch.timesteps,
            })
        } else {
            Ok(())
        }
    }

    fn assemble_input(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let a = &self.arch;
        let rows = z.nrows();
        check_len("latent width", a.data_dim, z.ncols())?;
        check_len("condition width", a.embed_dim, cond.ncols())?;
        check_len("condition rows", rows, cond.nrows())?;
        check_len("timestep count", rows, t.len())?;
        let mut time = Array2::zeros((rows, a.time_dim));
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let feats = time_features(ti, a.timesteps, a.time_dim);
            time.row_mut(i).assign(&ArrayView1::from(&feats[..]));
        }
        Ok(concatenate(Axis(1), &[z, time.view(), cond]).expect("row counts match"))
    }

    fn run(&self, x: Array2<f64>) -> Cache {
        let act = self.arch.activation;
        let layers = self.arrays.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut h = x;
        for (l, (w, b)) in self.arrays.weights.iter().zip(&self.arrays.biases).enumerate() {
            let a = h.dot(w) + b;
            inputs.push(h);
            if l + 1 == layers {
                return Cache {
                    inputs,
                    pre,
                    output: a,
                };
            }
            h = a.mapv(|v| act.apply(v));
            pre.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// Predicted noise for a batch.
    pub fn forward_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.assemble_input(z, t, cond)?;
        Ok(self.run(x).output)
    }

    pub fn forward(&self, z: ArrayView1<f64>, t: usize, cond: ArrayView1<f64>) -> Result<Array1<f64>> {
        let out = self.forward_batch(row(z), &[t], row(cond))?;
        Ok(out.row(0).to_owned())
    }

    /// Back-propagate `upstream` through the layers. Returns the gradient
    /// with respect to the network input and, when requested, the weights.
    fn propagate(&self, cache: &Cache, upstream: ArrayView2<f64>, want_params: bool) -> (Array2<f64>, Option<ParamArrays>) {
        let act = self.arch.activation;
        let mut grads = want_params.then(|| ParamArrays::zeros(&self.arch));
        let mut g = upstream.to_owned();
        for l in (0..self.arrays.weights.len()).rev() {
            if let Some(grads) = grads.as_mut() {
                grads.weights[l] = standard(cache.inputs[l].t().dot(&g));
                grads.biases[l] = g.sum_axis(Axis(0));
            }
            let gh = g.dot(&self.arrays.weights[l].t());
            if l == 0 {
                return (gh, grads);
            }
            let mut ga = gh;
            Zip::from(&mut ga)
                .and(&cache.pre[l - 1])
                .for_each(|g, &a| *g *= act.derivative(a));
            g = ga;
        }
        unreachable!("network has at least one layer")
    }

    /// Exact gradients of `Σ_rows ⟨forward(row), upstream(row)⟩`.
    pub fn backward_batch(
        &self,
        z: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<BatchGradient> {
        let x = self.assemble_input(z, t, cond)?;
        check_len("upstream rows", x.nrows(), upstream.nrows())?;
        check_len("upstream width", self.arch.data_dim, upstream.ncols())?;
        let cache = self.run(x);
        let (gx, params) = self.propagate(&cache, upstream, true);
        Ok(BatchGradient {
            params: params.expect("requested"),
            condition_grads: self.cond_columns(gx),
        })
    }

    pub fn backward(
        &self,
        z: ArrayView1<f64>,
        t: usize,
        cond: ArrayView1<f64>,
        upstream: ArrayView1<f64>,
    ) -> Result<GradientBundle> {
        let g = self.backward_batch(row(z), &[t], row(cond), row(upstream))?;
        Ok(GradientBundle {
            params: g.params,
            condition_grad: g.condition_grads.row(0).to_owned(),
        })
    }

    /// Squared-error loss `‖target − forward‖²` per row together with its
    /// gradient with respect to the condition only. Skips weight gradients.
    pub fn condition_loss_grad(
        &self,
        z: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        target: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = self.assemble_input(z, t, cond)?;
        check_len("target rows", x.nrows(), target.nrows())?;
        let cache = self.run(x);
        let residual = &target - &cache.output;
        let losses = residual.map_axis(Axis(1), |r| r.dot(&r));
        let upstream = residual * -2.0;
        let (gx, _) = self.propagate(&cache, upstream.view(), false);
        Ok((losses, self.cond_columns(gx)))
    }

    fn cond_columns(&self, gx: Array2<f64>) -> Array2<f64> {
        let start = self.arch.data_dim + self.arch.time_dim;
        gx.slice(s![.., start..]).to_owned()
    }
}

impl NoisePredictor for DenoiserParams {
    fn arch(&self) -> &Arch {
        &self.arch
    }

    fn predict(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_batch(z, t, cond)
    }

    fn null_embedding(&self) -> ArrayView1<'_, f64> {
        self.arrays.null_embedding.view()
    }

    fn concept_embedding(&self, id: usize) -> ArrayView1<'_, f64> {
        self.arrays.concept_embeddings.row(id)
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn row(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

/// Repeat a vector into `rows` identical rows.
pub fn tile(v: ArrayView1<f64>, rows: usize) -> Array2<f64> {
    v.broadcast((rows, v.len())).expect("broadcastable").to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a flat slice. `step` is 1-based.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamArrays,
    pub v: ParamArrays,
    pub step: u64,
}

impl AdamState {
    pub fn new(arch: &Arch) -> Self {
        AdamState {
            m: ParamArrays::zeros(arch),
            v: ParamArrays::zeros(arch),
            step: 0,
        }
    }

    /// In-place update used by the trainers.
    pub fn apply(&mut self, params: &mut ParamArrays, grad: &ParamArrays, cfg: &AdamConfig) -> Result<()> {
        if !self.m.same_shape(params) || !grad.same_shape(params) {
            return Err(LabError::Config("optimizer state does not match parameters".into()));
        }
        if let Some((name, _, values)) = grad
            .named()
            .into_iter()
            .find(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
        {
            let bad = values.iter().position(|x| !x.is_finite()).unwrap_or(0);
            return Err(LabError::Divergence(format!(
                "non-finite gradient in `{name}`[{bad}] at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let grads: Vec<&[f64]> = grad.named().into_iter().map(|(_, _, v)| v).collect();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in params.slices_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            adam_update(p, g, m, v, self.step, cfg);
        }
        Ok(())
    }
}

/// Pure Adam step: returns updated parameters and optimizer state.
pub fn adam_step(
    params: &DenoiserParams,
    grad: &GradientBundle,
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(DenoiserParams, AdamState)> {
    let mut next = params.clone();
    let mut state = state.clone();
    state.apply(&mut next.arrays, &grad.params, cfg)?;
    Ok((next, state))
}
