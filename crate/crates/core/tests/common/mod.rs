#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use race_lab::model::{Activation, Arch, DenoiserParams};

/// A small random architecture with random (non-zero) biases.
pub fn random_model(seed: u64) -> DenoiserParams {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let depth = r.random_range(1..=3);
    let arch = Arch {
        data_dim: r.random_range(1..=3),
        embed_dim: r.random_range(1..=4),
        time_dim: 2 * r.random_range(1..=3),
        hidden: (0..depth).map(|_| r.random_range(2..=10)).collect(),
        activation: if r.random::<bool>() { Activation::Silu } else { Activation::Tanh },
        num_concepts: r.random_range(2..=3),
        timesteps: r.random_range(10..=100),
    };
    let mut p = DenoiserParams::init(seed, &arch).unwrap();
    for b in &mut p.arrays.biases {
        b.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    p
}

fn symmetric(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| scale * r.random_range(-1.0..1.0)))
}

/// Analytic versus central-difference gradients of `<forward(z, t, c), u>`
/// with step `h`, over every weight, bias and condition coordinate.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// Worst `|a - n| / max(|a|, |n|)` over arrays, parameters only.
    pub params: f64,
    /// Same for the condition gradient.
    pub condition: f64,
    /// Worst single-entry relative error (entries below 1e-6 use 1e-6).
    pub entrywise: f64,
}

fn norm_rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn entry_rel(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn gradient_check(seed: u64, h: f64) -> GradCheck {
    let p = random_model(seed);
    let a = p.arch.clone();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let z = symmetric(&mut r, a.data_dim, 2.0);
    let c = symmetric(&mut r, a.embed_dim, 1.0);
    let u = symmetric(&mut r, a.data_dim, 1.0);
    let t = r.random_range(1..=a.timesteps);
    let g = p.backward(z.view(), t, c.view(), u.view()).unwrap();
    let loss = |q: &DenoiserParams, cond: &Array1<f64>| q.forward(z.view(), t, cond.view()).unwrap().dot(&u);
    let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);

    let mut out = GradCheck::default();
    let mut compare = |analytic: &[f64], numeric: &[f64], is_cond: bool| {
        let e = norm_rel(analytic, numeric);
        if is_cond {
            out.condition = out.condition.max(e);
        } else {
            out.params = out.params.max(e);
        }
        out.entrywise = out.entrywise.max(entry_rel(analytic, numeric));
    };
    for l in 0..a.layer_count() {
        let (rows, cols) = p.arrays.weights[l].dim();
        let mut num = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                num.push(central(&|d| {
                    let mut q = p.clone();
                    q.arrays.weights[l][[i, j]] += d;
                    loss(&q, &c)
                }));
            }
        }
        compare(g.params.weights[l].as_slice().unwrap(), &num, false);
        let num: Vec<f64> = (0..cols)
            .map(|i| {
                central(&|d| {
                    let mut q = p.clone();
                    q.arrays.biases[l][i] += d;
                    loss(&q, &c)
                })
            })
            .collect();
        compare(g.params.biases[l].as_slice().unwrap(), &num, false);
    }
    let num: Vec<f64> = (0..a.embed_dim)
        .map(|k| {
            central(&|d| {
                let mut cp = c.clone();
                cp[k] += d;
                loss(&p, &cp)
            })
        })
        .collect();
    compare(g.condition_grad.as_slice().unwrap(), &num, true);
    out
}

/// Sample mean and variance of each column.
pub fn column_moments(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(ndarray::Axis(0)) / n;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(ndarray::Axis(0)) / (n - 1.0);
    (mean, var)
}
