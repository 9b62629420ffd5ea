//! Synthetic concept datasets and the nearest-center oracle judge.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub concepts: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub radius: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            concepts: 4,
            per_class: 2000,
            sigma: 0.15,
            radius: 2.0,
            dim: 2,
            seed: 0,
        }
    }
}

/// Outcome of the oracle judge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Concept(usize),
    Reject,
}

impl Verdict {
    pub fn is(self, id: usize) -> bool {
        self == Verdict::Concept(id)
    }
}

/// Labels a generated point. The dataset itself is the default judge.
pub trait Judge {
    fn judge(&self, x: ArrayView1<f64>) -> Verdict;
}

/// Gaussian clusters with centers evenly spaced on a circle.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub spec: DatasetSpec,
    /// `K × d`.
    pub centers: Array2<f64>,
    /// `N × d`.
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
}

impl ConceptDataset {
    pub fn generate(spec: DatasetSpec) -> Result<Self> {
        let DatasetSpec {
            concepts: k,
            per_class,
            sigma,
            radius,
            dim,
            seed,
        } = spec;
        if k < 2 {
            return Err(LabError::Config("need at least two concepts".into()));
        }
        if dim < 2 {
            return Err(LabError::Config("centers live on a circle; dim must be >= 2".into()));
        }
        if !(sigma > 0.0 && radius > 0.0) {
            return Err(LabError::Config("sigma and radius must be positive".into()));
        }
        let arc_bound = 6.0 * sigma * k as f64 / (2.0 * std::f64::consts::PI);
        if radius < arc_bound {
            return Err(LabError::Config(format!(
                "radius {radius} below separability bound {arc_bound:.4}"
            )));
        }
        let mut centers = Array2::zeros((k, dim));
        for i in 0..k {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            centers[[i, 0]] = radius * angle.cos();
            centers[[i, 1]] = radius * angle.sin();
        }
        let chord = 2.0 * radius * (std::f64::consts::PI / k as f64).sin();
        if chord < 6.0 * sigma {
            return Err(LabError::Config(format!(
                "adjacent centers {chord:.4} apart, need at least 6 sigma = {:.4}",
                6.0 * sigma
            )));
        }
        let mut r = rng::rng(seed, &[stream::DATA]);
        let n = k * per_class;
        let mut points = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for c in 0..k {
            for j in 0..per_class {
                let noise = rng::normals(&mut r, dim);
                let idx = c * per_class + j;
                for a in 0..dim {
                    points[[idx, a]] = centers[[c, a]] + sigma * noise[a];
                }
                labels.push(c);
            }
        }
        Ok(ConceptDataset {
            spec,
            centers,
            points,
            labels,
        })
    }

    pub fn concepts(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same centers, fresh samples drawn with a different seed.
    pub fn held_out(&self, per_class: usize) -> Result<Self> {
        ConceptDataset::generate(DatasetSpec {
            per_class,
            seed: rng::derive(self.spec.seed, &[stream::DATA, 1]),
            ..self.spec
        })
    }

    /// Rows belonging to concept `id`.
    pub fn concept_points(&self, id: usize) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == id).collect();
        self.points.select(ndarray::Axis(0), &rows)
    }

    /// Nearest center if within `3σ`, otherwise reject. Ties go to the lower id.
    pub fn oracle_classify(&self, x: ArrayView1<f64>) -> Verdict {
        let limit = 3.0 * self.spec.sigma;
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.centers.rows().into_iter().enumerate() {
            let d = (&c - &x).mapv(|v| v * v).sum().sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d <= limit => Verdict::Concept(i),
            _ => Verdict::Reject,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let cols: Vec<String> = (0..self.dim()).map(|a| format!("x{a}")).collect();
        let _ = writeln!(out, "{},concept_id", cols.join(","));
        for (p, l) in self.points.rows().into_iter().zip(&self.labels) {
            let coords: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{},{l}", coords.join(","));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Load points and labels from CSV. Centers and spread come from `spec`,
    /// which must describe the same geometry.
    pub fn load_csv(path: &Path, spec: DatasetSpec) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (points, labels) = parse_points(&text, spec.dim)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= spec.concepts) {
            return Err(LabError::Parse(format!("concept id {bad} out of range")));
        }
        let template = ConceptDataset::generate(DatasetSpec {
            per_class: 0,
            ..spec
        })?;
        Ok(ConceptDataset {
            spec,
            centers: template.centers,
            points,
            labels,
        })
    }
}

fn parse_points(text: &str, dim: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| LabError::Parse("empty CSV".into()))?;
    if header.split(',').count() != dim + 1 {
        return Err(LabError::Parse(format!("header `{header}` does not have {dim} coordinates")));
    }
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(LabError::Parse(format!("line {}: expected {} fields", n + 2, dim + 1)));
        }
        for f in &fields[..dim] {
            flat.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("line {}: {e}", n + 2)))?,
            );
        }
        labels.push(
            fields[dim]
                .trim()
                .parse::<usize>()
                .map_err(|e| LabError::Parse(format!("line {}: {e}", n + 2)))?,
        );
    }
    let points = Array2::from_shape_vec((labels.len(), dim), flat).expect("counted");
    Ok((points, labels))
}

impl Judge for ConceptDataset {
    fn judge(&self, x: ArrayView1<f64>) -> Verdict {
        self.oracle_classify(x)
    }
}

/// Fraction of rows judged as `id`.
pub fn hit_rate<J: Judge + ?Sized>(judge: &J, points: ArrayView2<f64>, id: usize) -> f64 {
    if points.nrows() == 0 {
        return 0.0;
    }
    let hits = points.rows().into_iter().filter(|p| judge.judge(*p).is(id)).count();
    hits as f64 / points.nrows() as f64
}

pub fn mean_point(points: ArrayView2<f64>) -> Array1<f64> {
    points.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(points.ncols()))
}
