//! Run configuration: one TOML document for every subcommand.
//!
//! Every section and every field is optional and falls back to its default;
//! unknown keys are rejected. The digest of the canonical serialization is
//! the run id written next to every artifact.
//!
//! ```toml
//! [dataset]            # concepts, per_class, sigma, radius, dim, seed
//! [schedule]           # steps, beta_min, beta_max
//! [arch]               # data_dim, embed_dim, time_dim, hidden, activation, num_concepts, timesteps
//! [train]              # steps, batch, lr, p_uncond, seed
//! [erase]              # target, eta, steps, lr, batch, guidance, latent_source, scope, seed
//! [race]               # steps, eta, lr, batch, guidance, latent_source, scope, lambda, keywords, seed
//! [race.attack]        # epsilon, step_size, steps, seed
//! [eval]               # trials, guidance, t_star, grid, start, samples_per_concept, held_out, n_gen, mc, classify, seed
//! [eval.attack]        # epsilon, step_size, steps, seed
//! [paths]              # data, base, start, checkpoint (optional)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::DatasetSpec;
use crate::diffusion::ScheduleSpec;
use crate::erasure::{EraseConfig, TrainConfig};
use crate::error::{LabError, Result};
use crate::eval::default_grid;
use crate::model::Arch;
use crate::race::{AttackConfig, RaceConfig, TrajectoryStart};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub guidance: f64,
    /// Attack timestep for `attack` and `eval-asr`.
    pub t_star: usize,
    /// Sweep grid; empty means every `T/10` steps.
    pub grid: Vec<usize>,
    pub attack: AttackConfig,
    pub start: TrajectoryStart,
    /// Generations per concept for the accuracy table.
    pub samples_per_concept: usize,
    /// Held-out points per concept for the quality proxy.
    pub held_out: usize,
    /// Generations per concept for the quality proxy.
    pub n_gen: usize,
    /// Monte Carlo pairs per diffusion-classifier decision.
    pub mc: usize,
    /// Held-out points per concept fed to the diffusion classifier.
    pub classify: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 200,
            guidance: 3.0,
            t_star: 70,
            grid: Vec::new(),
            attack: AttackConfig::default(),
            start: TrajectoryStart::FreshNoise,
            samples_per_concept: 500,
            held_out: 500,
            n_gen: 200,
            mc: 64,
            classify: 50,
            seed: 7,
        }
    }
}

/// Optional artifact locations; relative paths resolve against the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    /// Checkpoint the adversarial erasure starts from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<PathBuf>,
    /// Checkpoint the evaluation subcommands load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub arch: Arch,
    pub train: TrainConfig,
    /// Also names the target concept for `race` and the evaluations.
    pub erase: EraseConfig,
    pub race: RaceConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `text` (or the defaults when `None`), apply `key.path = value`
    /// overrides, then validate.
    pub fn with_overrides(text: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table: Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| LabError::Config(e.to_string()))?,
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LabError::Config(m));
        self.arch.validate()?;
        if self.arch.data_dim != self.dataset.dim {
            return err(format!(
                "arch.data_dim {} differs from dataset.dim {}",
                self.arch.data_dim, self.dataset.dim
            ));
        }
        if self.arch.num_concepts != self.dataset.concepts {
            return err(format!(
                "arch.num_concepts {} differs from dataset.concepts {}",
                self.arch.num_concepts, self.dataset.concepts
            ));
        }
        if self.arch.timesteps != self.schedule.steps {
            return err(format!(
                "arch.timesteps {} differs from schedule.steps {}",
                self.arch.timesteps, self.schedule.steps
            ));
        }
        self.schedule.build()?;
        self.train.validate()?;
        self.erase.validate(&self.arch)?;
        self.race.validate()?;
        self.eval.attack.validate()?;
        let e = &self.eval;
        if e.trials == 0 || e.samples_per_concept == 0 || e.held_out == 0 || e.mc == 0 || e.classify == 0 {
            return err("eval counts must be >= 1".into());
        }
        if e.n_gen < 2 {
            return err("eval.n_gen must be >= 2".into());
        }
        if !e.guidance.is_finite() {
            return err("eval.guidance must be finite".into());
        }
        let steps = self.schedule.steps;
        if let Some(&t) = self.grid().iter().chain([&e.t_star]).find(|&&t| t == 0 || t > steps) {
            return err(format!("attack timestep {t} outside 1..={steps}"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<usize> {
        if self.eval.grid.is_empty() {
            default_grid(self.schedule.steps)
        } else {
            self.eval.grid.clone()
        }
    }

    pub fn target(&self) -> usize {
        self.erase.target
    }
}

/// Parse `key.path=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(LabError::Config(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(LabError::Config(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
