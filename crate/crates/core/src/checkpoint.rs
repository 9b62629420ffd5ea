//! Versioned, self-verifying checkpoint files.
//!
//! Layout: a UTF-8 header of `key = value` lines (architecture, schedule,
//! provenance, and one `array` line per parameter array with its shape and
//! byte offset), terminated by `end_header\n`, followed by the parameter
//! values as little-endian IEEE-754 doubles. The `digest` line is the
//! SHA-256 of every header byte before it plus the binary payload.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleSpec;
use crate::error::{LabError, Result};
use crate::model::{Activation, Arch, DenoiserParams, ParamArrays};

pub const MAGIC: &str = "race-lab checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Base,
    Esd,
    Race,
    RaceReg,
    RaceKw,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Esd => "esd",
            Stage::Race => "race",
            Stage::RaceReg => "race+reg",
            Stage::RaceKw => "race+kw",
        }
    }

    pub fn is_race(self) -> bool {
        matches!(self, Stage::Race | Stage::RaceReg | Stage::RaceKw)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Stage::Base,
            "esd" => Stage::Esd,
            "race" => Stage::Race,
            "race+reg" => Stage::RaceReg,
            "race+kw" => Stage::RaceKw,
            other => return Err(LabError::Parse(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub stage: Stage,
    /// `(stage, digest)` of the checkpoint this one was derived from.
    pub parent: Option<(Stage, String)>,
    pub config_digest: String,
}

impl Provenance {
    pub fn validate(&self) -> Result<()> {
        let ok = match (self.stage, &self.parent) {
            (Stage::Base, None) => true,
            (Stage::Esd, Some((Stage::Base, _))) => true,
            (s, Some((Stage::Base | Stage::Esd, _))) if s.is_race() => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "invalid lineage: stage {} with parent {:?}",
                self.stage,
                self.parent.as_ref().map(|(s, _)| s.tag())
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleSpec,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, schedule: ScheduleSpec, provenance: Provenance) -> Result<Self> {
        provenance.validate()?;
        if schedule.steps != params.arch.timesteps {
            return Err(LabError::Config(format!(
                "schedule has {} steps but the network expects {}",
                schedule.steps, params.arch.timesteps
            )));
        }
        Ok(Checkpoint {
            params,
            schedule,
            provenance,
        })
    }

    /// Start a child checkpoint of `stage` from new parameters.
    pub fn derive(&self, params: DenoiserParams, stage: Stage, config_digest: &str) -> Result<Self> {
        Checkpoint::new(
            params,
            self.schedule,
            Provenance {
                stage,
                parent: Some((self.provenance.stage, self.digest())),
                config_digest: config_digest.to_string(),
            },
        )
    }

    pub fn stage(&self) -> Stage {
        self.provenance.stage
    }

    fn header_body(&self) -> String {
        let a = &self.params.arch;
        let mut h = String::new();
        let _ = writeln!(h, "{MAGIC}");
        let _ = writeln!(h, "format_version = {FORMAT_VERSION}");
        let _ = writeln!(h, "stage = {}", self.provenance.stage);
        match &self.provenance.parent {
            Some((stage, digest)) => {
                let _ = writeln!(h, "parent_stage = {stage}");
                let _ = writeln!(h, "parent_digest = {digest}");
            }
            None => {
                let _ = writeln!(h, "parent_stage = none");
                let _ = writeln!(h, "parent_digest = none");
            }
        }
        let _ = writeln!(h, "config_digest = {}", self.provenance.config_digest);
        let _ = writeln!(h, "arch.data_dim = {}", a.data_dim);
        let _ = writeln!(h, "arch.embed_dim = {}", a.embed_dim);
        let _ = writeln!(h, "arch.time_dim = {}", a.time_dim);
        let hidden: Vec<String> = a.hidden.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(h, "arch.hidden = {}", hidden.join(","));
        let _ = writeln!(h, "arch.activation = {}", a.activation.tag());
        let _ = writeln!(h, "arch.num_concepts = {}", a.num_concepts);
        let _ = writeln!(h, "arch.timesteps = {}", a.timesteps);
        let _ = writeln!(h, "schedule.steps = {}", self.schedule.steps);
        let _ = writeln!(h, "schedule.beta_min = {:?}", self.schedule.beta_min);
        let _ = writeln!(h, "schedule.beta_max = {:?}", self.schedule.beta_max);
        let mut offset = 0usize;
        for (name, shape, values) in self.params.arrays.named() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(h, "array {name} shape={} offset={offset}", dims.join("x"));
            offset += values.len() * 8;
        }
        let _ = writeln!(h, "payload_bytes = {offset}");
        h
    }

    fn payload(&self) -> Vec<u8> {
        self.params
            .arrays
            .flatten()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    fn digest_of(header: &str, payload: &[u8]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(header.as_bytes());
        hasher.update(payload);
        hex::encode(hasher.finalize())
    }

    /// SHA-256 identifying this checkpoint's exact contents.
    pub fn digest(&self) -> String {
        Self::digest_of(&self.header_body(), &self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_body();
        let payload = self.payload();
        let digest = Self::digest_of(&header, &payload);
        let mut out = header.into_bytes();
        out.extend_from_slice(format!("digest = {digest}\n{END}").as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| LabError::Integrity(m.to_string());
        let split = find(bytes, END.as_bytes()).ok_or_else(|| integrity("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| integrity("header is not UTF-8"))?;
        let payload = &bytes[split + END.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(integrity("not a race-lab checkpoint"));
        }
        let mut kv = Vec::new();
        let mut arrays = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("array ") {
                arrays.push(rest.to_string());
            } else if let Some((k, v)) = line.split_once(" = ") {
                kv.push((k.to_string(), v.to_string()));
            } else {
                return Err(LabError::Parse(format!("bad header line `{line}`")));
            }
        }
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| LabError::Parse(format!("header key `{key}` missing")))
        };
        let version: u32 = parse(get("format_version")?)?;
        if version != FORMAT_VERSION {
            return Err(LabError::Compatibility(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let expected_len: usize = parse(get("payload_bytes")?)?;
        if payload.len() != expected_len {
            return Err(integrity(&format!(
                "payload is {} bytes, header declares {expected_len}",
                payload.len()
            )));
        }
        let digest = get("digest")?;
        let digest_line = format!("digest = {digest}\n");
        let body = header
            .strip_suffix(&digest_line)
            .ok_or_else(|| integrity("digest must be the last header entry"))?;
        if Self::digest_of(body, payload) != digest {
            return Err(integrity("digest mismatch"));
        }

        let arch = Arch {
            data_dim: parse(get("arch.data_dim")?)?,
            embed_dim: parse(get("arch.embed_dim")?)?,
            time_dim: parse(get("arch.time_dim")?)?,
            hidden: get("arch.hidden")?
                .split(',')
                .map(parse)
                .collect::<Result<Vec<usize>>>()?,
            activation: Activation::from_tag(get("arch.activation")?)?,
            num_concepts: parse(get("arch.num_concepts")?)?,
            timesteps: parse(get("arch.timesteps")?)?,
        };
        arch.validate()?;
        let schedule = ScheduleSpec {
            steps: parse(get("schedule.steps")?)?,
            beta_min: parse(get("schedule.beta_min")?)?,
            beta_max: parse(get("schedule.beta_max")?)?,
        };

        let mut params = ParamArrays::zeros(&arch);
        let layout = params.named().into_iter().map(|(n, s, _)| (n, s)).collect::<Vec<_>>();
        if layout.len() != arrays.len() {
            return Err(LabError::Compatibility("array count does not match arch".into()));
        }
        let mut offset = 0usize;
        for ((name, shape), (line, dest)) in layout.iter().zip(arrays.iter().zip(params.slices_mut())) {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let expected = format!("{name} shape={} offset={offset}", dims.join("x"));
            if *line != expected {
                return Err(LabError::Compatibility(format!(
                    "array entry `{line}` does not match arch (`{expected}`)"
                )));
            }
            for (i, v) in dest.iter_mut().enumerate() {
                let at = offset + i * 8;
                *v = f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"));
            }
            offset += dest.len() * 8;
        }

        let parent = match (get("parent_stage")?, get("parent_digest")?) {
            ("none", "none") => None,
            (stage, digest) => Some((stage.parse()?, digest.to_string())),
        };
        let provenance = Provenance {
            stage: get("stage")?.parse()?,
            parent,
            config_digest: get("config_digest")?.to_string(),
        };
        Checkpoint::new(DenoiserParams::from_arrays(arch, params)?, schedule, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse<T: FromStr>(s: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| LabError::Parse(format!("`{s}`: {e}")))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
