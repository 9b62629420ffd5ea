//! Subcommand implementations over a run directory.
//!
//! ```text
//! <run>/config.echo      effective configuration of the last subcommand
//! <run>/data.csv         training points
//! <run>/checkpoints/     <stage>.ckpt
//! <run>/metrics.csv      run_id,metric,concept,t_star,value,n,seed
//! <run>/losses.csv       run_id,stage,step,loss
//! <run>/trials.csv       per-trial output of `attack`
//! <run>/plots/           SVG line plots
//! <run>/log.txt          append-only progress log
//! ```
//!
//! Metric names are `<stage>.<quantity>`, e.g. `esd.asr` or `base.accuracy`.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Checkpoint, Provenance, Stage};
use crate::config::RunConfig;
use crate::data::{hit_rate, ConceptDataset};
use crate::erasure::{run_esd, train_base as fit_base, TrainLog};
use crate::error::{LabError, Result};
use crate::eval::{
    asr, concept_samples, diffusion_classify, disentanglement_report, quality_proxy, timestep_sweep, AsrSetup,
    MetricRecord, TimestepPlan,
};
use crate::race::{run_race, AttackConfig};
use crate::report::{line_plot, LossTable, MetricsTable, Series};
use crate::rng;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RACE_LAB_OUT";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("plots"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data.csv")
    }

    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.csv")
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.tag()))
    }

    /// A stage tag names that stage's checkpoint in this run; anything else
    /// is a path, relative to the run directory unless absolute.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if let Some(stage) = p.to_str().and_then(|s| s.parse::<Stage>().ok()) {
            return self.checkpoint(stage);
        }
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn log(&self, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join("log.txt"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// A validated configuration bound to its run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub digest: String,
    pub dir: RunDir,
}

impl Run {
    /// Create the directory layout and echo the effective configuration.
    pub fn open(config: RunConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::create(root)?;
        std::fs::write(dir.config_echo(), config.to_toml())?;
        let digest = config.digest();
        Ok(Run { config, digest, dir })
    }

    pub fn dataset(&self) -> Result<ConceptDataset> {
        let path = match &self.config.paths.data {
            Some(p) => self.dir.resolve(p),
            None => self.dir.data(),
        };
        if !path.exists() {
            return Err(LabError::Config(format!(
                "no dataset at {}; run gen-data first",
                path.display()
            )));
        }
        ConceptDataset::load_csv(&path, self.config.dataset)
    }

    fn checkpoint_at(&self, configured: Option<&PathBuf>, fallback: Stage) -> Result<Checkpoint> {
        let path = match configured {
            Some(p) => self.dir.resolve(p),
            None => self.dir.checkpoint(fallback),
        };
        if !path.exists() {
            return Err(LabError::Config(format!("no checkpoint at {}", path.display())));
        }
        Checkpoint::load(&path)
    }

    /// Checkpoint under evaluation: `paths.checkpoint`, else the ESD one.
    pub fn evaluated(&self) -> Result<Checkpoint> {
        self.checkpoint_at(self.config.paths.checkpoint.as_ref(), Stage::Esd)
    }

    fn record(&self, records: &[MetricRecord]) -> Result<()> {
        let path = self.dir.metrics();
        let mut table = MetricsTable::load_or_default(&path)?;
        table.upsert(&self.digest, records);
        table.save(&path)
    }

    fn record_losses(&self, stage: Stage, log: &TrainLog) -> Result<()> {
        let path = self.dir.losses();
        let mut table = LossTable::load_or_default(&path)?;
        table.replace_stage(&self.digest, stage.tag(), &log.losses);
        table.save(&path)
    }

    fn asr_setup(&self, epsilon: Option<f64>) -> AsrSetup {
        let e = &self.config.eval;
        AsrSetup {
            attack: AttackConfig {
                epsilon: epsilon.unwrap_or(e.attack.epsilon),
                ..e.attack
            },
            guidance: e.guidance,
            trials: e.trials,
            seed: e.seed,
            start: e.start,
        }
    }

    fn finish(&self, cmd: &str, started: Instant, records: Vec<MetricRecord>) -> Result<Vec<MetricRecord>> {
        self.record(&records)?;
        self.dir.log(&format!(
            "{cmd}: {} metrics, {:.1}s, config {}",
            records.len(),
            started.elapsed().as_secs_f64(),
            self.digest
        ))?;
        Ok(records)
    }
}

fn metric(name: String, concept: Option<usize>, t_star: Option<usize>, value: f64, count: usize, seed: u64) -> MetricRecord {
    MetricRecord {
        name,
        concept,
        t_star,
        value,
        count,
        seed,
    }
}

fn tail_mean(losses: &[f64]) -> f64 {
    let n = losses.len().min(100);
    losses[losses.len() - n..].iter().sum::<f64>() / n as f64
}

/// Write the training set and report per-concept counts and the oracle's
/// accuracy on fresh held-out points.
pub fn gen_data(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let ds = ConceptDataset::generate(run.config.dataset)?;
    let text = format!("# config {}\n{}", run.digest, ds.to_csv());
    std::fs::write(run.dir.data(), text)?;
    let held = ds.held_out(run.config.eval.held_out)?;
    let seed = run.config.dataset.seed;
    let mut out = Vec::new();
    for c in 0..ds.concepts() {
        out.push(metric("data.count".into(), Some(c), None, ds.concept_points(c).nrows() as f64, ds.len(), seed));
    }
    for c in 0..ds.concepts() {
        let pts = held.concept_points(c);
        out.push(metric(
            "data.oracle_accuracy".into(),
            Some(c),
            None,
            hit_rate(&ds, pts.view(), c),
            pts.nrows(),
            seed,
        ));
    }
    run.finish("gen-data", started, out)
}

pub fn train_base(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let ds = run.dataset()?;
    let schedule = cfg.schedule.build()?;
    let (params, log) = fit_base(&ds, &schedule, &cfg.arch, &cfg.train)?;
    let ck = Checkpoint::new(
        params,
        cfg.schedule,
        Provenance {
            stage: Stage::Base,
            parent: None,
            config_digest: run.digest.clone(),
        },
    )?;
    ck.save(&run.dir.checkpoint(Stage::Base))?;
    run.record_losses(Stage::Base, &log)?;
    let out = vec![metric(
        "base.final_loss".into(),
        None,
        None,
        tail_mean(&log.losses),
        log.losses.len(),
        cfg.train.seed,
    )];
    run.finish("train-base", started, out)
}

pub fn erase(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let base = run.checkpoint_at(cfg.paths.base.as_ref(), Stage::Base)?;
    let (ck, log) = run_esd(&base, &cfg.erase, &run.digest)?;
    ck.save(&run.dir.checkpoint(Stage::Esd))?;
    run.record_losses(Stage::Esd, &log)?;
    let out = vec![metric(
        "esd.final_loss".into(),
        Some(cfg.target()),
        None,
        tail_mean(&log.losses),
        log.losses.len(),
        cfg.erase.seed,
    )];
    run.finish("erase", started, out)
}

/// Adversarial erasure from `paths.start`, else the base checkpoint.
pub fn race(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let start = run.checkpoint_at(cfg.paths.start.as_ref(), Stage::Base)?;
    let (ck, log) = run_race(&start, cfg.target(), &cfg.race, &run.digest)?;
    let stage = ck.stage();
    ck.save(&run.dir.checkpoint(stage))?;
    run.record_losses(stage, &log)?;
    let out = vec![metric(
        format!("{stage}.final_loss"),
        Some(cfg.target()),
        None,
        tail_mean(&log.losses),
        log.losses.len(),
        cfg.race.seed,
    )];
    run.finish("race", started, out)
}

/// Attack the evaluated checkpoint at `eval.t_star`; one row per trial in
/// `trials.csv`.
pub fn attack(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let ds = run.dataset()?;
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let (target, t_star) = (cfg.target(), cfg.eval.t_star);
    let setup = run.asr_setup(None);
    let (rate, trials) = asr(&ck.params, &schedule, &ds, &ds, target, t_star, &setup)?;
    let mut csv = format!("# config {}\nseed,verdict,x0,x1,linf\n", run.digest);
    let mut max_linf = 0.0f64;
    for tr in &trials {
        let linf = tr.delta.fold(0.0f64, |m, v| m.max(v.abs()));
        max_linf = max_linf.max(linf);
        let verdict = match tr.verdict {
            crate::data::Verdict::Concept(i) => i.to_string(),
            crate::data::Verdict::Reject => "reject".into(),
        };
        let coords: Vec<String> = tr.generated.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(csv, "{},{verdict},{},{linf:?}", tr.seed, coords.join(","));
    }
    std::fs::write(run.dir.trials(), csv)?;
    run.dir.log(&format!("attack: {} trials at t*={t_star}", trials.len()))?;
    let s = ck.stage();
    let seed = cfg.eval.seed;
    let out = vec![
        metric(format!("{s}.asr"), Some(target), Some(t_star), rate, trials.len(), seed),
        metric(format!("{s}.max_linf"), Some(target), Some(t_star), max_linf, trials.len(), seed),
    ];
    run.finish("attack", started, out)
}

/// ASR at `eval.t_star` and the unattacked rate (`ε = 0`) on the same seeds.
pub fn eval_asr(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let ds = run.dataset()?;
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let (target, t_star, seed) = (cfg.target(), cfg.eval.t_star, cfg.eval.seed);
    let (rate, trials) = asr(&ck.params, &schedule, &ds, &ds, target, t_star, &run.asr_setup(None))?;
    let (base, _) = asr(&ck.params, &schedule, &ds, &ds, target, t_star, &run.asr_setup(Some(0.0)))?;
    run.dir.log(&format!("eval-asr: {} trials at t*={t_star}", trials.len()))?;
    let s = ck.stage();
    let out = vec![
        metric(format!("{s}.asr"), Some(target), Some(t_star), rate, trials.len(), seed),
        metric(format!("{s}.unattacked"), Some(target), Some(t_star), base, trials.len(), seed),
    ];
    run.finish("eval-asr", started, out)
}

/// ASR over the timestep grid, the unattacked rate at the best `t*`, and a
/// plot of the curve.
pub fn sweep(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let ds = run.dataset()?;
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let (target, seed, trials) = (cfg.target(), cfg.eval.seed, cfg.eval.trials);
    let grid = cfg.grid();
    let curve = timestep_sweep(&ck.params, &schedule, &ds, &ds, target, &grid, &run.asr_setup(None))?;
    // first maximum wins
    let (best_t, best) = curve
        .iter()
        .copied()
        .fold((grid[0], f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let (base, _) = asr(&ck.params, &schedule, &ds, &ds, target, best_t, &run.asr_setup(Some(0.0)))?;
    let s = ck.stage();
    let mut out: Vec<MetricRecord> = curve
        .iter()
        .map(|&(t, r)| metric(format!("{s}.asr"), Some(target), Some(t), r, trials, seed))
        .collect();
    out.push(metric(format!("{s}.best_asr"), Some(target), Some(best_t), best, trials, seed));
    out.push(metric(format!("{s}.unattacked"), Some(target), Some(best_t), base, trials, seed));
    out.push(metric(format!("{s}.sweep_spread"), Some(target), None, hi - lo, trials * grid.len(), seed));
    let series = vec![Series {
        label: s.tag().to_string(),
        points: curve.iter().map(|&(t, r)| (t as f64, r)).collect(),
    }];
    let title = format!("{s}: attack success vs attacked timestep");
    std::fs::write(
        run.dir.plot(&format!("sweep-{}.svg", s.tag())),
        line_plot(&title, "t*", "ASR", &series, &run.digest),
    )?;
    run.dir.log(&format!("sweep: {} grid points x {trials} trials", grid.len()))?;
    run.finish("sweep", started, out)
}

/// Per-concept generation accuracy (oracle judge) and held-out accuracy of
/// the diffusion classifier.
pub fn disentangle(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let e = &cfg.eval;
    let ds = run.dataset()?;
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let s = ck.stage();
    let acc = disentanglement_report(&ck.params, &schedule, &ds, e.samples_per_concept, e.guidance, e.seed)?;
    let mut out: Vec<MetricRecord> = acc
        .iter()
        .enumerate()
        .map(|(c, &a)| metric(format!("{s}.accuracy"), Some(c), None, a, e.samples_per_concept, e.seed))
        .collect();
    let held = ds.held_out(e.classify)?;
    let ids: Vec<usize> = (0..ds.concepts()).collect();
    for c in 0..ds.concepts() {
        let pts = held.concept_points(c);
        let mut hits = 0;
        for (i, x) in pts.rows().into_iter().enumerate() {
            let seed = rng::derive(e.seed, &[c as u64, i as u64]);
            if diffusion_classify(&ck.params, &schedule, x, &ids, e.mc, TimestepPlan::Uniform, seed)? == c {
                hits += 1;
            }
        }
        out.push(metric(
            format!("{s}.classifier_accuracy"),
            Some(c),
            None,
            hits as f64 / pts.nrows().max(1) as f64,
            pts.nrows(),
            e.seed,
        ));
    }
    run.finish("disentangle", started, out)
}

/// Energy distance between generated and held-out samples, every concept.
pub fn quality(run: &Run) -> Result<Vec<MetricRecord>> {
    let started = Instant::now();
    let cfg = &run.config;
    let e = &cfg.eval;
    let ds = run.dataset()?;
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let held = ds.held_out(e.held_out)?;
    let ids: Vec<usize> = (0..ds.concepts()).collect();
    let proxy = quality_proxy(&ck.params, &schedule, &held, &ids, e.n_gen, e.guidance, e.seed)?;
    let s = ck.stage();
    let out = proxy
        .iter()
        .map(|&(c, d)| metric(format!("{s}.energy_distance"), Some(c), None, d, e.n_gen, e.seed))
        .collect();
    run.finish("quality", started, out)
}

/// Re-draw plots from `metrics.csv` and `losses.csv` and return a text summary.
pub fn report(run: &Run) -> Result<String> {
    let metrics = MetricsTable::load_or_default(&run.dir.metrics())?;
    let losses = LossTable::load_or_default(&run.dir.losses())?;
    let mut sweeps: Vec<Series> = Vec::new();
    for r in &metrics.rows {
        let m = &r.record;
        let Some(stage) = m.name.strip_suffix(".asr") else { continue };
        let Some(t) = m.t_star else { continue };
        match sweeps.iter_mut().find(|s| s.label == stage) {
            Some(s) => s.points.push((t as f64, m.value)),
            None => sweeps.push(Series {
                label: stage.to_string(),
                points: vec![(t as f64, m.value)],
            }),
        }
    }
    for s in &mut sweeps {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    if !sweeps.is_empty() {
        std::fs::write(
            run.dir.plot("sweep.svg"),
            line_plot("attack success vs attacked timestep", "t*", "ASR", &sweeps, &run.digest),
        )?;
    }
    let curves: Vec<Series> = losses
        .stages()
        .into_iter()
        .map(|stage| {
            let l = losses.stage(&stage);
            // block means keep the plot small
            let block = l.len().div_ceil(200).max(1);
            let points = l
                .chunks(block)
                .enumerate()
                .map(|(i, c)| ((i * block) as f64, c.iter().sum::<f64>() / c.len() as f64))
                .collect();
            Series { label: stage, points }
        })
        .collect();
    if !curves.is_empty() {
        std::fs::write(
            run.dir.plot("losses.svg"),
            line_plot("training loss", "step", "loss", &curves, &run.digest),
        )?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "{:<32} {:>7} {:>6} {:>12} {:>6}", "metric", "concept", "t*", "value", "n");
    for r in &metrics.rows {
        let m = &r.record;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            text,
            "{:<32} {:>7} {:>6} {:>12.6} {:>6}",
            m.name,
            opt(m.concept),
            opt(m.t_star),
            m.value,
            m.count
        );
    }
    run.dir.log(&format!("report: {} metric rows, {} loss curves", metrics.rows.len(), curves.len()))?;
    Ok(text)
}

/// Conditional samples of every concept from the evaluated checkpoint, for
/// inspection.
pub fn samples(run: &Run, per_concept: usize) -> Result<Vec<ndarray::Array2<f64>>> {
    let ck = run.evaluated()?;
    let schedule = ck.schedule.build()?;
    let e = &run.config.eval;
    (0..ck.params.arch.num_concepts)
        .map(|c| concept_samples(&ck.params, &schedule, c, per_concept, e.guidance, e.seed))
        .collect()
}
