use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use race_lab::config::{parse_override, RunConfig};
use race_lab::eval::MetricRecord;
use race_lab::model::FineTuneScope;
use race_lab::pipeline::{self, Run, OUT_ENV};
use race_lab::LabError;

/// Concept erasure lab: train, erase, attack and harden a small conditional
/// diffusion model.
#[derive(Parser, Debug)]
#[command(name = "race-lab", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; the run directory is <out>/<run>.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "default")]
    run: String,
    /// Override any config key, e.g. --set race.lambda=0.1. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the concept dataset into data.csv.
    GenData {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the base conditional denoiser.
    TrainBase {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Erase the target concept from the base checkpoint.
    Erase {
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, value_enum)]
        scope: Option<Scope>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adversarially erase the target concept.
    Race {
        #[arg(long)]
        target: Option<usize>,
        /// Start checkpoint: a stage tag (base, esd) or a path.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// PGD step size.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        pgd_steps: Option<usize>,
        /// L1 pull towards the start checkpoint.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        keywords: Option<usize>,
        #[arg(long, value_enum)]
        scope: Option<Scope>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack at one timestep and write every trial to trials.csv.
    Attack(EvalArgs),
    /// Attack success rate and the unattacked rate at one timestep.
    EvalAsr(EvalArgs),
    /// Attack success rate across attacked timesteps.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated timesteps.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
    /// Per-concept generation accuracy and diffusion-classifier accuracy.
    Disentangle {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Energy-distance quality proxy per concept.
    Quality {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_gen: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Redraw plots and print every recorded metric.
    Report,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate: a stage tag (esd, race, ...) or a path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    t_star: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    pgd_steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Scope {
    All,
    Condition,
}

impl From<Scope> for FineTuneScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::All => FineTuneScope::All,
            Scope::Condition => FineTuneScope::Condition,
        }
    }
}

#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn int<T: TryInto<i64>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v.and_then(|v| v.try_into().ok()) {
            self.0.push((key.into(), Value::Integer(v)));
        }
    }
    fn float(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            self.0.push((key.into(), Value::Float(v)));
        }
    }
    fn text(&mut self, key: &str, v: Option<String>) {
        if let Some(v) = v {
            self.0.push((key.into(), Value::String(v)));
        }
    }
    fn path(&mut self, key: &str, v: Option<PathBuf>) {
        self.text(key, v.map(|p| p.to_string_lossy().into_owned()));
    }
    fn scope(&mut self, key: &str, v: Option<Scope>) {
        self.text(
            key,
            v.map(|s| match FineTuneScope::from(s) {
                FineTuneScope::All => "all".into(),
                FineTuneScope::Condition => "condition".into(),
            }),
        );
    }
    fn eval(&mut self, a: EvalArgs) {
        self.path("paths.checkpoint", a.checkpoint);
        self.int("erase.target", a.target);
        self.int("eval.t_star", a.t_star);
        self.int("eval.trials", a.trials);
        self.float("eval.attack.epsilon", a.epsilon);
        self.float("eval.attack.step_size", a.alpha);
        self.int("eval.attack.steps", a.pgd_steps);
        self.float("eval.guidance", a.guidance);
        self.int("eval.seed", a.seed);
    }
}

fn collect(cmd: Cmd) -> (&'static str, Overrides) {
    let mut o = Overrides::default();
    let name = match cmd {
        Cmd::GenData {
            per_class,
            sigma,
            radius,
            seed,
        } => {
            o.int("dataset.per_class", per_class);
            o.float("dataset.sigma", sigma);
            o.float("dataset.radius", radius);
            o.int("dataset.seed", seed);
            "gen-data"
        }
        Cmd::TrainBase { steps, lr, batch, seed } => {
            o.int("train.steps", steps);
            o.float("train.lr", lr);
            o.int("train.batch", batch);
            o.int("train.seed", seed);
            "train-base"
        }
        Cmd::Erase {
            target,
            steps,
            lr,
            eta,
            scope,
            seed,
        } => {
            o.int("erase.target", target);
            o.int("erase.steps", steps);
            o.float("erase.lr", lr);
            o.float("erase.eta", eta);
            o.scope("erase.scope", scope);
            o.int("erase.seed", seed);
            "erase"
        }
        Cmd::Race {
            target,
            from,
            steps,
            lr,
            epsilon,
            alpha,
            pgd_steps,
            lambda,
            keywords,
            scope,
            seed,
        } => {
            o.int("erase.target", target);
            o.path("paths.start", from);
            o.int("race.steps", steps);
            o.float("race.lr", lr);
            o.float("race.attack.epsilon", epsilon);
            o.float("race.attack.step_size", alpha);
            o.int("race.attack.steps", pgd_steps);
            o.float("race.lambda", lambda);
            o.int("race.keywords", keywords);
            o.scope("race.scope", scope);
            o.int("race.seed", seed);
            "race"
        }
        Cmd::Attack(a) => {
            o.eval(a);
            "attack"
        }
        Cmd::EvalAsr(a) => {
            o.eval(a);
            "eval-asr"
        }
        Cmd::Sweep { eval, grid } => {
            o.eval(eval);
            if let Some(g) = grid {
                let arr = g.into_iter().map(|t| Value::Integer(t as i64)).collect();
                o.0.push(("eval.grid".into(), Value::Array(arr)));
            }
            "sweep"
        }
        Cmd::Disentangle {
            checkpoint,
            samples,
            mc,
            seed,
        } => {
            o.path("paths.checkpoint", checkpoint);
            o.int("eval.samples_per_concept", samples);
            o.int("eval.mc", mc);
            o.int("eval.seed", seed);
            "disentangle"
        }
        Cmd::Quality { checkpoint, n_gen, seed } => {
            o.path("paths.checkpoint", checkpoint);
            o.int("eval.n_gen", n_gen);
            o.int("eval.seed", seed);
            "quality"
        }
        Cmd::Report => "report",
    };
    (name, o)
}

fn print_records(records: &[MetricRecord]) {
    for m in records {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        println!("{:<28} concept={:<2} t*={:<4} {:.6} (n={})", m.name, opt(m.concept), opt(m.t_star), m.value, m.count);
    }
}

fn execute(cli: Cli) -> race_lab::Result<()> {
    let text = match &cli.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| LabError::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let (name, mut overrides) = collect(cli.cmd);
    // explicit subcommand flags beat --set
    let mut all = cli.set.iter().map(|s| parse_override(s)).collect::<race_lab::Result<Vec<_>>>()?;
    all.append(&mut overrides.0);
    let config = RunConfig::with_overrides(text.as_deref(), &all)?;
    let run = Run::open(config, &cli.out.join(&cli.run))?;
    eprintln!("{name}: run {} (config {})", run.dir.path().display(), &run.digest[..16]);
    let records = match name {
        "gen-data" => pipeline::gen_data(&run)?,
        "train-base" => pipeline::train_base(&run)?,
        "erase" => pipeline::erase(&run)?,
        "race" => pipeline::race(&run)?,
        "attack" => pipeline::attack(&run)?,
        "eval-asr" => pipeline::eval_asr(&run)?,
        "sweep" => pipeline::sweep(&run)?,
        "disentangle" => pipeline::disentangle(&run)?,
        "quality" => pipeline::quality(&run)?,
        _ => {
            print!("{}", pipeline::report(&run)?);
            Vec::new()
        }
    };
    print_records(&records);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LabError::Config(_) | LabError::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
