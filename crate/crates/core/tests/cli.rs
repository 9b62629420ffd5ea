use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
per_class = 40
[schedule]
steps = 10
beta_max = 0.3
[arch]
hidden = [16]
timesteps = 10
[train]
steps = 40
batch = 16
[erase]
steps = 5
batch = 4
[race]
steps = 3
batch = 4
[eval]
trials = 8
t_star = 5
grid = [2, 5, 8]
samples_per_concept = 5
held_out = 5
n_gen = 4
mc = 4
classify = 2
"#;

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_race-lab"))
        .args(args)
        .env("RACE_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let help = lab(tmp.path(), &["race", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("Usage"), "{text}");
    assert!(text.contains("--lambda"));

    assert_eq!(code(&lab(tmp.path(), &["race", "--no-such-flag"])), 2);
    assert_eq!(code(&lab(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&lab(tmp.path(), &[])), 2);
    assert_eq!(code(&lab(tmp.path(), &["erase", "--steps", "many"])), 2);
    assert_eq!(code(&lab(tmp.path(), &["sweep", "--set", "eval.atack.epsilon=1"])), 2);
    assert_eq!(code(&lab(tmp.path(), &["sweep", "--set", "eval.t_star=0"])), 2);
    // nothing generated yet
    assert_eq!(code(&lab(tmp.path(), &["train-base"])), 2);
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&lab(tmp.path(), &["gen-data", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&lab(tmp.path(), &["gen-data", "--config", c])), 0);
    assert_eq!(code(&lab(tmp.path(), &["train-base", "--config", c])), 0);
    let ck = tmp.path().join("default/checkpoints/base.ckpt");
    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ck, bytes).unwrap();
    let o = lab(tmp.path(), &["erase", "--config", c]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity"));
}

#[test]
fn pipeline_script_reproduces_from_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let script = |run: &str, config: &Path| {
        let c = config.to_str().unwrap();
        for sub in [
            vec!["gen-data"],
            vec!["train-base"],
            vec!["erase"],
            vec!["race"],
            vec!["sweep"],
            vec!["sweep", "--checkpoint", "race"],
            vec!["report"],
        ] {
            let mut args = sub.clone();
            args.extend(["--config", c, "--run", run]);
            let o = lab(tmp.path(), &args);
            assert_eq!(code(&o), 0, "{sub:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
    };
    script("first", &cfg);
    let first = tmp.path().join("first");
    for f in ["config.echo", "metrics.csv", "log.txt", "checkpoints/base.ckpt", "checkpoints/esd.ckpt", "checkpoints/race.ckpt"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let echo = tmp.path().join("echo.toml");
    std::fs::copy(first.join("config.echo"), &echo).unwrap();
    script("second", &echo);
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("second/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(first.join("checkpoints/race.ckpt")).unwrap(),
        std::fs::read(tmp.path().join("second/checkpoints/race.ckpt")).unwrap()
    );
    let svg = std::fs::read_to_string(first.join("plots/sweep.svg")).unwrap();
    assert!(svg.contains("race") && svg.contains("esd"));
}

#[test]
fn flags_override_file_and_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let o = lab(tmp.path(), &["gen-data", "--config", c, "--per-class", "7", "--set", "erase.target=2"]);
    assert_eq!(code(&o), 0);
    let echo = std::fs::read_to_string(tmp.path().join("default/config.echo")).unwrap();
    assert!(echo.contains("per_class = 7"), "{echo}");
    assert!(echo.contains("target = 2"));
    let data = std::fs::read_to_string(tmp.path().join("default/data.csv")).unwrap();
    // comment + header + 4 x 7 points
    assert_eq!(data.lines().count(), 30);
}
