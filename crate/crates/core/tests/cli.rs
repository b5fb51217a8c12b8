use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use percept_tts::evalkit::MetricReport;
use tempfile::TempDir;

const FAST: [&str; 6] = [
    "--set",
    "mos_train.epochs=1",
    "--set",
    "tts_train.epochs=2",
    "--set",
    "tts_train.batch_size=8",
];

struct Sandbox {
    _tmp: TempDir,
    corpus: PathBuf,
    out: PathBuf,
}

impl Sandbox {
    fn new() -> Sandbox {
        let tmp = TempDir::new().unwrap();
        let corpus = tmp.path().join("corpus");
        copy_tree(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus"), &corpus);
        let out = tmp.path().join("out");
        Sandbox { _tmp: tmp, corpus, out }
    }

    fn file(&self, name: &str) -> String {
        self.corpus.join(name).display().to_string()
    }

    /// Runs a stage with the smoke config, the fast overrides and `--out`.
    fn run(&self, args: &[&str]) -> Output {
        let config = self.file("smoke.toml");
        let out = self.out.display().to_string();
        // Shared flags go first so a test's own `--set` wins.
        let mut all: Vec<&str> = vec!["--config", &config, "--out", &out, "--no-timestamp"];
        all.extend(FAST);
        all.extend(args);
        cli(&all)
    }

    fn ok(&self, args: &[&str]) -> Output {
        let output = self.run(args);
        assert_eq!(output.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&output.stderr));
        output
    }
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_percept-tts"))
        .args(args)
        .env_remove("PERCEPT_TTS_HOME")
        .output()
        .unwrap()
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn code(output: &Output) -> Option<i32> {
    output.status.code()
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(code(&cli(&["prepare", "--frobnicate"])), Some(1));
    assert_eq!(code(&cli(&["train-tts", "--perceptual", "maybe"])), Some(1));
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["prepare", "--set", "no_equals_sign"])), Some(1));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let sb = Sandbox::new();
    fs::remove_file(sb.corpus.join("tts_manifest.tsv")).unwrap();
    let output = sb.run(&["prepare"]);
    assert_eq!(code(&output), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn empty_manifest_prepares_nothing() {
    let sb = Sandbox::new();
    fs::write(sb.corpus.join("tts_manifest.tsv"), "").unwrap();
    fs::write(sb.corpus.join("mos_manifest.tsv"), "").unwrap();
    sb.ok(&["prepare"]);
}

#[test]
fn perceptual_training_needs_a_predictor() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    let output = sb.run(&["train-tts", "--perceptual", "on"]);
    assert_eq!(code(&output), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("predictor"));
}

#[test]
fn fastspeech_needs_a_teacher() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    assert_eq!(code(&sb.run(&["train-tts", "--set", "family=\"fastspeech\""])), Some(1));
    assert_eq!(code(&sb.run(&["train-tts", "--teacher", "nowhere"])), Some(1));
}

#[test]
fn logs_carry_lambda_only_when_perceptual() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    sb.ok(&["train-tts"]);
    let log = fs::read_to_string(sb.out.join("tts/transformer/train.log")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("epoch="));
    assert!(!log.contains("lambda="));
    sb.ok(&["train-mos"]);
    sb.ok(&["train-tts", "--perceptual", "on"]);
    // Logs append; keep the latest run, which starts at its header line.
    let log = fs::read_to_string(sb.out.join("tts/transformer/train.log")).unwrap();
    let latest = &log[log.rfind("family=").unwrap()..];
    assert!(latest.starts_with("family=transformer perceptual=on"));
    let lambdas: Vec<&str> = latest
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().find(|w| w.starts_with("lambda=")).unwrap())
        .collect();
    assert_eq!(lambdas, ["lambda=90", "lambda=89"]);
}

#[test]
fn no_timestamp_logs_are_reproducible() {
    let first = Sandbox::new();
    let second = Sandbox::new();
    for sb in [&first, &second] {
        sb.ok(&["prepare"]);
        sb.ok(&["train-mos"]);
    }
    let log = |sb: &Sandbox| fs::read_to_string(sb.out.join("mosnet/train.log")).unwrap();
    let a = log(&first).replace(&first.out.display().to_string(), "OUT");
    let b = log(&second).replace(&second.out.display().to_string(), "OUT");
    assert_eq!(a, b);

    let config = first.file("smoke.toml");
    let out = first.out.display().to_string();
    let output = cli(&["prepare", "--config", &config, "--out", &out]);
    assert_eq!(code(&output), Some(0));
    let stamped = String::from_utf8_lossy(&output.stdout);
    assert!(!stamped.is_empty());
    assert!(stamped.lines().all(|l| l.starts_with('[')), "{stamped}");
}

#[test]
fn last_override_wins() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    sb.ok(&["train-tts", "--set", "tts_train.epochs=1", "--set", "tts_train.epochs=3"]);
    let log = fs::read_to_string(sb.out.join("tts/transformer/train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 3);
}

#[test]
fn output_root_falls_back_to_the_home_variable() {
    let sb = Sandbox::new();
    let home = sb.out.join("home");
    let output = Command::new(env!("CARGO_BIN_EXE_percept-tts"))
        .args(["prepare", "--config", &sb.file("smoke.toml"), "--no-timestamp"])
        .env("PERCEPT_TTS_HOME", &home)
        .output()
        .unwrap();
    assert_eq!(code(&output), Some(0));
    assert!(home.join("prepare.log").exists());
    assert!(home.join("mels").is_dir());
}

#[test]
fn eval_reports_per_and_fcr() {
    let sb = Sandbox::new();
    let reference = sb.file("per_reference.tsv");
    sb.ok(&[
        "eval",
        "--ratings",
        &sb.file("eval_ratings.csv"),
        "--per-ref",
        &reference,
        "--per-hyp",
        &format!("exact={reference}"),
        "--classes",
        &sb.file("classes.tsv"),
    ]);
    let path = sb.out.join("eval/report.toml");
    let text = fs::read_to_string(&path).unwrap();
    let report = MetricReport::from_text(&text, &path).unwrap();
    let exact = &report.systems["exact"];
    assert_eq!(exact.per_overall.as_deref(), Some("0.0%"));
    assert!(report.systems["baseline"].fcr.is_some());
    assert!(text.contains("fcr"));
}

#[test]
fn eval_without_inputs_is_a_usage_error() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["eval"])), Some(1));
}

#[test]
fn charts_are_byte_deterministic() {
    let sb = Sandbox::new();
    let ratings = sb.file("eval_ratings.csv");
    let a = sb.out.join("a.svg").display().to_string();
    let b = sb.out.join("b.svg").display().to_string();
    sb.ok(&["plot", "--ratings", &ratings, "--chart", &a]);
    sb.ok(&["plot", "--ratings", &ratings, "--chart", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    let output = sb.run(&["train-tts", "--set", "tts_train.learning_rate=1e30"]);
    assert_eq!(code(&output), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn distilled_fastspeech_trains_and_synthesizes() {
    let sb = Sandbox::new();
    sb.ok(&["prepare"]);
    sb.ok(&["train-tts"]);
    let teacher = sb.out.join("tts/transformer/epoch_001").display().to_string();
    sb.ok(&["distill", "--teacher", &teacher]);
    let small = [
        "--set",
        "family=\"fastspeech\"",
        "--set",
        "fastspeech.d_model=16",
        "--set",
        "fastspeech.ffn_dim=16",
        "--set",
        "fastspeech.duration_channels=16",
        "--set",
        "fastspeech.postnet_channels=16",
    ];
    let mut train = vec!["train-tts"];
    train.extend(small);
    sb.ok(&train);
    let mut synth = vec!["synth", "--text", "abc"];
    synth.extend(small);
    sb.ok(&synth);
    let mels = fs::read_dir(sb.out.join("synth/fastspeech"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mel"))
        .count();
    assert_eq!(mels, 1);
}
