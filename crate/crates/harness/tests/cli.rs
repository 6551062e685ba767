//! Drives the `soba` binary end to end on a tiny corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use soba_core::corpus::{Corpus, CorpusVocab};
use soba_core::qa::AnswerVocab;
use soba_harness::data::Split;
use soba_harness::eval::{to_jsonl, PredictionRecord};
use soba_harness::train::{load_checkpoint, save_checkpoint, ExperimentRecord};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// Small corpus and fast schedules; extra overrides come last.
    fn args(&self, out: &Path, extra: &[&str]) -> Vec<String> {
        [
            format!("corpus.path={}", self.corpus().display()),
            "corpus.n_train=6".into(),
            "corpus.n_val=4".into(),
            "corpus.n_test=4".into(),
            format!("run.out_dir={}", out.display()),
            "seg.steps=4".into(),
            "seg.eval_every=2".into(),
            "vqa.steps=6".into(),
            "vqa.eval_every=3".into(),
            "sweep.seeds=[0]".into(),
        ]
        .into_iter()
        .chain(extra.iter().map(|s| s.to_string()))
        .flat_map(|s| ["--set".to_string(), s])
        .collect()
    }
}

fn soba(cmd: &str, args: &[String], more: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soba"))
        .arg(cmd)
        .args(args)
        .args(more)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Error kind from the JSON line on stderr of a failed run.
fn error_kind(out: Output) -> String {
    assert_eq!(out.status.code(), Some(2), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let line = String::from_utf8(out.stderr).unwrap();
    let v: Value = serde_json::from_str(line.trim().lines().last().unwrap()).unwrap();
    v["error"].as_str().unwrap().to_string()
}

/// Corpus plus trained stage-one and stage-two checkpoints under `runs/`.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture {
            root: dir.path().to_path_buf(),
            _dir: dir,
        };
        let args = f.args(&f.runs(), &[]);
        ok(soba("generate", &args, &[]));
        ok(soba("train-seg", &args, &[]));
        ok(soba("train-vqa", &args, &[]));
        f
    })
}

fn record(dir: &Path) -> ExperimentRecord {
    serde_json::from_str(&std::fs::read_to_string(dir.join("record.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let run = |force: bool| {
        let mut args = f.args(&f.runs(), &[]);
        args[1] = format!("corpus.path={}", corpus.display());
        let out = ok(soba("generate", &args, if force { &["--force"] } else { &[] }));
        assert!(out.contains("train: 6 scenes"), "{out}");
        out.lines().find(|l| l.starts_with("sha256: ")).unwrap().to_string()
    };
    let first = run(false);
    assert_eq!(first, run(true));
    let reference = Corpus::open(&f.corpus()).unwrap().manifest.sha256;
    assert_eq!(first, format!("sha256: {reference}"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let f = fixture();
    let out = soba("train-seg", &f.args(&f.runs(), &["model.depth=3"]), &[]);
    assert_eq!(error_kind(out), "config");
}

#[test]
fn missing_stage_one_is_a_state_error() {
    let f = fixture();
    let empty = f.root.join("nothing-here");
    let out = soba("train-vqa", &f.args(&empty, &[]), &[]);
    assert_eq!(error_kind(out), "state");
}

#[test]
fn unknown_sweep_axis_is_a_usage_error() {
    let f = fixture();
    let out = soba("sweep", &f.args(&f.runs(), &[]), &["--axis", "depth"]);
    assert_eq!(error_kind(out), "usage");
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let f = fixture();
    let corpus = Corpus::open(&f.corpus()).unwrap();
    let split = Split::load(&corpus, "val").unwrap();
    let records: Vec<PredictionRecord> = split
        .items
        .iter()
        .map(|item| {
            let qa = split.qa(item);
            PredictionRecord {
                scene_id: split.samples[item.scene].scene.scene_id,
                qa_index: item.qa,
                question: qa.question.clone(),
                answer: qa.answer.clone(),
                numeric: qa.numeric_value,
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("truth.jsonl");
    std::fs::write(&preds, to_jsonl(&records).unwrap()).unwrap();
    let out = dir.path().join("eval");
    ok(soba(
        "eval",
        &f.args(&f.runs(), &[]),
        &["--predictions", preds.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["oa"].as_f64(), Some(1.0));
    assert_eq!(metrics["or"].as_f64(), Some(0.0));
}

#[test]
fn evaluation_is_byte_identical_across_runs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(soba("eval", &f.args(&f.runs(), &[]), &["--split", "test", "--out", out.to_str().unwrap()]));
        (std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("predictions.jsonl")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let f = fixture();
    let (params, config, vocab) = load_checkpoint(&f.runs().join("stage2")).unwrap();
    let other = CorpusVocab {
        answers: AnswerVocab::build(5),
        questions: vocab.questions,
    };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &params, &config, &other).unwrap();
    let out = soba("eval", &f.args(&f.runs(), &[]), &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(error_kind(out), "compatibility");
}

#[test]
fn attention_dump_rows_are_distributions() {
    let f = fixture();
    let corpus = Corpus::open(&f.corpus()).unwrap();
    let entry = &corpus.manifest.scenes("val")[0];
    let sample = corpus.load_sample("val", entry.scene_id).unwrap();
    let question = sample.qa[0].question.clone();
    let query = question.split_whitespace().next().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let text = ok(soba(
        "dump-attention",
        &f.args(&f.runs(), &[]),
        &[
            "--scene-id",
            &entry.scene_id.to_string(),
            "--question",
            &question,
            "--query",
            &query,
            "--out",
            dir.path().to_str().unwrap(),
        ],
    ));
    let mut dumped = 0;
    for line in text.lines() {
        let csv = PathBuf::from(line.split(": ").nth(1).unwrap().split(" (").next().unwrap());
        let body = std::fs::read_to_string(&csv).unwrap();
        let values: Vec<f64> = body.lines().skip(1).flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
        assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let pgm = std::fs::read(csv.with_extension("pgm")).unwrap();
        let side = sample.mask.height;
        let header = format!("P5\n{side} {side}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + side * side);
        dumped += 1;
    }
    assert!(dumped > 0);
}

#[test]
fn alpha_sweep_has_one_row_per_grid_value() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("sweep");
    std::fs::create_dir_all(&runs).unwrap();
    let csv = ok(soba("sweep", &f.args(&runs, &["vqa.steps=2", "vqa.eval_every=2"]), &["--axis", "alpha"]));
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("cell,seeds,"));
    let labels: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0", "0.125", "0.25", "0.5", "1", "1.25", "2"]);
    assert!(runs.join("sweep-alpha.csv").is_file());
}

fn train_with(f: &Fixture, name: &str, extra: &[&str]) -> ExperimentRecord {
    let out = f.root.join(name);
    let stage1 = f.runs().join("stage1");
    let mut settings = vec!["vqa.steps=12", "vqa.eval_every=12"];
    settings.extend_from_slice(extra);
    ok(soba("train-vqa", &f.args(&out, &settings), &["--stage1", stage1.to_str().unwrap()]));
    record(&out)
}

#[test]
fn zero_alpha_trains_exactly_like_cross_entropy() {
    let f = fixture();
    let nd = train_with(f, "nd-zero", &["loss.kind=nd", "loss.alpha=0"]);
    let ce = train_with(f, "ce", &["loss.kind=ce"]);
    assert_eq!(nd.classification_loss, ce.classification_loss);
    assert_eq!(nd.regression_loss, ce.regression_loss);
    assert!(nd.regression_loss.iter().any(|&l| l > 0.0));
}

#[test]
fn larger_alpha_inflates_early_counting_loss() {
    let f = fixture();
    let strong = train_with(f, "alpha-2", &["loss.kind=nd", "loss.alpha=2"]);
    let weak = train_with(f, "alpha-half", &["loss.kind=nd", "loss.alpha=0.5"]);
    let early = |r: &ExperimentRecord| r.regression_loss[..5].iter().sum::<f64>();
    assert!(early(&strong) > early(&weak), "{} vs {}", early(&strong), early(&weak));
}
