use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soba_core::corpus::{build_corpus, Corpus, CorpusSpec};
use soba_harness::config::{parse_override, RunConfig};
use soba_harness::data::Split;
use soba_harness::eval::{evaluate_split, write_evaluation};
use soba_harness::sweep::{run_sweep, table, Axis, Experiment};
use soba_harness::train::{self, load_checkpoint, load_model, save_checkpoint, split_prompts, Stage2Data};
use soba_harness::{write_file, write_json, HarnessError, Result};

#[derive(Parser)]
#[command(name = "soba", about = "Segmentation-guided remote sensing VQA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train the segmenter; writes `<out_dir>/stage1`.
    TrainSeg {
        #[command(flatten)]
        common: Common,
    },
    /// Train the VQA stage on a frozen segmenter; writes `<out_dir>/stage2`.
    TrainVqa {
        #[command(flatten)]
        common: Common,
        /// Stage-one checkpoint, default `<out_dir>/stage1`.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a predictions file on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint, default `<out_dir>/stage2`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Score this predictions JSONL instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Output directory, default `<out_dir>/eval-<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed ablation over one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, gamma, bca_order, loss_kind or oga_variant.
        #[arg(long)]
        axis: String,
    },
    /// Dump language-query cross-attention maps for one scene.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene_id: u64,
        #[arg(long)]
        question: String,
        /// Question word whose attention row is dumped.
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if !cfg.corpus.path.join("manifest.json").is_file() {
        return Err(HarnessError::Usage(format!("no corpus at {}; run `soba generate`", cfg.corpus.path.display())));
    }
    Ok(Corpus::open(&cfg.corpus.path)?)
}

fn stage_dir(cfg: &RunConfig, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.run.out_dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let cfg = common.resolve()?;
            let c = &cfg.corpus;
            let spec = CorpusSpec::new(c.n_train, c.n_val, c.n_test, c.seed);
            let m = build_corpus(&c.path, &spec, force)?;
            cfg.write_resolved(&c.path)?;
            for (name, scenes) in &m.splits {
                let qa: usize = scenes.iter().map(|s| s.qa_count).sum();
                println!("{name}: {} scenes, {qa} questions", scenes.len());
            }
            println!("answers: {}, words: {}", m.answer_vocab_size, m.question_vocab_size);
            println!("sha256: {}", m.sha256);
        }
        Command::TrainSeg { common } => {
            let cfg = common.resolve()?;
            let corpus = open_corpus(&cfg)?;
            let train = Split::load(&corpus, "train")?;
            let val = Split::load(&corpus, "val")?;
            let out = train::train_seg(&cfg, &corpus.vocab, &train, &val)?;
            let dir = cfg.run.out_dir.join("stage1");
            cfg.write_resolved(&cfg.run.out_dir)?;
            save_checkpoint(&dir, &out.params, &out.config, &corpus.vocab)?;
            write_json(
                &cfg.run.out_dir.join("stage1_log.json"),
                &serde_json::json!({ "losses": out.losses, "evals": out.evals, "best_step": out.best_step, "best_miou": out.best_miou }),
            )?;
            println!("best val mIoU {:.6} at step {}", out.best_miou, out.best_step);
        }
        Command::TrainVqa { common, stage1 } => {
            let cfg = common.resolve()?;
            let corpus = open_corpus(&cfg)?;
            let (segmenter, _, _) = load_checkpoint(&stage_dir(&cfg, stage1, "stage1"))?;
            let train_split = Split::load(&corpus, "train")?;
            let val = Split::load(&corpus, "val")?;
            let train_prompts = split_prompts(&cfg, &corpus.vocab, &segmenter, &train_split)?;
            let val_prompts = split_prompts(&cfg, &corpus.vocab, &segmenter, &val)?;
            let data = Stage2Data {
                vocab: &corpus.vocab,
                segmenter: &segmenter,
                train: &train_split,
                val: &val,
                train_prompts: &train_prompts,
                val_prompts: &val_prompts,
            };
            let out = train::train_vqa(&cfg, &data)?;
            cfg.write_resolved(&cfg.run.out_dir)?;
            save_checkpoint(&cfg.run.out_dir.join("stage2"), &out.model.params, &out.model.config, &corpus.vocab)?;
            write_json(&cfg.run.out_dir.join("record.json"), &out.record)?;
            if let Some(best) = out.record.evals.iter().find(|e| e.step == out.record.best_step) {
                write_file(&cfg.run.out_dir.join("val_metrics.csv"), best.report.to_csv())?;
            }
            println!("best val OA {:.6} at step {}", out.record.best_oa, out.record.best_step);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            predictions,
            out,
        } => {
            let cfg = common.resolve()?;
            let corpus = open_corpus(&cfg)?;
            let ckpt = match (&checkpoint, &predictions) {
                (Some(c), _) => Some(c.clone()),
                (None, None) => Some(cfg.run.out_dir.join("stage2")),
                (None, Some(_)) => None,
            };
            let ev = evaluate_split(&corpus, &split, ckpt.as_deref(), predictions.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.join(format!("eval-{split}")));
            cfg.write_resolved(&dir)?;
            write_evaluation(&dir, &ev)?;
            print!("{}", ev.report.to_csv());
        }
        Command::Sweep { common, axis } => {
            let cfg = common.resolve()?;
            let axis: Axis = axis.parse()?;
            open_corpus(&cfg)?;
            let mut exp = Experiment::open(&cfg)?;
            let stage1 = cfg.run.out_dir.join("stage1");
            if cfg.seg.loss == "ce" && stage1.join("index.json").is_file() {
                let (params, _, _) = load_checkpoint(&stage1)?;
                exp.insert_stage1("ce", params, f64::NAN)?;
            }
            let rows = run_sweep(&mut exp, axis, |cell, seed, r| {
                eprintln!("{cell} seed {seed}: test OA {:.4} OR {:.4}", r.test.oa.unwrap_or(0.0), r.test.or.unwrap_or(f64::NAN));
            })?;
            let csv = table(&rows);
            let stem = format!("sweep-{}", axis.name());
            cfg.write_resolved(&cfg.run.out_dir)?;
            write_file(&cfg.run.out_dir.join(format!("{stem}.csv")), &csv)?;
            write_json(&cfg.run.out_dir.join(format!("{stem}.json")), &rows)?;
            print!("{csv}");
        }
        Command::DumpAttention {
            common,
            checkpoint,
            scene_id,
            question,
            query,
            out,
        } => {
            let cfg = common.resolve()?;
            let corpus = open_corpus(&cfg)?;
            let model = load_model(&stage_dir(&cfg, checkpoint, "stage2"), &corpus.vocab)?;
            let split = corpus
                .split_of(scene_id)
                .ok_or_else(|| HarnessError::Usage(format!("scene {scene_id} is not in the corpus")))?
                .to_string();
            let sample = corpus.load_sample(&split, scene_id)?;
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.join(format!("attention-{scene_id}")));
            let maps = soba_harness::attention::dump_attention(&model, &corpus.vocab, &sample, &question, &query, &dir)?;
            for m in &maps {
                println!("block {}: {} (row sum {:.6})", m.block, m.csv.display(), m.values.iter().sum::<f64>());
            }
        }
        Command::Gradcheck { seeds } => {
            let results = soba_core::checks::run_all(&seeds)?;
            println!("check,seed,max_rel_error,tolerance,coordinates,kinked,passed");
            let mut failed = 0;
            for r in &results {
                println!("{},{},{:.3e},{:.0e},{},{},{}", r.name, r.seed, r.max_rel_error, r.tolerance, r.coordinates, r.kinked, r.passed());
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(HarnessError::State(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn error_kind(e: &HarnessError) -> &'static str {
    match e {
        HarnessError::Config(_) => "config",
        HarnessError::Usage(_) => "usage",
        HarnessError::State(_) => "state",
        HarnessError::Compatibility(_) => "compatibility",
        HarnessError::Io { .. } => "io",
        HarnessError::Corpus(_) => "corpus",
        HarnessError::Model(_) => "model",
        HarnessError::Tensor(_) => "tensor",
        HarnessError::Loss(_) => "loss",
        HarnessError::Metrics(_) => "metrics",
        HarnessError::Qa(_) => "qa",
        HarnessError::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
