//! Checkpoint evaluation, prediction files and baselines.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use soba_core::corpus::Corpus;
use soba_core::metrics::{MetricsAccumulator, MetricsReport, Prediction};
use soba_core::model::Stage2Options;

use crate::data::{prompts, Split};
use crate::train::{load_model, predict, report};
use crate::{write_file, HarnessError, Result};

/// One line of a predictions JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: u64,
    pub qa_index: usize,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub numeric: Option<u32>,
}

pub fn prediction_records(split: &Split, preds: &[Prediction]) -> Vec<PredictionRecord> {
    split
        .items
        .iter()
        .zip(preds)
        .map(|(item, p)| PredictionRecord {
            scene_id: split.samples[item.scene].scene.scene_id,
            qa_index: item.qa,
            question: split.qa(item).question.clone(),
            answer: p.answer.clone(),
            numeric: p.numeric,
        })
        .collect()
}

pub fn to_jsonl(records: &[PredictionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads a predictions file and aligns it with the split's questions.
pub fn read_predictions(path: &Path, split: &Split) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut by_key: HashMap<(u64, usize), Prediction> = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| HarnessError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        by_key.insert(
            (r.scene_id, r.qa_index),
            Prediction {
                answer: r.answer,
                numeric: r.numeric,
            },
        );
    }
    split
        .items
        .iter()
        .map(|item| {
            let key = (split.samples[item.scene].scene.scene_id, item.qa);
            by_key
                .remove(&key)
                .ok_or_else(|| HarnessError::Usage(format!("no prediction for scene {} question {}", key.0, key.1)))
        })
        .collect()
}

/// Outputs of one evaluation.
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<PredictionRecord>,
}

/// Evaluates a checkpoint, or an injected predictions file, on one split.
///
/// With injected predictions and no checkpoint, mIoU is left empty.
pub fn evaluate_split(corpus: &Corpus, split_name: &str, checkpoint: Option<&Path>, injected: Option<&Path>) -> Result<Evaluation> {
    let split = Split::load(corpus, split_name)?;
    let model = checkpoint.map(|dir| load_model(dir, &corpus.vocab)).transpose()?;
    let (report, preds) = match (&model, injected) {
        (_, Some(path)) => {
            let preds = read_predictions(path, &split)?;
            let mut acc = MetricsAccumulator::new(soba_core::geo::NUM_CLASSES);
            for (p, item) in preds.iter().zip(&split.items) {
                acc.add_answer(p, split.qa(item))?;
            }
            if let Some(m) = &model {
                for (p, s) in prompts(m, &split.samples)?.iter().zip(&split.samples) {
                    acc.add_mask(&p.mask, &s.mask.classes)?;
                }
            }
            (acc.report(), preds)
        }
        (Some(m), None) => {
            let ps = prompts(m, &split.samples)?;
            let preds = predict(m, &corpus.vocab, &split, &ps, Stage2Options::default())?;
            (report(&split, &ps, &preds)?, preds)
        }
        (None, None) => return Err(HarnessError::Usage("eval needs a checkpoint or a predictions file".into())),
    };
    Ok(Evaluation {
        records: prediction_records(&split, &preds),
        report,
    })
}

/// Writes `metrics.csv`, `metrics.json` and `predictions.jsonl`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    write_file(&dir.join("metrics.csv"), eval.report.to_csv())?;
    crate::write_json(&dir.join("metrics.json"), &eval.report)?;
    write_file(&dir.join("predictions.jsonl"), to_jsonl(&eval.records)?)
}

/// Accuracy of always answering the most frequent training answer.
pub fn majority_baseline(train: &Split, eval: &Split) -> f64 {
    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &train.items {
        *hist.entry(train.qa(item).answer.as_str()).or_default() += 1;
    }
    let best = hist.iter().max_by_key(|(_, &n)| n).map(|(a, _)| *a).unwrap_or("");
    accuracy(eval, |_| best.to_string())
}

/// Accuracy of answering each question with its most frequent training answer.
///
/// This is the best any model blind to the image can do on the training
/// distribution.
pub fn question_prior_baseline(train: &Split, eval: &Split) -> f64 {
    let mut hist: HashMap<&str, BTreeMap<&str, usize>> = HashMap::new();
    for item in &train.items {
        let qa = train.qa(item);
        *hist.entry(qa.question.as_str()).or_default().entry(qa.answer.as_str()).or_default() += 1;
    }
    let best: HashMap<&str, &str> = hist
        .iter()
        .map(|(q, h)| (*q, h.iter().max_by_key(|(_, &n)| n).map(|(a, _)| *a).unwrap_or("")))
        .collect();
    accuracy(eval, |q| best.get(q).copied().unwrap_or("").to_string())
}

fn accuracy(split: &Split, answer: impl Fn(&str) -> String) -> f64 {
    let n = split.items.len().max(1);
    let correct = split
        .items
        .iter()
        .filter(|item| {
            let qa = split.qa(item);
            answer(&qa.question) == qa.answer
        })
        .count();
    correct as f64 / n as f64
}
