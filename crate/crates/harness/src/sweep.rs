//! Multi-seed ablation grids over one corpus.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use soba_core::corpus::{Corpus, CorpusVocab};
use soba_core::loss::LossKind;
use soba_core::metrics::MetricsReport;
use soba_core::model::{BcaOrder, OgaVariant, Stage2Options};
use soba_core::nn::ParamStore;

use crate::config::RunConfig;
use crate::data::{Prompt, Split};
use crate::train::{self, predict, report, split_prompts, ExperimentRecord, Stage2Data, VqaOutcome};
use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Gamma,
    BcaOrder,
    LossKind,
    OgaVariant,
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha" => Self::Alpha,
            "gamma" => Self::Gamma,
            "bca_order" => Self::BcaOrder,
            "loss_kind" => Self::LossKind,
            "oga_variant" => Self::OgaVariant,
            other => {
                return Err(HarnessError::Usage(format!(
                    "unknown sweep axis {other:?}; expected alpha, gamma, bca_order, loss_kind or oga_variant"
                )))
            }
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Gamma => "gamma",
            Self::BcaOrder => "bca_order",
            Self::LossKind => "loss_kind",
            Self::OgaVariant => "oga_variant",
        }
    }
}

pub const PENALTY_GRID: [f64; 7] = [0.0, 0.125, 0.25, 0.5, 1.0, 1.25, 2.0];

/// One grid cell: a label and the config keys it overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub overrides: Vec<(&'static str, Value)>,
}

pub fn cells(axis: Axis) -> Vec<Cell> {
    let nd = |key: &'static str, v: f64| Cell {
        label: format!("{v}"),
        overrides: vec![("loss.kind", Value::from("nd")), (key, Value::from(v))],
    };
    match axis {
        Axis::Alpha => PENALTY_GRID.iter().map(|&v| nd("loss.alpha", v)).collect(),
        Axis::Gamma => PENALTY_GRID.iter().map(|&v| nd("loss.gamma", v)).collect(),
        Axis::BcaOrder => BcaOrder::ALL
            .iter()
            .map(|o| Cell {
                label: o.name().to_string(),
                overrides: vec![("model.bca_order", Value::from(o.name()))],
            })
            .collect(),
        Axis::LossKind => LossKind::ALL
            .iter()
            .map(|k| Cell {
                label: k.name().to_string(),
                overrides: if *k == LossKind::Som {
                    // The small-object loss weights segmentation pixels; the answer head keeps CE.
                    vec![("seg.loss", Value::from("som")), ("loss.kind", Value::from("ce"))]
                } else {
                    vec![("loss.kind", Value::from(k.name()))]
                },
            })
            .collect(),
        Axis::OgaVariant => [OgaVariant::ConcatOnly, OgaVariant::SeGate, OgaVariant::Oga]
            .iter()
            .map(|v| Cell {
                label: v.name().to_string(),
                overrides: vec![("model.oga_variant", Value::from(v.name()))],
            })
            .collect(),
    }
}

/// A trained segmenter and its cached prompts.
pub struct Stage1 {
    pub params: ParamStore<f64>,
    pub val_miou: f64,
    pub train_prompts: Vec<Prompt>,
    pub val_prompts: Vec<Prompt>,
    pub test_prompts: Vec<Prompt>,
}

/// Loaded splits plus segmenters keyed by stage-one loss.
pub struct Experiment {
    pub base: RunConfig,
    pub vocab: CorpusVocab,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    stage1: BTreeMap<String, Stage1>,
}

/// Outcome of one stage-two run scored on the test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub val_oa: f64,
    pub test: MetricsReport,
    pub record: ExperimentRecord,
}

impl Experiment {
    pub fn open(base: &RunConfig) -> Result<Self> {
        let corpus = Corpus::open(&base.corpus.path)?;
        Ok(Self {
            base: base.clone(),
            train: Split::load(&corpus, "train")?,
            val: Split::load(&corpus, "val")?,
            test: Split::load(&corpus, "test")?,
            vocab: corpus.vocab,
            stage1: BTreeMap::new(),
        })
    }

    /// Registers an already trained segmenter for a stage-one loss.
    pub fn insert_stage1(&mut self, seg_loss: &str, params: ParamStore<f64>, val_miou: f64) -> Result<()> {
        let stage = Stage1 {
            train_prompts: split_prompts(&self.base, &self.vocab, &params, &self.train)?,
            val_prompts: split_prompts(&self.base, &self.vocab, &params, &self.val)?,
            test_prompts: split_prompts(&self.base, &self.vocab, &params, &self.test)?,
            params,
            val_miou,
        };
        self.stage1.insert(seg_loss.to_string(), stage);
        Ok(())
    }

    /// Segmenter for a stage-one loss, trained with the base seed on first use.
    pub fn stage1(&mut self, seg_loss: &str) -> Result<&Stage1> {
        if !self.stage1.contains_key(seg_loss) {
            let cfg = self.base.with(&[("seg.loss", Value::from(seg_loss))])?;
            let out = train::train_seg(&cfg, &self.vocab, &self.train, &self.val)?;
            self.insert_stage1(seg_loss, out.params, out.best_miou)?;
        }
        Ok(&self.stage1[seg_loss])
    }

    /// Trains stage two under `cfg` and returns the best-val model.
    pub fn train_stage2(&mut self, cfg: &RunConfig) -> Result<VqaOutcome> {
        self.stage1(&cfg.seg.loss)?;
        let s1 = &self.stage1[&cfg.seg.loss];
        let data = Stage2Data {
            vocab: &self.vocab,
            segmenter: &s1.params,
            train: &self.train,
            val: &self.val,
            train_prompts: &s1.train_prompts,
            val_prompts: &s1.val_prompts,
        };
        train::train_vqa(cfg, &data)
    }

    /// Trains stage two and scores the best-val model on the test split.
    pub fn run(&mut self, cfg: &RunConfig) -> Result<RunSummary> {
        let out = self.train_stage2(cfg)?;
        let s1 = &self.stage1[&cfg.seg.loss];
        let opts = Stage2Options {
            zero_visual: cfg.vqa.question_only,
            unit_gate: false,
        };
        let preds = predict(&out.model, &self.vocab, &self.test, &s1.test_prompts, opts)?;
        Ok(RunSummary {
            seed: cfg.run.seed,
            val_oa: out.record.best_oa,
            test: report(&self.test, &s1.test_prompts, &preds)?,
            record: out.record,
        })
    }
}

/// Per-cell aggregate over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub runs: Vec<RunSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl SweepRow {
    pub fn oa(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test.oa.unwrap_or(0.0)).collect()
    }

    pub fn or(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test.or.unwrap_or(f64::NAN)).collect()
    }
}

pub const TABLE_HEADER: &str = "cell,seeds,mean_oa,std_oa,median_oa,mean_or,std_or,median_or,mean_miou";

/// Mean ± std table with one row per cell; accuracies are fractions.
pub fn table(rows: &[SweepRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let (oa, oa_sd) = mean_std(&r.oa());
        let (or, or_sd) = mean_std(&r.or());
        let miou: Vec<f64> = r.runs.iter().map(|x| x.test.miou.unwrap_or(0.0)).collect();
        out.push_str(&format!(
            "{},{},{oa:.6},{oa_sd:.6},{:.6},{or:.6},{or_sd:.6},{:.6},{:.6}\n",
            r.label,
            r.runs.len(),
            median(&r.oa()),
            median(&r.or()),
            mean_std(&miou).0
        ));
    }
    out
}

/// Runs every cell of `axis` over the base config's seed list.
pub fn run_sweep(exp: &mut Experiment, axis: Axis, mut progress: impl FnMut(&str, u64, &RunSummary)) -> Result<Vec<SweepRow>> {
    if exp.base.sweep.seeds.is_empty() {
        return Err(HarnessError::Usage("sweep.seeds is empty".into()));
    }
    let mut rows = Vec::new();
    for cell in cells(axis) {
        let mut runs = Vec::new();
        for &seed in &exp.base.sweep.seeds.clone() {
            let mut ov = cell.overrides.clone();
            ov.push(("run.seed", Value::from(seed)));
            let cfg = exp.base.with(&ov)?;
            let summary = exp.run(&cfg)?;
            progress(&cell.label, seed, &summary);
            runs.push(summary);
        }
        rows.push(SweepRow { label: cell.label, runs });
    }
    Ok(rows)
}
