//! Stage-one segmenter training and stage-two VQA training.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use soba_core::corpus::CorpusVocab;
use soba_core::loss::{self, decode_count, inverse_frequency_weights, small_object_weights, LossConfig};
use soba_core::metrics::{MetricsAccumulator, MetricsReport, Prediction};
use soba_core::model::{argmax, stack, ModelConfig, Soba, Stage2Options, SEG_PREFIX};
use soba_core::nn::{Binder, ParamStore};
use soba_core::optim::{poly_lr, Adam};
use soba_core::{Tape, Tensor};

use crate::config::RunConfig;
use crate::data::{augment, prompts, Item, Prompt, Split};
use crate::{read_json, write_json, HarnessError, Result};

/// Model configuration implied by a run config and a corpus.
pub fn model_config(cfg: &RunConfig, vocab: &CorpusVocab, image_size: usize) -> ModelConfig {
    cfg.model
        .build(image_size, vocab.questions.len(), vocab.answers.len(), vocab.answers.count_cap)
}

fn image_size(split: &Split) -> Result<usize> {
    split
        .samples
        .first()
        .map(|s| s.image.shape()[1])
        .ok_or_else(|| HarnessError::Usage(format!("split {} is empty", split.name)))
}

/// Deterministic identifier of a resolved configuration.
pub fn run_id(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    hex::encode(&digest[..6])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEval {
    pub step: usize,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct SegOutcome {
    /// Best-validation segmenter, holding only `seg.` tensors.
    pub params: ParamStore<f64>,
    pub config: ModelConfig,
    pub best_miou: f64,
    pub best_step: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<SegEval>,
}

fn seg_only(store: &ParamStore<f64>) -> ParamStore<f64> {
    let keep = |m: &BTreeMap<String, Tensor<f64>>| {
        m.iter()
            .filter(|(n, _)| n.starts_with(SEG_PREFIX))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    };
    ParamStore {
        params: keep(&store.params),
        buffers: keep(&store.buffers),
    }
}

/// Segmentation mIoU of the frozen segmenter on a split.
pub fn seg_miou(model: &Soba<f64>, split: &Split) -> Result<f64> {
    let ps = prompts(model, &split.samples)?;
    let mut acc = MetricsAccumulator::new(model.config.num_classes);
    for (p, s) in ps.iter().zip(&split.samples) {
        acc.add_mask(&p.mask, &s.mask.classes)?;
    }
    Ok(acc.report().miou.unwrap_or(0.0))
}

/// Trains the segmenter with pixel cross-entropy (or the small-object loss) and a poly schedule.
pub fn train_seg(cfg: &RunConfig, vocab: &CorpusVocab, train: &Split, val: &Split) -> Result<SegOutcome> {
    let mcfg = model_config(cfg, vocab, image_size(train)?);
    let mut model = Soba::<f64>::new(mcfg.clone(), cfg.run.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    rng.set_stream(2);
    let mut adam = Adam::default();
    let steps = cfg.seg.steps;
    let b = cfg.seg.batch_size;
    let som = cfg.seg.loss == "som";
    let (mut best_miou, mut best_step) = (f64::NEG_INFINITY, 0);
    let mut best = seg_only(&model.params);
    let mut losses = Vec::with_capacity(steps);
    let mut evals = Vec::new();
    for step in 0..steps {
        let lr = poly_lr(step, steps, cfg.seg.lr);
        let mut images = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for _ in 0..b {
            let s = &train.samples[rng.gen_range(0..train.samples.len())];
            let op = if cfg.seg.augment { rng.gen_range(0..8u8) } else { 0 };
            let (img, m) = augment(&s.image, &s.mask.classes, op);
            images.push(img);
            masks.push(m);
        }
        let weights: Option<Vec<Vec<f64>>> = som.then(|| {
            masks
                .iter()
                .map(|m| {
                    let n = (m.len() as f64).sqrt() as usize;
                    let mask = soba_core::geo::SemanticMask::new(n, n, m.clone()).expect("square mask");
                    small_object_weights(&mask, cfg.loss.som_area, cfg.loss.som_weight)
                })
                .collect()
        });
        let (loss_value, grads, stats) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params, true);
            let x = tape.constant(stack(&images.iter().collect::<Vec<_>>())?);
            let seg = model.segment(&mut tape, &mut binder, x)?;
            let mrefs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
            let wrefs: Option<Vec<&[f64]>> = weights.as_ref().map(|w| w.iter().map(|v| v.as_slice()).collect());
            let loss = loss::segmentation_loss(&mut tape, seg.logits, &mrefs, wrefs.as_deref())?;
            tape.backward(loss)?;
            let v = tape.value(loss).item();
            (v, binder.grads(&tape), std::mem::take(&mut binder.bn_stats))
        };
        adam.step(&mut model.params, &grads, lr)?;
        model.params.update_running(&stats)?;
        losses.push(loss_value);
        if (step + 1) % cfg.seg.eval_every.max(1) == 0 || step + 1 == steps {
            let miou = seg_miou(&model, val)?;
            evals.push(SegEval { step: step + 1, miou });
            if miou > best_miou {
                best_miou = miou;
                best_step = step + 1;
                best = seg_only(&model.params);
            }
        }
    }
    if steps == 0 {
        best_miou = seg_miou(&model, val)?;
    }
    Ok(SegOutcome {
        params: best,
        config: mcfg,
        best_miou,
        best_step,
        losses,
        evals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    pub report: MetricsReport,
}

/// Everything a stage-two run logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub config: BTreeMap<String, Value>,
    pub evals: Vec<EvalEntry>,
    pub best_step: usize,
    pub best_oa: f64,
    /// Per-step loss on non-counting questions.
    pub classification_loss: Vec<f64>,
    /// Per-step loss on counting questions.
    pub regression_loss: Vec<f64>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct VqaOutcome {
    /// Best-validation model.
    pub model: Soba<f64>,
    pub record: ExperimentRecord,
}

/// Decodes logits rows into answers; counting questions also get a numeric decode.
fn decode(row: &[f64], item: &Item, vocab: &CorpusVocab, numeric: &[(usize, u32)]) -> Prediction {
    Prediction {
        answer: vocab.answers.answer(argmax(row)).to_string(),
        numeric: item.category.is_counting().then(|| decode_count(row, numeric)),
    }
}

pub fn numeric_classes(vocab: &CorpusVocab) -> Vec<(usize, u32)> {
    vocab
        .answers
        .numeric_indices()
        .into_iter()
        .map(|i| (i, vocab.answers.numeric(i).expect("numeric entry")))
        .collect()
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode predictions for every item of a split.
pub fn predict(model: &Soba<f64>, vocab: &CorpusVocab, split: &Split, prompts: &[Prompt], opts: Stage2Options) -> Result<Vec<Prediction>> {
    let numeric = numeric_classes(vocab);
    let mut out = Vec::with_capacity(split.items.len());
    for chunk in split.items.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let logits = stage2_logits(model, &mut tape, &mut binder, chunk, prompts, opts)?;
        let a = model.config.answer_vocab;
        let data = tape.value(logits).data();
        for (i, item) in chunk.iter().enumerate() {
            out.push(decode(&data[i * a..(i + 1) * a], item, vocab, &numeric));
        }
    }
    Ok(out)
}

fn stage2_logits(
    model: &Soba<f64>,
    tape: &mut Tape<f64>,
    binder: &mut Binder<f64>,
    items: &[Item],
    prompts: &[Prompt],
    opts: Stage2Options,
) -> Result<soba_core::Var> {
    let fvs: Vec<&Tensor<f64>> = items.iter().map(|it| &prompts[it.scene].fv).collect();
    let fv = tape.constant(stack(&fvs)?);
    let masks: Vec<&[u8]> = items.iter().map(|it| prompts[it.scene].mask.as_slice()).collect();
    let qs: Vec<&[usize]> = items.iter().map(|it| it.tokens.as_slice()).collect();
    Ok(model.stage2(tape, binder, fv, &masks, &qs, opts)?.logits)
}

/// Metrics of predictions on a split, with pseudo-mask mIoU.
pub fn report(split: &Split, prompts: &[Prompt], preds: &[Prediction]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(soba_core::geo::NUM_CLASSES);
    for (p, item) in preds.iter().zip(&split.items) {
        acc.add_answer(p, split.qa(item))?;
    }
    for (p, s) in prompts.iter().zip(&split.samples) {
        acc.add_mask(&p.mask, &s.mask.classes)?;
    }
    Ok(acc.report())
}

/// Data shared by stage-two runs on one frozen segmenter.
pub struct Stage2Data<'a> {
    pub vocab: &'a CorpusVocab,
    pub segmenter: &'a ParamStore<f64>,
    pub train: &'a Split,
    pub val: &'a Split,
    pub train_prompts: &'a [Prompt],
    pub val_prompts: &'a [Prompt],
}

/// Frozen-segmenter prompts for a split.
pub fn split_prompts(cfg: &RunConfig, vocab: &CorpusVocab, segmenter: &ParamStore<f64>, split: &Split) -> Result<Vec<Prompt>> {
    let mut model = Soba::<f64>::new(model_config(cfg, vocab, image_size(split)?), 0)?;
    model.load_segmenter(segmenter)?;
    prompts(&model, &split.samples)
}

/// Trains stage two on cached prompts; the segmenter stays frozen.
pub fn train_vqa(cfg: &RunConfig, data: &Stage2Data) -> Result<VqaOutcome> {
    let started = Instant::now();
    let mcfg = model_config(cfg, data.vocab, image_size(data.train)?);
    let mut model = Soba::<f64>::new(mcfg, cfg.run.seed)?;
    model.load_segmenter(data.segmenter)?;
    let opts = Stage2Options {
        zero_visual: cfg.vqa.question_only,
        unit_gate: false,
    };
    let numeric = numeric_classes(data.vocab);
    let class_weights = inverse_frequency_weights(
        &data.train.items.iter().map(|i| i.target.class).collect::<Vec<_>>(),
        data.vocab.answers.len(),
    );
    let loss_cfg: &LossConfig = &cfg.loss;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    rng.set_stream(3);
    let mut adam = Adam::default();
    let steps = cfg.vqa.steps;
    let mut cls_series = Vec::with_capacity(steps);
    let mut reg_series = Vec::with_capacity(steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, usize, Soba<f64>)> = None;
    let mut batch = Vec::with_capacity(cfg.vqa.batch_size);
    for step in 0..steps {
        let lr = poly_lr(step, steps, cfg.vqa.lr);
        batch.clear();
        for _ in 0..cfg.vqa.batch_size {
            batch.push(data.train.items[rng.gen_range(0..data.train.items.len())].clone());
        }
        let targets: Vec<_> = batch.iter().map(|i| i.target).collect();
        let (parts, grads, stats) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params, true).freeze(SEG_PREFIX);
            let logits = stage2_logits(&model, &mut tape, &mut binder, &batch, data.train_prompts, opts)?;
            let parts = loss::vqa_loss(&mut tape, logits, &targets, &numeric, Some(&class_weights), loss_cfg)?;
            tape.backward(parts.total)?;
            (parts, binder.grads(&tape), std::mem::take(&mut binder.bn_stats))
        };
        adam.step(&mut model.params, &grads, lr)?;
        model.params.update_running(&stats)?;
        cls_series.push(parts.classification);
        reg_series.push(parts.regression);
        if (step + 1) % cfg.vqa.eval_every.max(1) == 0 || step + 1 == steps {
            let preds = predict(&model, data.vocab, data.val, data.val_prompts, opts)?;
            let rep = report(data.val, data.val_prompts, &preds)?;
            let oa = rep.oa.unwrap_or(0.0);
            evals.push(EvalEntry { step: step + 1, report: rep });
            if best.as_ref().is_none_or(|(b, _, _)| oa > *b) {
                best = Some((oa, step + 1, model.clone()));
            }
        }
    }
    let (best_oa, best_step, best_model) = match best {
        Some(b) => b,
        None => {
            let preds = predict(&model, data.vocab, data.val, data.val_prompts, opts)?;
            let rep = report(data.val, data.val_prompts, &preds)?;
            let oa = rep.oa.unwrap_or(0.0);
            evals.push(EvalEntry { step: 0, report: rep });
            (oa, 0, model)
        }
    };
    Ok(VqaOutcome {
        model: best_model,
        record: ExperimentRecord {
            run_id: run_id(cfg),
            config: cfg.to_flat(),
            evals,
            best_step,
            best_oa,
            classification_loss: cls_series,
            regression_loss: reg_series,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
    })
}

/// Checkpoint directory: tensors, `config.json` and `vocab.json`.
pub fn save_checkpoint(dir: &Path, params: &ParamStore<f64>, config: &ModelConfig, vocab: &CorpusVocab) -> Result<()> {
    params.save(dir)?;
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("vocab.json"), vocab)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f64>, ModelConfig, CorpusVocab)> {
    if !dir.join("index.json").is_file() {
        return Err(HarnessError::State(format!("no checkpoint at {}", dir.display())));
    }
    let params = ParamStore::load(dir)?;
    let config: ModelConfig = read_json(&dir.join("config.json"))?;
    let vocab: CorpusVocab = read_json(&dir.join("vocab.json"))?;
    let vocab = CorpusVocab {
        answers: vocab.answers.reindexed(),
        questions: vocab.questions.reindexed(),
    };
    Ok((params, config, vocab))
}

/// Loads a full model checkpoint and checks its vocabulary against the corpus.
pub fn load_model(dir: &Path, corpus_vocab: &CorpusVocab) -> Result<Soba<f64>> {
    let (params, config, vocab) = load_checkpoint(dir)?;
    if vocab != *corpus_vocab {
        return Err(HarnessError::Compatibility(format!(
            "checkpoint vocabulary ({} answers, {} words) differs from the corpus ({} answers, {} words)",
            vocab.answers.len(),
            vocab.questions.len(),
            corpus_vocab.answers.len(),
            corpus_vocab.questions.len()
        )));
    }
    let mut model = Soba::new(config, 0)?;
    if model.params.params.keys().ne(params.params.keys()) {
        return Err(HarnessError::Compatibility("checkpoint tensors do not match the model configuration".into()));
    }
    model.params = params;
    Ok(model)
}
