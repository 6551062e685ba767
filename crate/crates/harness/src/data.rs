//! In-memory splits, question items, prompt caches and augmentation.

use std::collections::HashMap;

use soba_core::corpus::{Corpus, CorpusVocab, Sample};
use soba_core::loss::AnswerTarget;
use soba_core::model::Soba;
use soba_core::qa::{Category, QAPair};
use soba_core::Tensor;

use crate::Result;

/// One question of one scene, encoded against the corpus vocabulary.
#[derive(Clone, Debug)]
pub struct Item {
    pub scene: usize,
    pub qa: usize,
    pub tokens: Vec<usize>,
    pub target: AnswerTarget,
    pub category: Category,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    pub samples: Vec<Sample>,
    pub items: Vec<Item>,
}

impl Split {
    pub fn load(corpus: &Corpus, name: &str) -> Result<Self> {
        let samples = corpus.load_split(name)?;
        let items = encode_items(&samples, &corpus.vocab)?;
        Ok(Self {
            name: name.to_string(),
            samples,
            items,
        })
    }

    pub fn qa(&self, item: &Item) -> &QAPair {
        &self.samples[item.scene].qa[item.qa]
    }
}

pub fn encode_items(samples: &[Sample], vocab: &CorpusVocab) -> Result<Vec<Item>> {
    let mut cache: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut items = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (qi, qa) in s.qa.iter().enumerate() {
            let tokens = match cache.get(qa.question.as_str()) {
                Some(t) => t.clone(),
                None => {
                    let t = vocab.questions.encode(&qa.question)?;
                    cache.insert(&qa.question, t.clone());
                    t
                }
            };
            items.push(Item {
                scene: si,
                qa: qi,
                tokens,
                target: AnswerTarget {
                    class: vocab.answers.require(&qa.answer)?,
                    numeric: qa.numeric_value,
                },
                category: qa.category,
            });
        }
    }
    Ok(items)
}

/// Frozen-segmenter outputs of one scene.
#[derive(Clone, Debug)]
pub struct Prompt {
    /// `[C×H'×W']`.
    pub fv: Tensor<f64>,
    pub mask: Vec<u8>,
}

const SEG_CHUNK: usize = 16;

/// Runs the segmenter once per scene.
pub fn prompts(model: &Soba<f64>, samples: &[Sample]) -> Result<Vec<Prompt>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SEG_CHUNK) {
        let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|s| &s.image).collect();
        for o in model.segment_eval(&imgs)? {
            out.push(Prompt { fv: o.fv, mask: o.mask });
        }
    }
    Ok(out)
}

/// One of the eight symmetries of the square: `op & 3` quarter turns, then a
/// horizontal flip if `op & 4`.
pub fn dihedral_index(op: u8, n: usize, i: usize, j: usize) -> (usize, usize) {
    let (mut r, mut c) = (i, j);
    if op & 4 != 0 {
        c = n - 1 - c;
    }
    for _ in 0..(op & 3) {
        let (nr, nc) = (c, n - 1 - r);
        r = nr;
        c = nc;
    }
    (r, c)
}

/// Applies the same symmetry to a `[3×n×n]` image and its `n×n` mask.
pub fn augment(image: &Tensor<f64>, mask: &[u8], op: u8) -> (Tensor<f64>, Vec<u8>) {
    let n = image.shape()[1];
    if op == 0 {
        return (image.clone(), mask.to_vec());
    }
    let src = image.data();
    let mut img = vec![0.0; src.len()];
    let mut m = vec![0u8; mask.len()];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = dihedral_index(op, n, i, j);
            m[i * n + j] = mask[si * n + sj];
            for ch in 0..3 {
                img[ch * n * n + i * n + j] = src[ch * n * n + si * n + sj];
            }
        }
    }
    (Tensor::new(image.shape().to_vec(), img).expect("same shape"), m)
}
