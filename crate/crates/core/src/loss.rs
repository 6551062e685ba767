//! Answer-classification losses, including the numerical-difference loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Nd,
    Focal,
    Ohem,
    Diw,
    /// Small-object weighted pixel loss; segmentation only.
    Som,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [LossKind::Ce, LossKind::Nd, LossKind::Focal, LossKind::Ohem, LossKind::Diw, LossKind::Som];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Nd => "nd",
            LossKind::Focal => "focal",
            LossKind::Ohem => "ohem",
            LossKind::Diw => "diw",
            LossKind::Som => "som",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LossError::Config(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub gamma: f64,
    pub focal_gamma: f64,
    pub ohem_keep: f64,
    /// Extra weight of pixels in small components (segmentation loss).
    pub som_weight: f64,
    /// Components below this many pixels count as small.
    pub som_area: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Nd,
            alpha: 1.0,
            gamma: 0.5,
            focal_gamma: 2.0,
            ohem_keep: 0.7,
            som_weight: 1.0,
            som_area: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(LossError::Config(format!("alpha {} and gamma {} must be non-negative", self.alpha, self.gamma)));
        }
        if !(self.focal_gamma >= 0.0) || !(self.ohem_keep > 0.0 && self.ohem_keep <= 1.0) || !(self.som_weight >= 0.0) {
            return Err(LossError::Config("focal_gamma >= 0, 0 < ohem_keep <= 1 and som_weight >= 0 required".into()));
        }
        Ok(())
    }
}

/// `1 + α|y_pr − y_gt|^γ`, with no penalty at zero difference.
pub fn nd_multiplier(y_pr: f64, y_gt: f64, alpha: f64, gamma: f64) -> f64 {
    let diff = (y_pr - y_gt).abs();
    if diff == 0.0 {
        1.0
    } else {
        1.0 + alpha * diff.powf(gamma)
    }
}

/// `−Σ yᵢ log pᵢ` with the log clamped at 1e-12.
pub fn ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(LossError::Usage(format!("{} probabilities for {} targets", p.len(), y.len())));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
        return Err(LossError::Usage(format!("probabilities sum to {total}, not 1")));
    }
    Ok(p.iter().zip(y).map(|(&pi, &yi)| -yi * pi.max(LOG_CLAMP).ln()).sum())
}

/// CE scaled by the detached ND multiplier on counting questions.
pub fn nd_loss(p: &[f64], y: &[f64], y_pr: f64, y_gt: f64, alpha: f64, gamma: f64, is_counting: bool) -> Result<f64> {
    if alpha < 0.0 || gamma < 0.0 {
        return Err(LossError::Config(format!("alpha {alpha} and gamma {gamma} must be non-negative")));
    }
    let m = if is_counting { nd_multiplier(y_pr, y_gt, alpha, gamma) } else { 1.0 };
    Ok(m * ce_loss(p, y)?)
}

/// Ground truth of one question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnswerTarget {
    pub class: usize,
    /// Count of the true answer on counting questions.
    pub numeric: Option<u32>,
}

/// Batch loss with its classification and regression shares.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Contribution of non-counting questions to `total`.
    pub classification: f64,
    /// Contribution of counting questions to `total`.
    pub regression: f64,
}

/// Count decoded from a logit row restricted to the numeric answers.
pub fn decode_count<T: Scalar>(row: &[T], numeric: &[(usize, u32)]) -> u32 {
    let mut best = numeric[0];
    for &(i, v) in numeric {
        if row[i] > row[best.0] {
            best = (i, v);
        }
    }
    best.1
}

/// Mean batch loss of `logits [B×A]`.
///
/// `numeric` lists `(class index, count)` of the numeric answers; `class_weights`
/// is the per-class weight of the inverse-frequency loss.
pub fn vqa_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[AnswerTarget],
    numeric: &[(usize, u32)],
    class_weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    let s = tape.shape(logits).to_vec();
    let (b, a) = (s[0], s[1]);
    if targets.len() != b {
        return Err(LossError::Usage(format!("{} targets for {b} rows", targets.len())));
    }
    let classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    let logp = tape.log_softmax(logits)?;
    let inv_b = 1.0 / b as f64;
    let per_sample_ce: Vec<f64> = {
        let lp = tape.value(logp).data();
        classes.iter().enumerate().map(|(i, &c)| -lp[i * a + c].as_f64()).collect()
    };

    let weights: Vec<f64> = match cfg.kind {
        LossKind::Ce => vec![inv_b; b],
        LossKind::Nd => {
            if numeric.is_empty() {
                return Err(LossError::Usage("nd loss needs numeric answer classes".into()));
            }
            let ld = tape.value(logits).data();
            targets
                .iter()
                .enumerate()
                .map(|(i, t)| match t.numeric {
                    Some(gt) => {
                        let pr = decode_count(&ld[i * a..(i + 1) * a], numeric);
                        nd_multiplier(pr as f64, gt as f64, cfg.alpha, cfg.gamma) * inv_b
                    }
                    None => inv_b,
                })
                .collect()
        }
        LossKind::Ohem => {
            let keep = ((cfg.ohem_keep * b as f64).ceil() as usize).clamp(1, b);
            let mut order: Vec<usize> = (0..b).collect();
            order.sort_by(|&i, &j| per_sample_ce[j].total_cmp(&per_sample_ce[i]).then(i.cmp(&j)));
            let mut w = vec![0.0; b];
            for &i in &order[..keep] {
                w[i] = 1.0 / keep as f64;
            }
            w
        }
        LossKind::Diw => {
            let cw = class_weights.ok_or_else(|| LossError::Usage("diw loss needs class weights".into()))?;
            if cw.len() != a {
                return Err(LossError::Usage(format!("{} class weights for {a} classes", cw.len())));
            }
            classes.iter().map(|&c| cw[c] * inv_b).collect()
        }
        LossKind::Focal => {
            return focal(tape, logp, &classes, targets, cfg.focal_gamma, &per_sample_ce);
        }
        LossKind::Som => {
            return Err(LossError::Usage("som is a segmentation loss and cannot train the answer head".into()));
        }
    };
    let tw: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
    let total = tape.weighted_nll(logp, &classes, &tw)?;
    let (mut cls, mut reg) = (0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let v = weights[i] * per_sample_ce[i];
        if t.numeric.is_some() {
            reg += v;
        } else {
            cls += v;
        }
    }
    Ok(LossParts {
        total,
        classification: cls,
        regression: reg,
    })
}

/// `mean(−(1 − p_t)^γ log p_t)`.
fn focal<T: Scalar>(tape: &mut Tape<T>, logp: Var, classes: &[usize], targets: &[AnswerTarget], gamma: f64, ce: &[f64]) -> Result<LossParts> {
    let b = classes.len();
    let lp = tape.pick(logp, classes)?;
    let terms = if gamma == 0.0 {
        lp
    } else {
        let p = tape.exp(lp)?;
        let q = tape.affine(p, -T::one(), T::one())?;
        let m = tape.pow_const(q, T::of(gamma))?;
        tape.mul(m, lp)?
    };
    let sum = tape.sum(terms)?;
    let total = tape.scale(sum, T::of(-1.0 / b as f64))?;
    let (mut cls, mut reg) = (0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let p = (-ce[i]).exp();
        let v = (1.0 - p).max(0.0).powf(gamma) * ce[i] / b as f64;
        if t.numeric.is_some() {
            reg += v;
        } else {
            cls += v;
        }
    }
    Ok(LossParts {
        total,
        classification: cls,
        regression: reg,
    })
}

/// Inverse-frequency class weights normalized to mean one over the samples.
pub fn inverse_frequency_weights(classes: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &c in classes {
        counts[c] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let n = classes.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { n / (present as f64 * c as f64) })
        .collect()
}

/// Pixel weights `1 + w` inside components smaller than `area`, else 1.
pub fn small_object_weights(mask: &crate::geo::SemanticMask, area: usize, w: f64) -> Vec<f64> {
    let mut out = vec![1.0; mask.classes.len()];
    for comp in crate::qa::label_components(mask) {
        if comp.pixels.len() < area {
            for &(r, c) in &comp.pixels {
                out[r * mask.width + c] = 1.0 + w;
            }
        }
    }
    out
}

/// Pixel loss of `logits [B×K×H×W]` against masks; `pixel_weights` are normalized to mean one per image.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, masks: &[&[u8]], pixel_weights: Option<&[&[f64]]>) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || s[0] != masks.len() {
        return Err(LossError::Usage(format!("{} masks for logits {s:?}", masks.len())));
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let perm = tape.permute(logits, &[0, 2, 3, 1])?;
    let flat = tape.reshape(perm, &[b * hw, k])?;
    let logp = tape.log_softmax(flat)?;
    let mut targets = Vec::with_capacity(b * hw);
    let mut weights = Vec::with_capacity(b * hw);
    let inv = 1.0 / (b * hw) as f64;
    for (i, m) in masks.iter().enumerate() {
        if m.len() != hw {
            return Err(LossError::Usage(format!("mask of {} pixels for {hw}-pixel logits", m.len())));
        }
        targets.extend(m.iter().map(|&c| c as usize));
        match pixel_weights {
            Some(pw) => {
                let mean = pw[i].iter().sum::<f64>() / hw as f64;
                weights.extend(pw[i].iter().map(|&w| T::of(w / mean * inv)));
            }
            None => weights.extend(std::iter::repeat_n(T::of(inv), hw)),
        }
    }
    Ok(tape.weighted_nll(logp, &targets, &weights)?)
}
