//! The two-stage SOBA model.
//!
//! Stage one is a small convolutional segmenter whose encoder output is the
//! visual prompt `F_v` and whose argmax is the pseudo mask `M_v`. Stage two
//! fuses the two with object-guided channel attention, turns the result into
//! tokens, and runs visual self-attention, an LSTM question encoder,
//! bidirectional cross-attention and an MLP answer head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Segments, Tape, Var};
use crate::error::TensorError;
use crate::nn::{self, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which modality supplies the queries of a cross-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "L")]
    Language,
}

/// Block schedule of the cross-attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BcaOrder {
    VvvLll,
    LllVvv,
    LvLvLv,
    VlVlVl,
    Llllll,
    Vvvvvv,
    Parallel,
}

impl BcaOrder {
    pub const ALL: [BcaOrder; 7] = [
        BcaOrder::VvvLll,
        BcaOrder::LllVvv,
        BcaOrder::LvLvLv,
        BcaOrder::VlVlVl,
        BcaOrder::Llllll,
        BcaOrder::Vvvvvv,
        BcaOrder::Parallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BcaOrder::VvvLll => "VVV-LLL",
            BcaOrder::LllVvv => "LLL-VVV",
            BcaOrder::LvLvLv => "LV-LV-LV",
            BcaOrder::VlVlVl => "VL-VL-VL",
            BcaOrder::Llllll => "LLLLLL",
            BcaOrder::Vvvvvv => "VVVVVV",
            BcaOrder::Parallel => "parallel",
        }
    }

    /// Query modality of each of the `2·depth` blocks, in execution order.
    pub fn schedule(self, depth: usize) -> Vec<Modality> {
        use Modality::{Language as L, Visual as V};
        let rep = |m: Modality| std::iter::repeat_n(m, depth);
        match self {
            BcaOrder::VvvLll | BcaOrder::Parallel => rep(V).chain(rep(L)).collect(),
            BcaOrder::LllVvv => rep(L).chain(rep(V)).collect(),
            BcaOrder::LvLvLv => (0..depth).flat_map(|_| [L, V]).collect(),
            BcaOrder::VlVlVl => (0..depth).flat_map(|_| [V, L]).collect(),
            BcaOrder::Llllll => std::iter::repeat_n(L, 2 * depth).collect(),
            BcaOrder::Vvvvvv => std::iter::repeat_n(V, 2 * depth).collect(),
        }
    }
}

impl fmt::Display for BcaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BcaOrder {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        BcaOrder::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown bca order {s:?}")))
    }
}

impl TryFrom<String> for BcaOrder {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BcaOrder> for String {
    fn from(o: BcaOrder) -> String {
        o.name().to_string()
    }
}

/// Fusion of visual prompts with the embedded pseudo mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OgaVariant {
    /// Plain concatenation.
    ConcatOnly,
    /// Squeeze-excitation gate computed from and applied to the visual prompts only.
    SeGate,
    /// Gate computed from and applied to the concatenated object-guided features.
    Oga,
}

impl OgaVariant {
    pub const ALL: [OgaVariant; 3] = [OgaVariant::ConcatOnly, OgaVariant::SeGate, OgaVariant::Oga];

    pub fn name(self) -> &'static str {
        match self {
            OgaVariant::ConcatOnly => "concat-only",
            OgaVariant::SeGate => "se-gate",
            OgaVariant::Oga => "oga",
        }
    }
}

impl fmt::Display for OgaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OgaVariant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        OgaVariant::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown oga variant {s:?}")))
    }
}

impl TryFrom<String> for OgaVariant {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OgaVariant> for String {
    fn from(o: OgaVariant) -> String {
        o.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Prompt channels `C`.
    pub channels: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub vsa_depth: usize,
    /// Cross-attention blocks per stage.
    pub bca_depth: usize,
    pub stride: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
    pub word_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub oga_reduction: usize,
    pub bca_order: BcaOrder,
    pub oga_variant: OgaVariant,
    pub count_cap: u32,
    /// Bias on the token projection; convolutions followed by batch norm never carry one.
    pub conv_bias: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(question_vocab: usize, answer_vocab: usize) -> Self {
        Self {
            channels: 32,
            d_model: 32,
            ffn_hidden: 128,
            heads: 4,
            vsa_depth: 3,
            bca_depth: 3,
            stride: 8,
            image_size: 64,
            num_classes: 8,
            question_vocab,
            answer_vocab,
            word_dim: 32,
            lstm_hidden: 32,
            lstm_layers: 2,
            oga_reduction: 4,
            bca_order: BcaOrder::VvvLll,
            oga_variant: OgaVariant::Oga,
            count_cap: 9,
            conv_bias: true,
        }
    }

    /// Published full-scale sizes (1024 px tiles, stride 32, hidden 384, 8 heads).
    pub fn full(question_vocab: usize, answer_vocab: usize) -> Self {
        Self {
            channels: 2048,
            d_model: 384,
            ffn_hidden: 1536,
            heads: 8,
            image_size: 1024,
            stride: 32,
            word_dim: 384,
            lstm_hidden: 384,
            ..Self::desk(question_vocab, answer_vocab)
        }
    }

    /// Smallest configuration that exercises every component: 2×2 tokens of width 8.
    pub fn micro(question_vocab: usize, answer_vocab: usize) -> Self {
        Self {
            channels: 4,
            d_model: 8,
            ffn_hidden: 16,
            heads: 2,
            vsa_depth: 1,
            bca_depth: 1,
            stride: 8,
            image_size: 16,
            word_dim: 4,
            lstm_hidden: 4,
            oga_reduction: 4,
            ..Self::desk(question_vocab, answer_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return fail(format!("stride {} must be a power of two >= 2", self.stride));
        }
        if !self.image_size.is_multiple_of(self.stride) {
            return fail(format!("stride {} does not divide image size {}", self.stride, self.image_size));
        }
        if !(2 * self.channels).is_multiple_of(self.oga_reduction) || self.oga_reduction == 0 {
            return fail(format!("oga reduction {} does not divide {} channels", self.oga_reduction, 2 * self.channels));
        }
        let positive = [
            ("channels", self.channels),
            ("ffn_hidden", self.ffn_hidden),
            ("vsa_depth", self.vsa_depth),
            ("bca_depth", self.bca_depth),
            ("num_classes", self.num_classes),
            ("question_vocab", self.question_vocab),
            ("answer_vocab", self.answer_vocab),
            ("word_dim", self.word_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }

    /// Number of visual tokens `P`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seg_blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Output width of segmenter block `i`; the last block emits `C` channels.
    pub fn seg_width(&self, i: usize) -> usize {
        if i + 1 == self.seg_blocks() {
            self.channels
        } else {
            self.channels.min(8 << i)
        }
    }
}

/// One head-averaged attention matrix per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// `"vsa"` or `"bca"`.
    pub stage: String,
    pub block: usize,
    pub query: Modality,
    /// Row-major `[query_len × key_len]` per sample.
    pub matrices: Vec<Vec<f64>>,
    pub query_lens: Vec<usize>,
    pub key_lens: Vec<usize>,
}

impl AttentionRecord {
    pub fn row(&self, sample: usize, q: usize) -> &[f64] {
        let k = self.key_lens[sample];
        &self.matrices[sample][q * k..(q + 1) * k]
    }
}

/// Tape handles of a segmenter pass.
#[derive(Clone, Copy, Debug)]
pub struct SegVars {
    /// `[B×C×H'×W']`.
    pub fv: Var,
    /// `[B×K×H×W]`.
    pub logits: Var,
}

/// Segmenter outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutputs<T> {
    /// `[C×H'×W']`.
    pub fv: Tensor<T>,
    /// `[K×H×W]`.
    pub logits: Tensor<T>,
    /// Argmax pseudo mask, row-major `H×W`.
    pub mask: Vec<u8>,
}

/// Everything a stage-two forward records.
#[derive(Clone, Debug)]
pub struct Stage2Vars {
    /// `[B×A]`.
    pub logits: Var,
    /// Visual tokens after positional embedding and self-attention, `[B·P×d_m]`.
    pub x: Var,
    /// Language states, `[ΣL×d_m]`.
    pub y: Var,
    pub x_f: Var,
    pub y_f: Var,
    pub gate: Option<Var>,
    pub token_segments: Segments,
    pub question_segments: Segments,
    attn: Vec<(&'static str, usize, Modality, Var)>,
}

/// Switches for probing and ablating a stage-two pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Options {
    /// Replace visual tokens by zeros (question-only model).
    pub zero_visual: bool,
    /// Clamp the channel gate to one.
    pub unit_gate: bool,
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax of `[B×K×H×W]` logits.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(bi * k + c) * hw + p] > d[(bi * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Stacks `[C×h×w]` tensors into `[B×C×h×w]`.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| ModelError::Data("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(ModelError::Data(format!("batch shapes differ: {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Soba<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

pub const SEG_PREFIX: &str = "seg.";

impl<T: Scalar> Soba<T> {
    /// Seeded initialization of both stages.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let bias = c.conv_bias;

        let mut c_in = 3;
        for i in 0..c.seg_blocks() {
            let w = c.seg_width(i);
            p.conv(&format!("seg.block{i}.conv"), c_in, w, 3, false, &mut rng);
            p.batch_norm(&format!("seg.block{i}.bn"), w);
            p.conv(&format!("seg.head{i}"), w, c.num_classes, 1, true, &mut rng);
            c_in = w;
        }
        p.conv("seg.head_fv", c.channels, c.num_classes, 1, true, &mut rng);

        let cg = 2 * c.channels;
        p.conv("oga.embed.conv", c.num_classes, c.channels, 3, false, &mut rng);
        p.batch_norm("oga.embed.bn", c.channels);
        let gate_in = if c.oga_variant == OgaVariant::SeGate { c.channels } else { cg };
        p.linear("oga.down", gate_in, (gate_in / c.oga_reduction).max(1), &mut rng);
        p.linear("oga.up", (gate_in / c.oga_reduction).max(1), gate_in, &mut rng);
        p.conv("proj", cg, c.d_model, 1, bias, &mut rng);
        p.init_uniform("pos", &[c.tokens(), c.d_model], c.d_model, &mut rng);

        for i in 0..c.vsa_depth {
            transformer_params(&mut p, &format!("vsa.{i}"), c, false, &mut rng);
        }

        p.init_uniform("lang.embed", &[c.question_vocab, c.word_dim], c.word_dim, &mut rng);
        let mut width = c.word_dim;
        for l in 0..c.lstm_layers {
            let h = c.lstm_hidden;
            p.init_uniform(&format!("lang.lstm{l}.wih"), &[width, 4 * h], h, &mut rng);
            p.init_uniform(&format!("lang.lstm{l}.whh"), &[h, 4 * h], h, &mut rng);
            p.init_const(&format!("lang.lstm{l}.b"), &[4 * h], 0.0);
            width = h;
        }
        p.linear("lang.proj", c.lstm_hidden, c.d_model, &mut rng);

        for j in 0..2 * c.bca_depth {
            transformer_params(&mut p, &format!("bca.{j}"), c, true, &mut rng);
        }
        p.linear("head.fc1", 2 * c.d_model, c.d_model, &mut rng);
        p.linear("head.fc2", c.d_model, c.answer_vocab, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Replaces the segmenter parameters and statistics with those of `other`.
    pub fn load_segmenter(&mut self, other: &ParamStore<T>) -> Result<()> {
        let mut found = false;
        for (map, src) in [(&mut self.params.params, &other.params), (&mut self.params.buffers, &other.buffers)] {
            for (name, t) in src.iter().filter(|(n, _)| n.starts_with(SEG_PREFIX)) {
                match map.get(name) {
                    Some(old) if old.shape() == t.shape() => {
                        map.insert(name.clone(), t.clone());
                        found = true;
                    }
                    Some(old) => {
                        return Err(ModelError::State(format!(
                            "segmenter tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            old.shape()
                        )))
                    }
                    None => return Err(ModelError::State(format!("unexpected segmenter tensor {name}"))),
                }
            }
        }
        if !found {
            return Err(ModelError::State("checkpoint holds no segmenter weights".into()));
        }
        Ok(())
    }

    /// Stage one on `images [B×3×H×W]`.
    pub fn segment(&self, tape: &mut Tape<T>, b: &mut Binder<T>, images: Var) -> Result<SegVars> {
        let c = &self.config;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image_size || s[3] != c.image_size {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "segment",
                msg: format!("expected [B×3×{0}×{0}] images, got {s:?}", c.image_size),
            }));
        }
        let mut x = images;
        let mut logits = None;
        for i in 0..c.seg_blocks() {
            let h = nn::conv_bn_relu(tape, b, &format!("seg.block{i}"), x)?;
            let tap = nn::conv(tape, b, &format!("seg.head{i}"), h)?;
            let tap = if i == 0 { tap } else { tape.upsample_nearest(tap, 1 << i)? };
            logits = Some(match logits {
                None => tap,
                Some(acc) => tape.add(acc, tap)?,
            });
            x = tape.downsample_nearest(h, 2)?;
        }
        let fv = x;
        let tap = nn::conv(tape, b, "seg.head_fv", fv)?;
        let tap = tape.upsample_nearest(tap, c.stride)?;
        let logits = tape.add(logits.expect("at least one block"), tap)?;
        Ok(SegVars { fv, logits })
    }

    /// Segmenter outputs of single images with frozen statistics.
    pub fn segment_eval(&self, images: &[&Tensor<T>]) -> Result<Vec<SegOutputs<T>>> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false).freeze(SEG_PREFIX);
        let x = tape.constant(stack(images)?);
        let out = self.segment(&mut tape, &mut b, x)?;
        let fv = tape.value(out.fv);
        let logits = tape.value(out.logits);
        let masks = argmax_mask(logits);
        let (fv_n, lg_n) = (fv.numel() / images.len(), logits.numel() / images.len());
        Ok(masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| SegOutputs {
                fv: Tensor::new(fv.shape()[1..].to_vec(), fv.data()[i * fv_n..(i + 1) * fv_n].to_vec()).expect("slice"),
                logits: Tensor::new(logits.shape()[1..].to_vec(), logits.data()[i * lg_n..(i + 1) * lg_n].to_vec())
                    .expect("slice"),
                mask,
            })
            .collect())
    }

    /// One-hot pseudo masks at prompt resolution, `[B×K×H'×W']`.
    pub fn mask_onehot(&self, masks: &[&[u8]]) -> Result<Tensor<T>> {
        let c = &self.config;
        let (side, g, k) = (c.image_size, c.grid(), c.num_classes);
        let mut data = vec![T::zero(); masks.len() * k * g * g];
        for (bi, m) in masks.iter().enumerate() {
            if m.len() != side * side {
                return Err(ModelError::Data(format!("mask has {} pixels, expected {}", m.len(), side * side)));
            }
            let full = Tensor::new(vec![side, side], m.iter().map(|&v| T::of(v as f64)).collect())?;
            let small = full.nearest_resize(g, g)?;
            for (p, &v) in small.data().iter().enumerate() {
                let cls = v.as_f64() as usize;
                if cls >= k {
                    return Err(ModelError::Data(format!("mask class {cls} >= {k} classes")));
                }
                data[(bi * k + cls) * g * g + p] = T::one();
            }
        }
        Ok(Tensor::new(vec![masks.len(), k, g, g], data)?)
    }

    /// Object-guided features `[B×2C×H'×W']` and the channel gate, if any.
    pub fn oga(&self, tape: &mut Tape<T>, b: &mut Binder<T>, fv: Var, onehot: Var, opts: Stage2Options) -> Result<(Var, Option<Var>)> {
        let e = nn::conv_bn_relu(tape, b, "oga.embed", onehot)?;
        let gate = |tape: &mut Tape<T>, b: &mut Binder<T>, feat: Var| -> Result<Var> {
            let s = tape.shape(feat).to_vec();
            let flat = tape.reshape(feat, &[s[0], s[1], s[2] * s[3]])?;
            let gap = tape.mean_axis(flat, 2)?;
            let z = nn::linear(tape, b, "oga.down", gap)?;
            let z = tape.relu(z)?;
            let z = nn::linear(tape, b, "oga.up", z)?;
            let g = tape.sigmoid(z)?;
            if opts.unit_gate {
                let ones = Tensor::full(tape.shape(g), T::one());
                Ok(tape.constant(ones))
            } else {
                Ok(g)
            }
        };
        match self.config.oga_variant {
            OgaVariant::ConcatOnly => Ok((tape.concat(&[fv, e], 1)?, None)),
            OgaVariant::SeGate => {
                let g = gate(tape, b, fv)?;
                let fv = tape.scale_channels(fv, g)?;
                Ok((tape.concat(&[fv, e], 1)?, Some(g)))
            }
            OgaVariant::Oga => {
                let fg = tape.concat(&[fv, e], 1)?;
                let g = gate(tape, b, fg)?;
                Ok((tape.scale_channels(fg, g)?, Some(g)))
            }
        }
    }

    /// Pre-norm self-attention stack over stacked tokens.
    pub fn vsa(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x: Var, segs: &Segments, attn: &mut Vec<(&'static str, usize, Modality, Var)>) -> Result<Var> {
        let mut x = x;
        for i in 0..self.config.vsa_depth {
            let pre = format!("vsa.{i}");
            let (nx, a) = self.attention_block(tape, b, &pre, x, None, segs, segs)?;
            attn.push(("vsa", i, Modality::Visual, a));
            x = nx;
        }
        Ok(x)
    }

    /// Attention sub-block plus feed-forward sub-block; `context` is `None` for self-attention.
    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        pre: &str,
        z: Var,
        context: Option<Var>,
        qs: &Segments,
        ks: &Segments,
    ) -> Result<(Var, Var)> {
        let hq = nn::layer_norm(tape, b, &format!("{pre}.ln_q"), z)?;
        let hc = match context {
            Some(c) => nn::layer_norm(tape, b, &format!("{pre}.ln_c"), c)?,
            None => hq,
        };
        let q = nn::linear(tape, b, &format!("{pre}.q"), hq)?;
        let k = nn::linear(tape, b, &format!("{pre}.k"), hc)?;
        let v = nn::linear(tape, b, &format!("{pre}.v"), hc)?;
        let a = tape.attention(q, k, v, qs, ks, self.config.heads)?;
        let o = nn::linear(tape, b, &format!("{pre}.o"), a)?;
        let z = tape.add(z, o)?;
        let h = nn::layer_norm(tape, b, &format!("{pre}.ln_f"), z)?;
        let h = nn::linear(tape, b, &format!("{pre}.ff1"), h)?;
        let h = tape.gelu(h)?;
        let h = nn::linear(tape, b, &format!("{pre}.ff2"), h)?;
        Ok((tape.add(z, h)?, a))
    }

    /// Embedding, stacked LSTM and projection to `[ΣL×d_m]`.
    pub fn encode_question(&self, tape: &mut Tape<T>, b: &mut Binder<T>, questions: &[&[usize]]) -> Result<(Var, Segments)> {
        let c = &self.config;
        if questions.is_empty() || questions.iter().any(|q| q.is_empty()) {
            return Err(ModelError::Data("questions must be non-empty token sequences".into()));
        }
        if let Some(bad) = questions.iter().flat_map(|q| q.iter()).find(|&&t| t >= c.question_vocab) {
            return Err(ModelError::Data(format!("token id {bad} outside question vocabulary of {}", c.question_vocab)));
        }
        let segs = Segments::new(questions.iter().map(|q| q.len()).collect());
        let ids: Vec<usize> = questions.iter().flat_map(|q| q.iter().copied()).collect();
        let table = b.p(tape, "lang.embed")?;
        let mut seq = tape.embedding(table, &ids)?;
        let h = c.lstm_hidden;
        for l in 0..c.lstm_layers {
            let wih = b.p(tape, &format!("lang.lstm{l}.wih"))?;
            let whh = b.p(tape, &format!("lang.lstm{l}.whh"))?;
            let bias = b.p(tape, &format!("lang.lstm{l}.b"))?;
            let xp = tape.matmul(seq, wih)?;
            let xp = tape.add_broadcast(xp, bias)?;
            let mut outs = Vec::with_capacity(ids.len());
            for s in 0..segs.len() {
                let (off, len) = segs.span(s);
                let mut hid: Option<Var> = None;
                let mut cell: Option<Var> = None;
                for t in 0..len {
                    let mut g = tape.narrow(xp, 0, off + t, 1)?;
                    if let Some(hp) = hid {
                        let r = tape.matmul(hp, whh)?;
                        g = tape.add(g, r)?;
                    }
                    let i_g = tape.narrow(g, 1, 0, h)?;
                    let i_g = tape.sigmoid(i_g)?;
                    let f_g = tape.narrow(g, 1, h, h)?;
                    let f_g = tape.sigmoid(f_g)?;
                    let c_g = tape.narrow(g, 1, 2 * h, h)?;
                    let c_g = tape.tanh(c_g)?;
                    let o_g = tape.narrow(g, 1, 3 * h, h)?;
                    let o_g = tape.sigmoid(o_g)?;
                    let ic = tape.mul(i_g, c_g)?;
                    let new_c = match cell {
                        Some(cp) => {
                            let fc = tape.mul(f_g, cp)?;
                            tape.add(fc, ic)?
                        }
                        None => ic,
                    };
                    let tc = tape.tanh(new_c)?;
                    let new_h = tape.mul(o_g, tc)?;
                    outs.push(new_h);
                    hid = Some(new_h);
                    cell = Some(new_c);
                }
            }
            seq = tape.concat(&outs, 0)?;
        }
        Ok((nn::linear(tape, b, "lang.proj", seq)?, segs))
    }

    /// Cross-attention stack following `config.bca_order`.
    #[allow(clippy::too_many_arguments)]
    pub fn bca(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        x: Var,
        y: Var,
        xs: &Segments,
        ys: &Segments,
        attn: &mut Vec<(&'static str, usize, Modality, Var)>,
    ) -> Result<(Var, Var)> {
        let order = self.config.bca_order;
        let (x0, y0) = (x, y);
        let (mut x, mut y) = (x, y);
        for (j, m) in order.schedule(self.config.bca_depth).into_iter().enumerate() {
            let pre = format!("bca.{j}");
            match m {
                Modality::Visual => {
                    let ctx = if order == BcaOrder::Parallel { y0 } else { y };
                    let (nx, a) = self.attention_block(tape, b, &pre, x, Some(ctx), xs, ys)?;
                    attn.push(("bca", j, m, a));
                    x = nx;
                }
                Modality::Language => {
                    let ctx = if order == BcaOrder::Parallel { x0 } else { x };
                    let (ny, a) = self.attention_block(tape, b, &pre, y, Some(ctx), ys, xs)?;
                    attn.push(("bca", j, m, a));
                    y = ny;
                }
            }
        }
        Ok((x, y))
    }

    /// Mean-pooled fused tokens through a GELU perceptron, `[B×A]`.
    pub fn answer_head(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x_f: Var, y_f: Var, xs: &Segments, ys: &Segments) -> Result<Var> {
        let xp = tape.segment_mean(x_f, xs)?;
        let yp = tape.segment_mean(y_f, ys)?;
        let h = tape.concat(&[xp, yp], 1)?;
        let h = nn::linear(tape, b, "head.fc1", h)?;
        let h = tape.gelu(h)?;
        Ok(nn::linear(tape, b, "head.fc2", h)?)
    }

    /// Stage two from prompts `fv [B×C×H'×W']` and pseudo masks.
    pub fn stage2(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        fv: Var,
        masks: &[&[u8]],
        questions: &[&[usize]],
        opts: Stage2Options,
    ) -> Result<Stage2Vars> {
        let c = &self.config;
        let bsz = masks.len();
        let (g, p, d) = (c.grid(), c.tokens(), c.d_model);
        if tape.shape(fv) != [bsz, c.channels, g, g] || questions.len() != bsz {
            return Err(ModelError::Data(format!(
                "prompt batch {:?} does not match {} masks / {} questions",
                tape.shape(fv),
                bsz,
                questions.len()
            )));
        }
        let onehot = self.mask_onehot(masks)?;
        let onehot = tape.constant(onehot);
        let (feat, gate) = self.oga(tape, b, fv, onehot, opts)?;
        let reduced = nn::conv(tape, b, "proj", feat)?;
        let tokens = tape.reshape(reduced, &[bsz, d, p])?;
        let tokens = tape.permute(tokens, &[0, 2, 1])?;
        let pos = b.p(tape, "pos")?;
        let tokens = tape.add_broadcast(tokens, pos)?;
        let mut x = tape.reshape(tokens, &[bsz * p, d])?;
        if opts.zero_visual {
            x = tape.constant(Tensor::zeros(&[bsz * p, d]));
        }
        let xs = Segments::uniform(bsz, p);
        let mut attn = Vec::new();
        let x = self.vsa(tape, b, x, &xs, &mut attn)?;
        let (y, ys) = self.encode_question(tape, b, questions)?;
        let (x_f, y_f) = self.bca(tape, b, x, y, &xs, &ys, &mut attn)?;
        let logits = self.answer_head(tape, b, x_f, y_f, &xs, &ys)?;
        Ok(Stage2Vars {
            logits,
            x,
            y,
            x_f,
            y_f,
            gate,
            token_segments: xs,
            question_segments: ys,
            attn,
        })
    }

    /// Full composition on `images [B×3×H×W]`; the segmenter's outputs feed stage two.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        images: Var,
        questions: &[&[usize]],
        opts: Stage2Options,
    ) -> Result<(Stage2Vars, SegVars)> {
        let seg = self.segment(tape, b, images)?;
        let masks = argmax_mask(tape.value(seg.logits));
        let mrefs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
        let out = self.stage2(tape, b, seg.fv, &mrefs, questions, opts)?;
        Ok((out, seg))
    }

    /// Evaluation-mode forward of one image and question.
    pub fn forward(&self, image: &Tensor<T>, token_ids: &[usize]) -> Result<(Tensor<T>, Vec<AttentionRecord>, SegOutputs<T>)> {
        let seg = self
            .segment_eval(&[image])?
            .pop()
            .expect("one output per image");
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let mut s = seg.fv.shape().to_vec();
        s.insert(0, 1);
        let fv = tape.constant(seg.fv.reshape(&s)?);
        let out = self.stage2(&mut tape, &mut b, fv, &[&seg.mask], &[token_ids], Stage2Options::default())?;
        let logits = tape.value(out.logits).clone();
        let recs = out.records(&tape);
        Ok((logits, recs, seg))
    }
}

impl Stage2Vars {
    /// Head-averaged attention matrices of every self- and cross-attention block.
    pub fn records<T: Scalar>(&self, tape: &Tape<T>) -> Vec<AttentionRecord> {
        self.attn
            .iter()
            .map(|&(stage, block, query, var)| {
                let (probs, heads) = tape.attention_probs(var).expect("attention node");
                let (qsegs, ksegs) = match (stage, query) {
                    ("bca", Modality::Language) => (&self.question_segments, &self.token_segments),
                    ("bca", Modality::Visual) => (&self.token_segments, &self.question_segments),
                    _ => (&self.token_segments, &self.token_segments),
                };
                let n = qsegs.len();
                let mut matrices = Vec::with_capacity(n);
                for s in 0..n {
                    let len = probs[s * heads].len();
                    let mut avg = vec![0.0; len];
                    for h in 0..heads {
                        for (a, &p) in avg.iter_mut().zip(&probs[s * heads + h]) {
                            *a += p.as_f64();
                        }
                    }
                    avg.iter_mut().for_each(|a| *a /= heads as f64);
                    matrices.push(avg);
                }
                AttentionRecord {
                    stage: stage.to_string(),
                    block,
                    query,
                    matrices,
                    query_lens: qsegs.lens().to_vec(),
                    key_lens: ksegs.lens().to_vec(),
                }
            })
            .collect()
    }
}

fn transformer_params<T: Scalar>(p: &mut ParamStore<T>, pre: &str, c: &ModelConfig, cross: bool, rng: &mut ChaCha8Rng) {
    let d = c.d_model;
    p.norm(&format!("{pre}.ln_q"), d);
    if cross {
        p.norm(&format!("{pre}.ln_c"), d);
    }
    for n in ["q", "k", "v", "o"] {
        p.linear(&format!("{pre}.{n}"), d, d, rng);
    }
    p.norm(&format!("{pre}.ln_f"), d);
    p.linear(&format!("{pre}.ff1"), d, c.ffn_hidden, rng);
    p.linear(&format!("{pre}.ff2"), c.ffn_hidden, d, rng);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(side: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(&[3, side, side], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        })
    }

    #[test]
    fn desk_shapes() {
        let m = Soba::<f64>::new(ModelConfig::desk(20, 30), 0).unwrap();
        let img = image(64, 1);
        let (logits, recs, seg) = m.forward(&img, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(seg.fv.shape(), &[32, 8, 8]);
        assert_eq!(seg.logits.shape(), &[8, 64, 64]);
        assert!(seg.mask.iter().all(|&c| c < 8));
        assert_eq!(logits.shape(), &[1, 30]);
        assert_eq!(recs.len(), 3 + 6);
        for r in &recs {
            for row in r.matrices[0].chunks(r.key_lens[0]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let (again, _, _) = m.forward(&img, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn order_schedules() {
        assert_eq!(BcaOrder::VvvLll.schedule(3).iter().filter(|m| **m == Modality::Visual).count(), 3);
        assert!(BcaOrder::Llllll.schedule(3).iter().all(|m| *m == Modality::Language));
        assert_eq!("vvv-lll".parse::<BcaOrder>().unwrap(), BcaOrder::VvvLll);
        assert!("VVV".parse::<BcaOrder>().is_err());
        let json = serde_json::to_string(&BcaOrder::LvLvLv).unwrap();
        assert_eq!(json, "\"LV-LV-LV\"");
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(5, 5);
        c.heads = 5;
        assert!(matches!(Soba::<f64>::new(c, 0), Err(ModelError::Config(_))));
        let mut c = ModelConfig::desk(5, 5);
        c.image_size = 60;
        assert!(Soba::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn bad_mask_class_is_data_error() {
        let m = Soba::<f64>::new(ModelConfig::micro(5, 5), 0).unwrap();
        let mask = vec![9u8; 256];
        assert!(matches!(m.mask_onehot(&[&mask]), Err(ModelError::Data(_))));
    }
}
