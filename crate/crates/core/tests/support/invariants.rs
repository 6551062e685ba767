//! Random stage-two forwards for the attention contracts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soba_core::model::{BcaOrder, ModelConfig, OgaVariant, Stage2Options, Stage2Vars};
use soba_core::nn::Binder;
use soba_core::{Soba, Tape, Tensor};

pub struct Forward {
    pub model: Soba<f64>,
    pub tape: Tape<f64>,
    pub vars: Stage2Vars,
}

/// A random micro-scale model run on a random batch.
pub fn random_forward(seed: u64, order: BcaOrder) -> Forward {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::micro(11, 7);
    cfg.bca_order = order;
    cfg.heads = [1, 2, 4][rng.gen_range(0..3)];
    cfg.image_size = [16, 24, 32][rng.gen_range(0..3)];
    cfg.oga_variant = [OgaVariant::ConcatOnly, OgaVariant::SeGate, OgaVariant::Oga][rng.gen_range(0..3)];
    let model = Soba::<f64>::new(cfg.clone(), rng.gen()).unwrap();
    let bsz = rng.gen_range(1..4);
    let g = cfg.grid();
    let fv = Tensor::from_fn(&[bsz, cfg.channels, g, g], |_| rng.gen_range(-2.0..2.0));
    let masks: Vec<Vec<u8>> = (0..bsz)
        .map(|_| (0..cfg.image_size * cfg.image_size).map(|_| rng.gen_range(0..8)).collect())
        .collect();
    let questions: Vec<Vec<usize>> = (0..bsz)
        .map(|_| {
            let len = rng.gen_range(1..8);
            (0..len).map(|_| rng.gen_range(0..cfg.question_vocab)).collect()
        })
        .collect();
    let mut tape = Tape::new();
    let vars = {
        let mut b = Binder::new(&model.params, rng.gen_bool(0.5));
        let fv = tape.constant(fv);
        let mrefs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
        let qrefs: Vec<&[usize]> = questions.iter().map(|q| q.as_slice()).collect();
        model.stage2(&mut tape, &mut b, fv, &mrefs, &qrefs, Stage2Options::default()).unwrap()
    };
    Forward { model, tape, vars }
}

/// Largest deviation of any attention row sum from one.
pub fn max_row_error(f: &Forward) -> f64 {
    let mut worst: f64 = 0.0;
    for rec in f.vars.records(&f.tape) {
        for (s, m) in rec.matrices.iter().enumerate() {
            assert_eq!(m.len(), rec.query_lens[s] * rec.key_lens[s]);
            for row in m.chunks(rec.key_lens[s]) {
                assert!(row.iter().all(|&p| p >= 0.0));
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    worst
}

/// Whether the modality that never supplies queries leaves the stack untouched.
pub fn one_way_preserves_keys(f: &Forward) -> bool {
    let v = |var| f.tape.value(var).data().to_vec();
    match f.model.config.bca_order {
        BcaOrder::Llllll => v(f.vars.x_f) == v(f.vars.x),
        BcaOrder::Vvvvvv => v(f.vars.y_f) == v(f.vars.y),
        _ => true,
    }
}

pub struct AttentionSummary {
    pub forwards: usize,
    pub max_row_error: f64,
    pub one_way_checked: usize,
    pub one_way_failures: usize,
}

/// `n` forwards cycling through every cross-attention order.
pub fn attention_suite(n: usize) -> AttentionSummary {
    let mut s = AttentionSummary {
        forwards: 0,
        max_row_error: 0.0,
        one_way_checked: 0,
        one_way_failures: 0,
    };
    for i in 0..n {
        let order = BcaOrder::ALL[i % BcaOrder::ALL.len()];
        let f = random_forward(1_000 + i as u64, order);
        s.forwards += 1;
        s.max_row_error = s.max_row_error.max(max_row_error(&f));
        if matches!(order, BcaOrder::Llllll | BcaOrder::Vvvvvv) {
            s.one_way_checked += 1;
            s.one_way_failures += usize::from(!one_way_preserves_keys(&f));
        }
    }
    s
}
