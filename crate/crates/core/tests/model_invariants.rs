mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soba_core::loss::{vqa_loss, AnswerTarget, LossConfig};
use soba_core::model::{BcaOrder, ModelConfig, OgaVariant, Stage2Options, SEG_PREFIX};
use soba_core::nn::Binder;
use soba_core::optim::Adam;
use soba_core::{Segments, Soba, Tape, Tensor};
use support::invariants::{attention_suite, max_row_error, one_way_preserves_keys, random_forward};

fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn masks(n: usize, side: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..side * side).map(|_| rng.gen_range(0..8)).collect()).collect()
}

fn logits(model: &Soba<f64>, fv: &Tensor<f64>, masks: &[Vec<u8>], questions: &[Vec<usize>], opts: Stage2Options) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, false);
    let fv = tape.constant(fv.clone());
    let m: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let q: Vec<&[usize]> = questions.iter().map(|q| q.as_slice()).collect();
    let out = model.stage2(&mut tape, &mut b, fv, &m, &q, opts).unwrap();
    tape.value(out.logits).data().to_vec()
}

fn micro(order: BcaOrder, variant: OgaVariant) -> ModelConfig {
    let mut c = ModelConfig::micro(9, 6);
    c.bca_order = order;
    c.oga_variant = variant;
    c
}

#[test]
fn attention_rows_are_stochastic_over_fifty_forwards() {
    let s = attention_suite(50);
    assert_eq!(s.forwards, 50);
    assert!(s.max_row_error < 1e-6, "{}", s.max_row_error);
    assert!(s.one_way_checked >= 14);
    assert_eq!(s.one_way_failures, 0);
}

#[test]
fn bidirectional_orders_update_both_modalities() {
    let f = random_forward(3, BcaOrder::VvvLll);
    assert!(max_row_error(&f) < 1e-9);
    let v = |var| f.tape.value(var).data().to_vec();
    assert_ne!(v(f.vars.x_f), v(f.vars.x));
    assert_ne!(v(f.vars.y_f), v(f.vars.y));
    assert!(one_way_preserves_keys(&random_forward(4, BcaOrder::Llllll)));
    assert!(one_way_preserves_keys(&random_forward(5, BcaOrder::Vvvvvv)));
}

#[test]
fn unit_gate_reduces_oga_to_concatenation() {
    let cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    let g = cfg.grid();
    let oga = Soba::<f64>::new(cfg.clone(), 8).unwrap();
    let concat = Soba::<f64>::new(micro(BcaOrder::VvvLll, OgaVariant::ConcatOnly), 8).unwrap();
    assert_eq!(oga.params, concat.params);
    let fv = noise(&[2, cfg.channels, g, g], 1);
    let m = masks(2, cfg.image_size, 2);
    let q = vec![vec![1, 2, 3], vec![4, 5]];
    let unit = Stage2Options {
        unit_gate: true,
        ..Default::default()
    };
    assert_eq!(logits(&oga, &fv, &m, &q, unit), logits(&concat, &fv, &m, &q, Stage2Options::default()));
    assert_ne!(logits(&oga, &fv, &m, &q, Stage2Options::default()), logits(&concat, &fv, &m, &q, Stage2Options::default()));
}

#[test]
fn zeroed_mask_branch_ignores_the_mask() {
    let cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    let g = cfg.grid();
    let mut model = Soba::<f64>::new(cfg.clone(), 3).unwrap();
    let w = model.params.params.get_mut("oga.embed.conv.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let fv = noise(&[1, cfg.channels, g, g], 4);
    let q = vec![vec![2, 7, 1]];
    let a = logits(&model, &fv, &masks(1, cfg.image_size, 5), &q, Stage2Options::default());
    let b = logits(&model, &fv, &masks(1, cfg.image_size, 6), &q, Stage2Options::default());
    assert_eq!(a, b);
    let fresh = Soba::<f64>::new(cfg.clone(), 3).unwrap();
    let a = logits(&fresh, &fv, &masks(1, cfg.image_size, 5), &q, Stage2Options::default());
    let b = logits(&fresh, &fv, &masks(1, cfg.image_size, 6), &q, Stage2Options::default());
    assert_ne!(a, b);
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    cfg.vsa_depth = 2;
    let model = Soba::<f64>::new(cfg.clone(), 12).unwrap();
    let p = 9;
    let d = cfg.d_model;
    let x = noise(&[p, d], 13);
    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted = Tensor::from_fn(&[p, d], |i| x.data()[perm[i / d] * d + i % d]);
    let run = |t: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, false);
        let v = tape.constant(t.clone());
        let out = model.vsa(&mut tape, &mut b, v, &Segments::uniform(1, p), &mut Vec::new()).unwrap();
        tape.value(out).data().to_vec()
    };
    let base = run(&x);
    let moved = run(&permuted);
    for i in 0..p {
        for j in 0..d {
            assert!((moved[i * d + j] - base[perm[i] * d + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_word_question_gets_all_visual_attention() {
    let cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    let g = cfg.grid();
    let model = Soba::<f64>::new(cfg.clone(), 21).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.params, false);
    let fv = tape.constant(noise(&[1, cfg.channels, g, g], 22));
    let m = masks(1, cfg.image_size, 23);
    let out = model.stage2(&mut tape, &mut b, fv, &[&m[0]], &[&[5]], Stage2Options::default()).unwrap();
    let visual_queries: Vec<_> = out
        .records(&tape)
        .into_iter()
        .filter(|r| r.stage == "bca" && r.query == soba_core::model::Modality::Visual)
        .collect();
    assert_eq!(visual_queries.len(), cfg.bca_depth);
    for r in visual_queries {
        assert_eq!(r.key_lens, vec![1]);
        assert!(r.matrices[0].iter().all(|&p| p == 1.0));
    }
}

#[test]
fn block_order_changes_the_output() {
    let cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    let g = cfg.grid();
    let a = Soba::<f64>::new(cfg.clone(), 30).unwrap();
    let mut b = a.clone();
    b.config.bca_order = BcaOrder::LllVvv;
    let fv = noise(&[1, cfg.channels, g, g], 31);
    let m = masks(1, cfg.image_size, 32);
    let q = vec![vec![1, 3, 5, 7]];
    assert_ne!(logits(&a, &fv, &m, &q, Stage2Options::default()), logits(&b, &fv, &m, &q, Stage2Options::default()));
}

#[test]
fn frozen_segmenter_survives_a_training_step() {
    let cfg = micro(BcaOrder::VvvLll, OgaVariant::Oga);
    let mut model = Soba::<f64>::new(cfg.clone(), 40).unwrap();
    let before = model.params.clone();
    let s = cfg.image_size;
    let images = noise(&[2, 3, s, s], 41);
    let (grads, stats) = {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, true).freeze(SEG_PREFIX);
        let x = tape.constant(images);
        let (out, _) = model.forward_tape(&mut tape, &mut b, x, &[&[1, 2], &[3, 4, 5]], Stage2Options::default()).unwrap();
        let targets = [AnswerTarget { class: 1, numeric: Some(1) }, AnswerTarget { class: 5, numeric: None }];
        let numeric: Vec<(usize, u32)> = (0..3).map(|i| (i, i as u32)).collect();
        let parts = vqa_loss(&mut tape, out.logits, &targets, &numeric, None, &LossConfig::default()).unwrap();
        tape.backward(parts.total).unwrap();
        (b.grads(&tape), std::mem::take(&mut b.bn_stats))
    };
    assert!(grads.keys().all(|k| !k.starts_with(SEG_PREFIX)));
    assert!(stats.iter().all(|(k, _)| !k.starts_with(SEG_PREFIX)));
    Adam::default().step(&mut model.params, &grads, 1e-2).unwrap();
    model.params.update_running(&stats).unwrap();
    for (name, t) in before.params.iter().chain(&before.buffers) {
        let now = model.params.params.get(name).or_else(|| model.params.buffers.get(name)).unwrap();
        if name.starts_with(SEG_PREFIX) {
            assert_eq!(now, t, "{name} moved");
        }
    }
    assert_ne!(model.params.params["head.fc2.w"], before.params["head.fc2.w"]);
}
