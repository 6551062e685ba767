use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soba_core::checks::{run_all, MODEL_TOLERANCE, OP_TOLERANCE};
use soba_core::{Segments, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct seven-index convolution sum with zero padding.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let s = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * cin + c) * h + r as usize) * wd + s as usize]
                                    * w.data()[((o * cin + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (vec![b, cout, ho, wo], out)
}

#[test]
fn conv_matches_direct_summation() {
    for (seed, (b, cin, cout, h, w, k, stride, pad)) in [
        (2, 3, 4, 7, 6, 3, 1, 1),
        (1, 2, 5, 8, 8, 3, 2, 1),
        (3, 4, 2, 5, 9, 1, 1, 0),
        (1, 1, 1, 6, 6, 3, 1, 0),
        (2, 3, 3, 9, 7, 3, 3, 2),
    ]
    .into_iter()
    .enumerate()
    {
        let x = random(&[b, cin, h, w], seed as u64);
        let kern = random(&[cout, cin, k, k], 100 + seed as u64);
        let (shape, want) = conv_reference(&x, &kern, stride, pad);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let kv = tape.constant(kern);
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(tape.shape(y), shape.as_slice());
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn softmax_of_one_two_three() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let ls = tape.log_softmax(x).unwrap();
    for (a, b) in tape.value(ls).data().iter().zip(want) {
        assert!((a - b.ln()).abs() < 1e-15);
    }
}

#[test]
fn ragged_attention_matches_per_sample_dense() {
    let (d, heads) = (6, 2);
    let qs = Segments::new(vec![3, 1, 4]);
    let ks = Segments::new(vec![2, 5, 3]);
    let q = random(&[qs.total(), d], 1);
    let k = random(&[ks.total(), d], 2);
    let v = random(&[ks.total(), d], 3);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(qv, kv, vv, &qs, &ks, heads).unwrap();
    let got = tape.value(out).data().to_vec();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for s in 0..qs.len() {
        let (q0, ql) = qs.span(s);
        let (k0, kl) = ks.span(s);
        for h in 0..heads {
            for i in 0..ql {
                let scores: Vec<f64> = (0..kl)
                    .map(|j| (0..dh).map(|t| q.data()[(q0 + i) * d + h * dh + t] * k.data()[(k0 + j) * d + h * dh + t]).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..dh {
                    let want: f64 = (0..kl).map(|j| e[j] / z * v.data()[(k0 + j) * d + h * dh + t]).sum();
                    assert!((got[(q0 + i) * d + h * dh + t] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gradient_checks_pass_on_five_seeds() {
    let started = std::time::Instant::now();
    let results = run_all(&[0, 1, 2, 3, 4]).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(results.iter().any(|r| r.tolerance == MODEL_TOLERANCE));
    assert!(results.iter().filter(|r| r.tolerance == OP_TOLERANCE).count() >= 5 * 40);
    assert!(started.elapsed().as_secs() < 300);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-scale..scale));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn reshape_round_trips(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        let x = random(&[a, b, c], seed);
        let y = x.reshape(&[a * b, c]).unwrap().reshape(&[c * a, b]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(&x, &y);
        prop_assert!(x.reshape(&[a * b * c + 1]).is_err());
    }

    #[test]
    fn gradient_accumulation_is_linear(n in 1usize..20, seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tensor::<f64>::zeros(&[n]).with_grad();
        t.accumulate_grad(&g1).unwrap();
        t.accumulate_grad(&g2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[n], |_| rng.gen_range(-1.0..1.0)).with_grad());
        let w1 = tape.constant(Tensor::new(vec![n], g1.clone()).unwrap());
        let w2 = tape.constant(Tensor::new(vec![n], g2.clone()).unwrap());
        let a = tape.mul(x, w1).unwrap();
        let b = tape.mul(x, w2).unwrap();
        let b = tape.scale(b, alpha).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for i in 0..n {
            prop_assert!((tape.grad(x).unwrap()[i] - (g1[i] + alpha * g2[i])).abs() < 1e-12);
        }
        let acc = t.grad.as_ref().unwrap();
        for i in 0..n {
            prop_assert!((acc[i] - (g1[i] + g2[i])).abs() < 1e-15);
        }
    }
}
