//! Finite-difference gradient suite over every differentiable operation and
//! the full micro-configuration model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, Segments, Tape, Var};
use crate::error::{Result, TensorError};
use crate::gradcheck::grad_check;
use crate::model::{argmax_mask, ModelError, BcaOrder, ModelConfig, OgaVariant, Soba, Stage2Options};
use crate::nn::Binder;
use crate::tensor::Tensor;

type ModelResult<T> = std::result::Result<T, ModelError>;

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

pub const EPS: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const JITTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Coordinates skipped because their probe crossed a ReLU kink.
    pub kinked: usize,
}

impl CheckResult {
    /// At most this fraction of coordinates may be skipped at kinks.
    pub const MAX_KINKED: f64 = 0.01;

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && (self.kinked as f64) <= Self::MAX_KINKED * self.coordinates as f64
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values in `[lo, hi]` with a random sign, away from zero.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).expect("shape")
}

/// Reduces `y` to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    input: Tensor<f64>,
    f: OpFn,
}

/// Output shape of `f` at `x`, used to size the projection.
fn out_shape(f: &OpFn, x: &Tensor<f64>) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = f(&mut tape, v)?;
    Ok(tape.shape(y).to_vec())
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, $input:expr, $f:expr) => {
            cases.push(OpCase {
                name: $name,
                input: $input,
                f: Box::new($f),
            })
        };
    }
    let b = rand_tensor(rng, &[4, 5]);
    case!("matmul.lhs", rand_tensor(rng, &[3, 4]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(b.clone());
        t.matmul(x, b)
    });
    let a = rand_tensor(rng, &[3, 4]);
    case!("matmul.rhs", rand_tensor(rng, &[4, 5]), move |t: &mut Tape<f64>, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x)
    });
    case!("transpose", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.transpose(x));
    let o = rand_tensor(rng, &[3, 4]);
    case!("add", rand_tensor(rng, &[3, 4]), move |t: &mut Tape<f64>, x| {
        let o = t.constant(o.clone());
        t.add(x, o)
    });
    let o = rand_tensor(rng, &[3, 4]);
    case!("sub", rand_tensor(rng, &[3, 4]), move |t: &mut Tape<f64>, x| {
        let o = t.constant(o.clone());
        let a = t.sub(x, o)?;
        let b = t.sub(o, x)?;
        let b = t.scale(b, 0.3)?;
        t.add(a, b)
    });
    let o = rand_tensor(rng, &[3, 4]);
    case!("mul", rand_tensor(rng, &[3, 4]), move |t: &mut Tape<f64>, x| {
        let o = t.constant(o.clone());
        let a = t.mul(x, o)?;
        t.mul(a, x)
    });
    case!("affine", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.affine(x, 1.7, -0.3));
    case!("scale", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.scale(x, -2.5));
    let bias = rand_tensor(rng, &[4]);
    case!("add_broadcast.x", rand_tensor(rng, &[2, 3, 4]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(bias.clone());
        t.add_broadcast(x, b)
    });
    let base = rand_tensor(rng, &[2, 3, 4]);
    case!("add_broadcast.b", rand_tensor(rng, &[3, 4]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(base.clone());
        t.add_broadcast(b, x)
    });
    let cb = rand_tensor(rng, &[3]);
    case!("add_channel_bias.x", rand_tensor(rng, &[2, 3, 2, 2]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(cb.clone());
        t.add_channel_bias(x, b)
    });
    let base = rand_tensor(rng, &[2, 3, 2, 2]);
    case!("add_channel_bias.b", rand_tensor(rng, &[3]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(base.clone());
        t.add_channel_bias(b, x)
    });
    let g = rand_tensor(rng, &[2, 3]);
    case!("scale_channels.x", rand_tensor(rng, &[2, 3, 2, 2]), move |t: &mut Tape<f64>, x| {
        let g = t.constant(g.clone());
        t.scale_channels(x, g)
    });
    let base = rand_tensor(rng, &[2, 3, 2, 2]);
    case!("scale_channels.g", rand_tensor(rng, &[2, 3]), move |t: &mut Tape<f64>, x| {
        let b = t.constant(base.clone());
        t.scale_channels(b, x)
    });
    case!("relu", rand_away(rng, &[3, 4], 0.05, 1.0), |t: &mut Tape<f64>, x| t.relu(x));
    case!("gelu", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.gelu(x));
    case!("sigmoid", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.sigmoid(x));
    case!("tanh", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.tanh(x));
    case!("exp", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.exp(x));
    case!("ln", positive(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.ln(x));
    case!("pow_const.sqrt", positive(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.pow_const(x, 0.5));
    case!("pow_const.square", positive(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.pow_const(x, 2.0));
    case!("softmax", rand_tensor(rng, &[3, 5]), |t: &mut Tape<f64>, x| t.softmax(x));
    case!("log_softmax", rand_tensor(rng, &[3, 5]), |t: &mut Tape<f64>, x| t.log_softmax(x));
    case!("sum", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| {
        let s = t.sum(x)?;
        t.mul(s, s)
    });
    case!("mean_axis.0", rand_tensor(rng, &[3, 4, 2]), |t: &mut Tape<f64>, x| t.mean_axis(x, 0));
    case!("mean_axis.2", rand_tensor(rng, &[3, 4, 2]), |t: &mut Tape<f64>, x| t.mean_axis(x, 2));
    case!("reshape", rand_tensor(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.reshape(x, &[2, 6]));
    case!("permute", rand_tensor(rng, &[2, 3, 4]), |t: &mut Tape<f64>, x| t.permute(x, &[2, 0, 1]));
    case!("narrow", rand_tensor(rng, &[3, 5, 2]), |t: &mut Tape<f64>, x| t.narrow(x, 1, 1, 3));
    let o = rand_tensor(rng, &[2, 2, 3]);
    case!("concat", rand_tensor(rng, &[2, 3, 3]), move |t: &mut Tape<f64>, x| {
        let o = t.constant(o.clone());
        t.concat(&[o, x, o], 1)
    });
    let k = rand_tensor(rng, &[4, 3, 3, 3]);
    case!("conv2d.x", rand_tensor(rng, &[2, 3, 5, 5]), move |t: &mut Tape<f64>, x| {
        let k = t.constant(k.clone());
        t.conv2d(x, k, 1, 1)
    });
    let img = rand_tensor(rng, &[2, 3, 5, 5]);
    case!("conv2d.kernel", rand_tensor(rng, &[4, 3, 3, 3]), move |t: &mut Tape<f64>, x| {
        let i = t.constant(img.clone());
        t.conv2d(i, x, 2, 0)
    });
    let (gm, bt) = (positive(rng, &[3]), rand_tensor(rng, &[3]));
    case!("batch_norm.batch.x", rand_tensor(rng, &[4, 3, 2, 2]), move |t: &mut Tape<f64>, x| {
        let (g, b) = (t.constant(gm.clone()), t.constant(bt.clone()));
        Ok(t.batch_norm(x, g, b, BnMode::Batch, 1e-5)?.0)
    });
    let base = rand_tensor(rng, &[4, 3, 2, 2]);
    let bt = rand_tensor(rng, &[3]);
    case!("batch_norm.batch.gamma", positive(rng, &[3]), move |t: &mut Tape<f64>, x| {
        let (i, b) = (t.constant(base.clone()), t.constant(bt.clone()));
        Ok(t.batch_norm(i, x, b, BnMode::Batch, 1e-5)?.0)
    });
    let base = rand_tensor(rng, &[4, 3, 2, 2]);
    let gm = positive(rng, &[3]);
    case!("batch_norm.batch.beta", rand_tensor(rng, &[3]), move |t: &mut Tape<f64>, x| {
        let (i, g) = (t.constant(base.clone()), t.constant(gm.clone()));
        Ok(t.batch_norm(i, g, x, BnMode::Batch, 1e-5)?.0)
    });
    let (gm, bt) = (positive(rng, &[3]), rand_tensor(rng, &[3]));
    let (mean, var) = (rand_tensor(rng, &[3]).data().to_vec(), positive(rng, &[3]).data().to_vec());
    case!("batch_norm.frozen", rand_tensor(rng, &[2, 3, 2, 2]), move |t: &mut Tape<f64>, x| {
        let (g, b) = (t.constant(gm.clone()), t.constant(bt.clone()));
        let mode = BnMode::Frozen { mean: &mean, var: &var };
        Ok(t.batch_norm(x, g, b, mode, 1e-5)?.0)
    });
    let (gm, bt) = (positive(rng, &[5]), rand_tensor(rng, &[5]));
    case!("layer_norm.x", rand_tensor(rng, &[3, 5]), move |t: &mut Tape<f64>, x| {
        let (g, b) = (t.constant(gm.clone()), t.constant(bt.clone()));
        t.layer_norm(x, g, b, 1e-5)
    });
    let (base, bt) = (rand_tensor(rng, &[3, 5]), rand_tensor(rng, &[5]));
    case!("layer_norm.gamma", positive(rng, &[5]), move |t: &mut Tape<f64>, x| {
        let (i, b) = (t.constant(base.clone()), t.constant(bt.clone()));
        t.layer_norm(i, x, b, 1e-5)
    });
    let (base, gm) = (rand_tensor(rng, &[3, 5]), positive(rng, &[5]));
    case!("layer_norm.beta", rand_tensor(rng, &[5]), move |t: &mut Tape<f64>, x| {
        let (i, g) = (t.constant(base.clone()), t.constant(gm.clone()));
        t.layer_norm(i, g, x, 1e-5)
    });
    case!("upsample_nearest", rand_tensor(rng, &[2, 2, 3, 3]), |t: &mut Tape<f64>, x| t.upsample_nearest(x, 2));
    case!("downsample_nearest", rand_tensor(rng, &[2, 2, 4, 4]), |t: &mut Tape<f64>, x| t.downsample_nearest(x, 2));
    case!("embedding", rand_tensor(rng, &[6, 3]), |t: &mut Tape<f64>, x| t.embedding(x, &[2, 0, 2, 5, 1]));
    let (qs, ks) = (Segments::new(vec![2, 3]), Segments::new(vec![4, 1]));
    let (k, v) = (rand_tensor(rng, &[5, 4]), rand_tensor(rng, &[5, 4]));
    {
        let (qs, ks) = (qs.clone(), ks.clone());
        case!("attention.q", rand_tensor(rng, &[5, 4]), move |t: &mut Tape<f64>, x| {
            let (k, v) = (t.constant(k.clone()), t.constant(v.clone()));
            t.attention(x, k, v, &qs, &ks, 2)
        });
    }
    let (q, v) = (rand_tensor(rng, &[5, 4]), rand_tensor(rng, &[5, 4]));
    {
        let (qs, ks) = (qs.clone(), ks.clone());
        case!("attention.k", rand_tensor(rng, &[5, 4]), move |t: &mut Tape<f64>, x| {
            let (q, v) = (t.constant(q.clone()), t.constant(v.clone()));
            t.attention(q, x, v, &qs, &ks, 2)
        });
    }
    let (q, k) = (rand_tensor(rng, &[5, 4]), rand_tensor(rng, &[5, 4]));
    case!("attention.v", rand_tensor(rng, &[5, 4]), move |t: &mut Tape<f64>, x| {
        let (q, k) = (t.constant(q.clone()), t.constant(k.clone()));
        t.attention(q, k, x, &qs, &ks, 2)
    });
    let segs = Segments::new(vec![1, 3, 2]);
    case!("segment_mean", rand_tensor(rng, &[6, 3]), move |t: &mut Tape<f64>, x| t.segment_mean(x, &segs));
    case!("weighted_nll", rand_tensor(rng, &[4, 5]), |t: &mut Tape<f64>, x| {
        let lp = t.log_softmax(x)?;
        t.weighted_nll(lp, &[0, 4, 2, 2], &[1.0, 0.5, 2.0, 0.25])
    });
    case!("pick", rand_tensor(rng, &[4, 5]), |t: &mut Tape<f64>, x| t.pick(x, &[1, 1, 4, 0]));
    cases
}

/// Checks every differentiable operation under one seed.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases(&mut rng) {
        let w = rand_tensor(&mut rng, &out_shape(&case.f, &case.input)?);
        let f = &case.f;
        let rep = grad_check(
            |t: &mut Tape<f64>, x| {
                let y = f(t, x)?;
                project(t, y, &w)
            },
            &case.input,
            EPS,
        )?;
        out.push(CheckResult {
            name: case.name.to_string(),
            seed,
            max_rel_error: rep.max_rel_error,
            tolerance: OP_TOLERANCE,
            coordinates: rep.coordinates,
            kinked: rep.kinked,
        });
    }
    Ok(out)
}

/// Micro configuration used by the model-level checks.
pub fn micro_config(order: BcaOrder, variant: OgaVariant) -> ModelConfig {
    ModelConfig {
        bca_order: order,
        oga_variant: variant,
        ..ModelConfig::micro(7, 5)
    }
}

/// Checks the gradient of the full two-stage forward pass with respect to every
/// parameter at once. Pseudo masks come from the unperturbed pass, since the
/// argmax has no gradient.
pub fn model_check(seed: u64, order: BcaOrder, variant: OgaVariant, prefix: Option<&str>) -> ModelResult<CheckResult> {
    let model = Soba::<f64>::new(micro_config(order, variant), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = &model.config;
    let images = rand_tensor(&mut rng, &[2, 3, c.image_size, c.image_size]);
    let questions: Vec<Vec<usize>> = vec![vec![1, 4, 2], vec![3, 6, 0, 5, 2]];
    let qrefs: Vec<&[usize]> = questions.iter().map(|q| q.as_slice()).collect();
    let keep = |n: &str| prefix.is_none_or(|p| n.starts_with(p));
    let (mut flat, offsets) = model.params.flatten(keep);
    // Zero biases and tiny early activations put normalization layers near a
    // singular point, so the probe is taken at a jittered parameter vector.
    for v in flat.data_mut() {
        *v += rng.gen_range(-JITTER..JITTER);
    }

    let masks = {
        let mut tape = Tape::new();
        let mut b = Binder::new(&model.params, true);
        let x = tape.constant(images.clone());
        let seg = model.segment(&mut tape, &mut b, x)?;
        argmax_mask(tape.value(seg.logits))
    };
    let mrefs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let seg_shape = [2, c.num_classes, c.image_size, c.image_size];
    let w_seg = rand_tensor(&mut rng, &seg_shape);
    let w_ans = rand_tensor(&mut rng, &[2, c.answer_vocab]);

    let rep = grad_check(
        |t: &mut Tape<f64>, p| {
            let mut b = Binder::new(&model.params, true).with_flat(p, offsets.clone());
            let x = t.constant(images.clone());
            let seg = model.segment(t, &mut b, x).map_err(model_err)?;
            let out = model
                .stage2(t, &mut b, seg.fv, &mrefs, &qrefs, Stage2Options::default())
                .map_err(model_err)?;
            let a = project(t, out.logits, &w_ans)?;
            let s = project(t, seg.logits, &w_seg)?;
            t.add(a, s)
        },
        &flat,
        EPS,
    )?;
    Ok(CheckResult {
        name: format!("model.{}.{}{}", order.name(), variant.name(), prefix.map(|p| format!(".{p}")).unwrap_or_default()),
        seed,
        max_rel_error: rep.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        coordinates: rep.coordinates,
        kinked: rep.kinked,
    })
}

/// Operation checks plus whole-model and language-encoder checks for each seed.
pub fn run_all(seeds: &[u64]) -> ModelResult<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(op_checks(seed)?);
        let mut lstm = model_check(seed, BcaOrder::VvvLll, OgaVariant::Oga, Some("lang."))?;
        lstm.tolerance = OP_TOLERANCE;
        lstm.name = "lstm".into();
        out.push(lstm);
        out.push(model_check(seed, BcaOrder::VvvLll, OgaVariant::Oga, None)?);
    }
    Ok(out)
}


