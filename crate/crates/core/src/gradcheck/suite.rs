//! The gradient-check suite: every differentiable tape operation on
//! several shapes, each composite loss, the consensus module and a small
//! full model, all in 64-bit against central differences.
//!
//! Vector-valued outputs are reduced by a fixed random projection so every
//! output coordinate contributes to the checked gradient.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, relative_error};
use crate::ail::{adv_generator_loss, Discriminator, DISC_CHANNELS};
use crate::autodiff::{NormStats, Tape, Var};
use crate::error::Result;
use crate::gcam::Gcam;
use crate::layers::{Ctx, Mode, ParamStore};
use crate::losses::{bce_loss, iou_loss, total_generator_loss, LossParts, LossWeights};
use crate::mcm::mcm_loss_vars;
use crate::network::{GroupSlice, Model, ModelConfig};
use crate::tensor::Tensor;

pub const OP_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;
pub const STEP: f64 = 1e-6;
/// Largest initial logit magnitude of the full-model check.
const LOGIT_BOUND: f64 = 8.0;
/// The weighted total is large (about 45) while some of its partials are
/// near 1e-6, so one ulp of the loss swamps a 1e-6 difference quotient;
/// the larger step keeps rounding error below the threshold.
pub const TOTAL_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// How the entries of one input are drawn.
#[derive(Clone, Copy, Debug)]
enum Dist {
    /// Uniform in `[-1, 1]`, kept at least 0.05 away from each listed kink.
    Uniform(&'static [f64]),
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Uniform in `[0.05, 0.95]`.
    Prob,
}

const SMOOTH: Dist = Dist::Uniform(&[]);
const KINK0: Dist = Dist::Uniform(&[0.0]);

fn sample(d: Dist, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| match d {
            Dist::Uniform(kinks) => {
                let mut v: f64 = rng.gen_range(-1.0..1.0);
                for &k in kinks {
                    if (v - k).abs() < 0.05 {
                        v = k + if v >= k { 0.1 } else { -0.1 };
                    }
                }
                v
            }
            Dist::Positive => rng.gen_range(0.5..2.0),
            Dist::Prob => rng.gen_range(0.05..0.95),
        })
        .collect()
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<(Vec<usize>, Dist)>,
    f: OpFn,
    step: f64,
}

fn case(inputs: &[(&[usize], Dist)], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f: Box::new(f),
        step: STEP,
    }
}

/// `sum(y * w)` with `w` drawn from a fixed stream for `y`'s shape.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x70726f6a);
    let w = tape.constant(Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Splits the flat input into the case's tensors.
fn unpack(tape: &mut Tape<f64>, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let part = tape.slice(x, 0, offset, n)?;
        out.push(tape.reshape(part, s)?);
        offset += n;
    }
    Ok(out)
}

fn run_cases(name: &str, cases: Vec<Case>, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let n = cases.len();
    for c in cases {
        let mut data = Vec::new();
        for (s, d) in &c.inputs {
            data.extend(sample(*d, s.iter().product(), rng));
        }
        let x = Tensor::new(&[data.len()], data)?;
        let shapes: Vec<Vec<usize>> = c.inputs.iter().map(|(s, _)| s.clone()).collect();
        let f = &c.f;
        let err = grad_check(
            |tape, x| {
                let parts = unpack(tape, x, &shapes)?;
                let y = f(tape, &parts)?;
                project(tape, y)
            },
            &x,
            c.step,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: name.to_string(),
        cases: n,
        max_rel_error: worst,
        threshold: OP_THRESHOLD,
    })
}

const SHAPES: [&[usize]; 3] = [&[5], &[2, 3], &[2, 3, 4]];

fn unary(f: impl Fn(&mut Tape<f64>, Var) -> Var + Copy + 'static, d: Dist) -> Vec<Case> {
    SHAPES.iter().map(|s| case(&[(s, d)], move |t, v| Ok(f(t, v[0])))).collect()
}

fn binary(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + Copy + 'static, da: Dist, db: Dist) -> Vec<Case> {
    SHAPES
        .iter()
        .map(|s| case(&[(s, da), (s, db)], move |t, v| f(t, v[0], v[1])))
        .collect()
}

fn op_cases() -> Vec<(&'static str, Vec<Case>)> {
    let mut ops: Vec<(&'static str, Vec<Case>)> = vec![
        ("add", binary(|t, a, b| t.add(a, b), SMOOTH, SMOOTH)),
        ("sub", binary(|t, a, b| t.sub(a, b), SMOOTH, SMOOTH)),
        ("mul", binary(|t, a, b| t.mul(a, b), SMOOTH, SMOOTH)),
        ("div", binary(|t, a, b| t.div(a, b), SMOOTH, Dist::Positive)),
        ("scale", unary(|t, x| t.scale(x, -1.7), SMOOTH)),
        ("add_scalar", unary(|t, x| t.add_scalar(x, 0.3), SMOOTH)),
        ("rsub_scalar", unary(|t, x| t.rsub_scalar(x, 2.0), SMOOTH)),
        ("relu", unary(|t, x| t.relu(x), KINK0)),
        ("leaky_relu", unary(|t, x| t.leaky_relu(x, 0.2), KINK0)),
        ("sigmoid", unary(|t, x| t.sigmoid(x), SMOOTH)),
        ("log", unary(|t, x| t.log_clamped(x, 1e-7), Dist::Positive)),
        ("clamp", unary(|t, x| t.clamp(x, -0.5, 0.5), Dist::Uniform(&[-0.5, 0.5]))),
        ("sum", unary(|t, x| t.sum(x), SMOOTH)),
        ("mean", unary(|t, x| t.mean(x), SMOOTH)),
        ("l2_norm", unary(|t, x| t.l2_norm(x), SMOOTH)),
    ];
    ops.push((
        "sum_axis",
        vec![
            case(&[(&[2, 3], SMOOTH)], |t, v| t.sum_axis(v[0], 1)),
            case(&[(&[2, 3, 4], SMOOTH)], |t, v| t.sum_axis(v[0], 0)),
            case(&[(&[2, 3, 2, 2], SMOOTH)], |t, v| t.sum_axis(v[0], 3)),
        ],
    ));
    ops.push((
        "mean_axis",
        vec![
            case(&[(&[2, 3], SMOOTH)], |t, v| t.mean_axis(v[0], 0)),
            case(&[(&[2, 3, 4], SMOOTH)], |t, v| t.mean_axis(v[0], 2)),
            case(&[(&[4, 2, 3], SMOOTH)], |t, v| t.mean_axis(v[0], 1)),
        ],
    ));
    ops.push((
        "matmul",
        vec![
            case(&[(&[2, 3], SMOOTH), (&[3, 4], SMOOTH)], |t, v| t.matmul(v[0], v[1])),
            case(&[(&[1, 5], SMOOTH), (&[5, 2], SMOOTH)], |t, v| t.matmul(v[0], v[1])),
            case(&[(&[4, 4], SMOOTH), (&[4, 3], SMOOTH)], |t, v| t.matmul(v[0], v[1])),
        ],
    ));
    ops.push((
        "conv2d",
        vec![
            case(&[(&[1, 2, 5, 5], SMOOTH), (&[3, 2, 3, 3], SMOOTH), (&[3], SMOOTH)], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            }),
            case(&[(&[2, 3, 8, 8], SMOOTH), (&[2, 3, 4, 4], SMOOTH), (&[2], SMOOTH)], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
            }),
            case(&[(&[2, 2, 3, 4], SMOOTH), (&[3, 2, 1, 1], SMOOTH)], |t, v| t.conv2d(v[0], v[1], None, 1, 0)),
        ],
    ));
    ops.push((
        "depthwise_conv2d",
        vec![
            case(&[(&[2, 3, 2, 2], SMOOTH), (&[3, 1, 1], SMOOTH)], |t, v| t.depthwise_conv2d(v[0], v[1])),
            case(&[(&[1, 1, 3, 3], SMOOTH), (&[1, 1, 1], SMOOTH)], |t, v| t.depthwise_conv2d(v[0], v[1])),
            case(&[(&[3, 2, 1, 4], SMOOTH), (&[2, 1, 1], SMOOTH)], |t, v| t.depthwise_conv2d(v[0], v[1])),
        ],
    ));
    ops.push((
        "softmax",
        vec![
            case(&[(&[2, 5], SMOOTH)], |t, v| t.softmax(v[0], 1)),
            case(&[(&[4, 3], SMOOTH)], |t, v| t.softmax(v[0], 0)),
            case(&[(&[2, 3, 4], SMOOTH)], |t, v| t.softmax(v[0], 1)),
        ],
    ));
    ops.push((
        "resize",
        vec![
            case(&[(&[1, 1, 3, 3], SMOOTH)], |t, v| t.resize(v[0], 5, 4)),
            case(&[(&[2, 2, 4, 4], SMOOTH)], |t, v| t.resize(v[0], 2, 2)),
            case(&[(&[1, 3, 2, 5], SMOOTH)], |t, v| t.resize(v[0], 4, 10)),
        ],
    ));
    ops.push((
        "concat",
        vec![
            case(&[(&[2, 3], SMOOTH), (&[1, 3], SMOOTH)], |t, v| t.concat(&[v[0], v[1]], 0)),
            case(&[(&[2, 1, 2], SMOOTH), (&[2, 3, 2], SMOOTH)], |t, v| t.concat(&[v[0], v[1], v[0]], 1)),
            case(&[(&[1, 2, 2, 1], SMOOTH), (&[1, 2, 2, 2], SMOOTH)], |t, v| t.concat(&[v[0], v[1]], 3)),
        ],
    ));
    ops.push((
        "slice_split",
        vec![
            case(&[(&[4, 3], SMOOTH)], |t, v| t.slice(v[0], 0, 1, 2)),
            case(&[(&[2, 5, 2], SMOOTH)], |t, v| t.slice(v[0], 1, 2, 3)),
            case(&[(&[3, 4], SMOOTH)], |t, v| {
                let p = t.split(v[0], 1, &[1, 3])?;
                let a = t.sum(p[0]);
                let b = t.l2_norm(p[1]);
                t.mul(a, b)
            }),
        ],
    ));
    ops.push((
        "index_select",
        vec![
            case(&[(&[4, 2], SMOOTH)], |t, v| t.index_select(v[0], &[3, 0, 0, 1])),
            case(&[(&[3, 2, 2], SMOOTH)], |t, v| t.index_select(v[0], &[2, 1, 0])),
            case(&[(&[5], SMOOTH)], |t, v| t.index_select(v[0], &[4, 4])),
        ],
    ));
    ops.push((
        "reshape",
        vec![
            case(&[(&[2, 3], SMOOTH)], |t, v| t.reshape(v[0], &[3, 2])),
            case(&[(&[2, 3, 4], SMOOTH)], |t, v| t.reshape(v[0], &[24])),
            case(&[(&[6], SMOOTH)], |t, v| t.reshape(v[0], &[1, 2, 3])),
        ],
    ));
    ops.push((
        "permute",
        vec![
            case(&[(&[2, 3], SMOOTH)], |t, v| t.transpose2d(v[0])),
            case(&[(&[2, 3, 4], SMOOTH)], |t, v| t.permute(v[0], &[2, 0, 1])),
            case(&[(&[2, 3, 2, 2], SMOOTH)], |t, v| t.permute(v[0], &[0, 2, 3, 1])),
        ],
    ));
    ops.push((
        "batch_norm",
        vec![
            case(&[(&[4, 3, 2, 2], SMOOTH), (&[3], Dist::Positive), (&[3], SMOOTH)], |t, v| {
                Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0)
            }),
            case(&[(&[5, 2], SMOOTH), (&[2], Dist::Positive), (&[2], SMOOTH)], |t, v| {
                Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0)
            }),
            case(&[(&[2, 2, 3, 3], SMOOTH), (&[2], Dist::Positive), (&[2], SMOOTH)], |t, v| {
                let (mean, var) = ([0.1, -0.2], [0.5, 1.5]);
                Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Fixed { mean: &mean, var: &var })?.0)
            }),
        ],
    ));
    ops.push((
        "global_avg_pool",
        vec![
            case(&[(&[2, 3, 2, 2], SMOOTH)], |t, v| t.global_avg_pool(v[0])),
            case(&[(&[1, 1, 4, 3], SMOOTH)], |t, v| t.global_avg_pool(v[0])),
            case(&[(&[3, 2, 1, 1], SMOOTH)], |t, v| t.global_avg_pool(v[0])),
        ],
    ));
    ops.push((
        "bias_add",
        vec![
            case(&[(&[2, 3], SMOOTH), (&[3], SMOOTH)], |t, v| t.bias_add(v[0], v[1])),
            case(&[(&[2, 3, 2, 2], SMOOTH), (&[3], SMOOTH)], |t, v| t.bias_add(v[0], v[1])),
            case(&[(&[1, 2, 3], SMOOTH), (&[2], SMOOTH)], |t, v| t.bias_add(v[0], v[1])),
        ],
    ));
    ops
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("sized")
}

const MAP_SHAPES: [&[usize]; 3] = [&[1, 1, 4, 4], &[2, 1, 3, 5], &[3, 1, 2, 2]];

fn loss_cases() -> Vec<(&'static str, Vec<Case>)> {
    let bce = MAP_SHAPES
        .iter()
        .map(|s| {
            let gt = binary_mask(s, 1);
            case(&[(s, Dist::Prob)], move |t, v| {
                let g = t.constant(gt.clone());
                bce_loss(t, v[0], g)
            })
        })
        .collect();
    let iou = MAP_SHAPES
        .iter()
        .map(|s| {
            let gt = binary_mask(s, 2);
            case(&[(s, Dist::Prob)], move |t, v| {
                let g = t.constant(gt.clone());
                iou_loss(t, v[0], g)
            })
        })
        .collect();
    let mcm = [(2usize, 3usize), (3, 4), (4, 2)]
        .iter()
        .map(|&(n, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let negatives: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::uniform(&[d], -1.0, 1.0, &mut rng)).collect();
            Case {
                inputs: (0..2 * n).map(|_| (vec![d], SMOOTH)).collect(),
                f: Box::new(move |t, v| {
                    let pairs: Vec<(Var, Var)> = v.chunks(2).map(|p| (p[0], p[1])).collect();
                    let negs: Vec<Var> = negatives.iter().map(|x| t.constant(x.clone())).collect();
                    mcm_loss_vars(t, &pairs, &negs, 0.1, false)
                }),
                step: STEP,
            }
        })
        .collect();
    let adv = [2usize, 3, 4]
        .iter()
        .map(|&b| {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + b as u64);
            let mut store = ParamStore::<f64>::new();
            let disc = Discriminator::build(&mut store, &mut rng, DISC_CHANNELS).expect("valid");
            let source = Tensor::<f64>::uniform(&[b, 3, 16, 16], 0.0, 1.0, &mut rng);
            let gt = binary_mask(&[b, 1, 16, 16], b as u64);
            case(&[(&[b, 1, 16, 16], Dist::Prob)], move |t, v| {
                let s = t.constant(source.clone());
                let g = t.constant(gt.clone());
                let mut ctx = Ctx::new(t, &store, Mode::Train, false);
                adv_generator_loss(&mut ctx, &disc, s, v[0], g)
            })
        })
        .collect();
    let total = [2usize, 3, 4]
        .iter()
        .map(|&b| {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + b as u64);
            let mut store = ParamStore::<f64>::new();
            let disc = Discriminator::build(&mut store, &mut rng, DISC_CHANNELS).expect("valid");
            let source = Tensor::<f64>::uniform(&[b, 3, 16, 16], 0.0, 1.0, &mut rng);
            let neg = Tensor::<f64>::uniform(&[16], 0.0, 1.0, &mut rng);
            let gt = binary_mask(&[b, 1, 16, 16], 30 + b as u64);
            case(&[(&[b, 1, 16, 16], Dist::Prob), (&[16], SMOOTH), (&[16], SMOOTH)], move |t, v| {
                let g = t.constant(gt.clone());
                let bce = bce_loss(t, v[0], g)?;
                let iou = iou_loss(t, v[0], g)?;
                let n = t.constant(neg.clone());
                let mcm = mcm_loss_vars(t, &[(v[1], v[2]), (v[2], v[1])], &[n, n], 0.1, false)?;
                let s = t.constant(source.clone());
                let mut ctx = Ctx::new(t, &store, Mode::Train, false);
                let adv = adv_generator_loss(&mut ctx, &disc, s, v[0], g)?;
                let parts = LossParts {
                    bce,
                    iou,
                    mcm: Some(mcm),
                    adv: Some(adv),
                };
                total_generator_loss(t, &parts, &LossWeights::default())
            })
        })
        .map(|c| Case { step: TOTAL_STEP, ..c })
        .collect();
    vec![("bce_loss", bce), ("iou_loss", iou), ("mcm_loss", mcm), ("adv_loss", adv), ("total_loss", total)]
}

fn gcam_cases() -> Vec<Case> {
    [(2usize, 4usize, 2usize), (4, 2, 1), (2, 6, 3)]
        .iter()
        .map(|&(s, c, hw)| {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + s as u64);
            let mut store = ParamStore::<f64>::new();
            let gcam = Gcam::build(&mut store, &mut rng, c).expect("valid");
            case(&[(&[s, c, hw, hw], SMOOTH)], move |t, v| {
                let mut ctx = Ctx::new(t, &store, Mode::Train, false);
                let out = gcam.forward(&mut ctx, "g", v[0], Some(7))?;
                let va = ctx.tape.l2_norm(out.vec_a);
                let f = ctx.tape.mul(out.feat_out, out.feat_out)?;
                let f = ctx.tape.mean(f);
                ctx.tape.add(va, f)
            })
        })
        .collect()
}

/// Loss of the micro model used by the full-model check.
struct MicroModel {
    model: Model,
    store: ParamStore<f64>,
    images: Tensor<f64>,
    gts: Tensor<f64>,
    negatives: Vec<Tensor<f64>>,
}

impl MicroModel {
    fn new(seed: u64) -> Result<Self> {
        let size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = ModelConfig {
            channels: [2, 4, 8, 16],
            gcam: true,
        };
        let model = Model::build(&mut store, &mut rng, config)?;
        let images = Tensor::uniform(&[4, 3, size, size], -1.0, 1.0, &mut rng);
        let gts = binary_mask(&[4, 1, size, size], seed);
        let negatives = (0..2).map(|_| Tensor::uniform(&[32], 0.0, 1.0, &mut rng)).collect();
        let mut m = MicroModel {
            model,
            store,
            images,
            gts,
            negatives,
        };
        m.temper_head()?;
        Ok(m)
    }

    /// Scales the saliency head so every logit lies within `LOGIT_BOUND`,
    /// keeping all pixels clear of the probability clamp, where the loss
    /// has kinks.
    fn temper_head(&mut self) -> Result<()> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(self.images.clone());
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train, false);
        let out = self.model.forward(&mut ctx, x, &Self::groups())?;
        let peak = tape.value(out.logits).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > LOGIT_BOUND {
            let k = LOGIT_BOUND / peak;
            for name in ["dec/head/w", "dec/head/b"] {
                for v in self.store.param_mut(name)?.data_mut() {
                    *v *= k;
                }
            }
        }
        Ok(())
    }

    fn groups() -> [GroupSlice; 2] {
        [
            GroupSlice {
                class_id: "a".into(),
                len: 2,
                seed: Some(1),
            },
            GroupSlice {
                class_id: "b".into(),
                len: 2,
                seed: Some(2),
            },
        ]
    }

    /// Forward to the scalar loss; with `grads` the parameter gradients are
    /// left in the store.
    fn loss(&mut self, grads: bool) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(self.images.clone());
        let y = tape.constant(self.gts.clone());
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train, grads);
        let out = self.model.forward(&mut ctx, x, &Self::groups())?;
        let bound = ctx.finish();
        let p = tape.sigmoid(out.logits);
        let bce = bce_loss(&mut tape, p, y)?;
        let iou = iou_loss(&mut tape, p, y)?;
        let pairs: Vec<(Var, Var)> = out.groups.iter().map(|g| (g.vec_a, g.vec_b)).collect();
        let negs: Vec<Var> = self.negatives.iter().map(|n| tape.constant(n.clone())).collect();
        let mcm = mcm_loss_vars(&mut tape, &pairs, &negs, 0.1, false)?;
        let parts = LossParts {
            bce,
            iou,
            mcm: Some(mcm),
            adv: None,
        };
        let total = total_generator_loss(&mut tape, &parts, &LossWeights::default())?;
        if grads {
            tape.backward(total)?;
            self.store.zero_grads();
            bound.collect_grads(&tape, &mut self.store)?;
        }
        Ok(tape.value(total).item())
    }
}

/// Checks `per_tensor` coordinates of every parameter of a micro model
/// (channel ladder 2, 4, 8, 16 on 32 x 32 images).
pub fn full_model_check(seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let mut m = MicroModel::new(seed)?;
    m.loss(true)?;
    let analytic: BTreeMap<String, Vec<f64>> = m
        .store
        .params()
        .map(|(n, p)| (n.clone(), p.grad().map_or(vec![0.0; p.numel()], |g| g.to_vec())))
        .collect();
    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6f72);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in &names {
        let n = m.store.param(name)?.numel();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let base = m.store.param(name)?.data()[i];
            m.store.param_mut(name)?.data_mut()[i] = base + STEP;
            let fp = m.loss(false)?;
            m.store.param_mut(name)?.data_mut()[i] = base - STEP;
            let fm = m.loss(false)?;
            m.store.param_mut(name)?.data_mut()[i] = base;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[name][i], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: "full_model".into(),
        cases: checked,
        max_rel_error: worst,
        threshold: MODEL_THRESHOLD,
    })
}

/// Runs the whole suite.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, cases) in op_cases().into_iter().chain(loss_cases()) {
        out.push(run_cases(name, cases, &mut rng)?);
    }
    out.push(run_cases("gcam", gcam_cases(), &mut rng)?);
    out.push(full_model_check(seed, 3)?);
    Ok(out)
}



