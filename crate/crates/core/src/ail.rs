//! Adversarial integrity learning: source images are masked by predicted
//! and ground-truth maps, and a small convolutional discriminator learns to
//! tell the two apart.
//!
//! Real (ground-truth-masked) and fake (prediction-masked) images always go
//! through the discriminator as one joint batch, real half first, so batch
//! normalization sees both populations with the same statistics.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::layers::{fan_in_uniform, BatchNorm, Bound, Conv, Ctx, Mode, ParamStore};
use crate::losses::bce_loss as bce_mean;
use crate::tensor::{Element, Tensor};

pub const DISC_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROB_EPS: f64 = 1e-7;

/// `source * map`, the map broadcast over the three colour channels.
pub fn mask_images<T: Element>(ctx: &mut Ctx<'_, T>, source: Var, maps: Var) -> Result<Var> {
    let (ss, sm) = (ctx.tape.shape(source).to_vec(), ctx.tape.shape(maps).to_vec());
    if ss.len() != 4 || sm.len() != 4 || ss[1] != 3 || sm[1] != 1 || ss[0] != sm[0] || ss[2..] != sm[2..] {
        return Err(shape_err!("mask_images: source {:?} and maps {:?} do not pair", ss, sm));
    }
    let m3 = ctx.tape.concat(&[maps, maps, maps], 1)?;
    ctx.tape.mul(source, m3)
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv,
    bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    blocks: Vec<DiscBlock>,
    head_w: String,
    head_b: String,
}

impl Discriminator {
    pub fn build<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: [usize; 4]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("disc/b{}", i + 1);
            // The first block has no normalization, so it keeps a bias.
            let first = i == 0;
            blocks.push(DiscBlock {
                conv: Conv::build(store, rng, &format!("{name}/conv"), cin, c, 4, 2, 1, first)?,
                bn: if first {
                    None
                } else {
                    Some(BatchNorm::build(store, &format!("{name}/bn"), c)?)
                },
            });
            cin = c;
        }
        let head_w = "disc/head/w".to_string();
        let head_b = "disc/head/b".to_string();
        store.add_param(&head_w, fan_in_uniform(&[cin, 1], cin, rng))?;
        store.add_param(&head_b, Tensor::zeros(&[1]))?;
        Ok(Discriminator { blocks, head_w, head_b })
    }

    /// Probability of "real" per image, clamped into `[1e-7, 1 - 1e-7]`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(shape_err!("discriminator: expected B x 3 x H x W with H, W divisible by 16, got {:?}", s));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.conv.forward(ctx, h)?;
            if let Some(bn) = &b.bn {
                h = bn.forward(ctx, h)?;
            }
            h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = ctx.tape.global_avg_pool(h)?;
        let w = ctx.p(&self.head_w)?;
        let b = ctx.p(&self.head_b)?;
        let logit = ctx.tape.matmul(pooled, w)?;
        let logit = ctx.tape.bias_add(logit, b)?;
        let p = ctx.tape.sigmoid(logit);
        let p = ctx.tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        ctx.tape.reshape(p, &[s[0]])
    }

    /// Scores `[source * gt ; source * pred]` jointly; returns the real and
    /// fake halves.
    pub fn score_pair<T: Element>(&self, ctx: &mut Ctx<'_, T>, source: Var, pred: Var, gt: Var) -> Result<(Var, Var)> {
        let real = mask_images(ctx, source, gt)?;
        let fake = mask_images(ctx, source, pred)?;
        let joint = ctx.tape.concat(&[real, fake], 0)?;
        let t = self.forward(ctx, joint)?;
        let b = ctx.tape.shape(source)[0];
        let halves = ctx.tape.split(t, 0, &[b, b])?;
        Ok((halves[0], halves[1]))
    }
}

/// Generator-side objective: mean of `-log T` on the prediction-masked
/// images (non-saturating target 1). Discriminator parameters enter as
/// constants, so gradients reach only `pred`.
pub fn adv_generator_loss<T: Element>(
    ctx: &mut Ctx<'_, T>,
    disc: &Discriminator,
    source: Var,
    pred: Var,
    gt: Var,
) -> Result<Var> {
    let (_, fake) = disc.score_pair(ctx, source, pred, gt)?;
    let ones = ctx.tape.constant(Tensor::ones(ctx.tape.shape(fake)));
    bce_mean(ctx.tape, fake, ones)
}

/// Discriminator objective `lambda5 * (BCE(real, 1) + BCE(fake, 0)) / 2`;
/// `pred` is detached first.
pub fn disc_loss<T: Element>(
    ctx: &mut Ctx<'_, T>,
    disc: &Discriminator,
    source: Var,
    pred: Var,
    gt: Var,
    lambda5: f64,
) -> Result<(Var, DiscScores)> {
    let pred = ctx.tape.detach(pred);
    let (real, fake) = disc.score_pair(ctx, source, pred, gt)?;
    let ones = ctx.tape.constant(Tensor::ones(ctx.tape.shape(real)));
    let zeros = ctx.tape.constant(Tensor::zeros(ctx.tape.shape(fake)));
    let lr = bce_mean(ctx.tape, real, ones)?;
    let lf = bce_mean(ctx.tape, fake, zeros)?;
    let sum = ctx.tape.add(lr, lf)?;
    let loss = ctx.tape.scale(sum, lambda5 / 2.0);
    let scores = DiscScores {
        real: ctx.tape.value(real).to_f64_vec(),
        fake: ctx.tape.value(fake).to_f64_vec(),
    };
    Ok((loss, scores))
}

/// Discriminator outputs of one joint evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscScores {
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
}

impl DiscScores {
    /// Fraction classified correctly at 0.5.
    pub fn accuracy(&self) -> f64 {
        let correct = self.real.iter().filter(|&&p| p > 0.5).count() + self.fake.iter().filter(|&&p| p < 0.5).count();
        correct as f64 / (self.real.len() + self.fake.len()).max(1) as f64
    }
}

/// A discriminator with its parameters.
#[derive(Clone, Debug)]
pub struct DiscState<T: Element = f32> {
    pub net: Discriminator,
    pub store: ParamStore<T>,
}

impl<T: Element> DiscState<T> {
    pub fn new(rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Discriminator::build(&mut store, rng, DISC_CHANNELS)?;
        Ok(DiscState { net, store })
    }

    /// Forward and backward of the discriminator loss on constant inputs;
    /// gradients are left in the store.
    pub fn loss_and_grads(
        &mut self,
        source: &Tensor<T>,
        pred: &Tensor<T>,
        gt: &Tensor<T>,
        lambda5: f64,
    ) -> Result<(f64, DiscScores, Bound)> {
        let mut tape = crate::autodiff::Tape::new();
        let s = tape.constant(source.clone());
        let p = tape.constant(pred.clone());
        let g = tape.constant(gt.clone());
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train, true);
        let (loss, scores) = disc_loss(&mut ctx, &self.net, s, p, g, lambda5)?;
        let bound = ctx.finish();
        tape.backward(loss)?;
        self.store.zero_grads();
        bound.collect_grads(&tape, &mut self.store)?;
        Ok((tape.value(loss).item().f64(), scores, bound))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_half() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let src = tape.constant(Tensor::ones(&[1, 3, 1, 2]));
        let m = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let out = mask_images(&mut ctx, src, m).unwrap();
        assert_eq!(ctx.tape.value(out).data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_head_gives_half_and_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = DiscState::<f64>::new(&mut rng).unwrap();
        d.store.param_mut("disc/head/w").unwrap().data_mut().fill(0.0);
        let src = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let pred = Tensor::full(&[2, 1, 16, 16], 0.5);
        let gt = Tensor::ones(&[2, 1, 16, 16]);
        let (loss, scores, _) = d.loss_and_grads(&src, &pred, &gt, 3.0).unwrap();
        assert!(scores.real.iter().chain(&scores.fake).all(|&p| p == 0.5));
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_indivisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = DiscState::<f64>::new(&mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 24, 24]));
        let mut ctx = Ctx::new(&mut tape, &d.store, Mode::Train, false);
        assert!(d.net.forward(&mut ctx, x).is_err());
    }
}
