//! Group consensus aggregation: split a group in two shuffled halves, let
//! every position attend across all images of the group, fuse the result
//! with the original feature by depth-wise correlation, and pool consensus
//! vectors for the memory.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{contract_err, shape_err, Result};
use crate::layers::{Conv, Ctx, ParamStore};
use crate::tensor::Element;

/// Output of the module for one group.
#[derive(Clone, Debug)]
pub struct GroupConsensus {
    pub class_id: String,
    /// `S x 2C x H x W`, in the input image order.
    pub feat_out: Var,
    pub vec_a: Var,
    pub vec_b: Var,
}

/// Permutation of `0..n`: identity without a seed.
pub fn permutation(n: usize, seed: Option<u64>) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    p
}

pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Reorders the images of `feat` by `perm` and splits into halves `(A, B)`.
pub fn split_shuffle<T: Element>(ctx: &mut Ctx<'_, T>, feat: Var, perm: &[usize]) -> Result<(Var, Var)> {
    let s = ctx.tape.shape(feat)[0];
    if s % 2 != 0 {
        return Err(contract_err!("split_shuffle: group of {s} images cannot be split evenly"));
    }
    if perm.len() != s {
        return Err(shape_err!("split_shuffle: permutation of {} for {s} images", perm.len()));
    }
    let shuffled = ctx.tape.index_select(feat, perm)?;
    let halves = ctx.tape.split(shuffled, 0, &[s / 2, s / 2])?;
    Ok((halves[0], halves[1]))
}

/// `N x C x H x W` to `(N*H*W) x C`, one row per position.
fn positions<T: Element>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let p = ctx.tape.permute(x, &[0, 2, 3, 1])?;
    ctx.tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

fn unpositions<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
    let c = ctx.tape.shape(x)[1];
    let r = ctx.tape.reshape(x, &[n, h, w, c])?;
    ctx.tape.permute(r, &[0, 3, 1, 2])
}

#[derive(Clone, Debug)]
pub struct Gcam {
    channels: usize,
    query: Conv,
    key: Conv,
    value: Conv,
    out: Conv,
}

impl Gcam {
    pub fn build<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize) -> Result<Self> {
        if channels < 2 {
            return Err(contract_err!("gcam: needs at least 2 channels, got {channels}"));
        }
        let inner = channels / 2;
        Ok(Gcam {
            channels,
            query: Conv::build(store, rng, "gcam/query", channels, inner, 1, 1, 0, true)?,
            // A key bias shifts every logit of a query equally, which the
            // softmax cancels, so the key projection has none.
            key: Conv::build(store, rng, "gcam/key", channels, inner, 1, 1, 0, false)?,
            value: Conv::build(store, rng, "gcam/value", channels, inner, 1, 1, 0, true)?,
            out: Conv::build(store, rng, "gcam/out", inner, channels, 1, 1, 0, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-stochastic affinity between every position of `x` (rows, as
    /// queries) and every position (columns, as keys).
    pub fn affinity<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let q = positions(ctx, q)?;
        let k = positions(ctx, k)?;
        let kt = ctx.tape.transpose2d(k)?;
        let logits = ctx.tape.matmul(q, kt)?;
        ctx.tape.softmax(logits, 1)
    }

    /// Non-local block over all positions of all images in `x`, added
    /// residually.
    pub fn nonlocal_block<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(shape_err!("nonlocal_block: expected N x {} x H x W, got {:?}", self.channels, s));
        }
        let aff = self.affinity(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let v = positions(ctx, v)?;
        let attended = ctx.tape.matmul(aff, v)?;
        let attended = unpositions(ctx, attended, s[0], s[2], s[3])?;
        let projected = self.out.forward(ctx, attended)?;
        ctx.tape.add(x, projected)
    }

    /// Non-local block over the union of both halves.
    pub fn nonlocal_consensus<T: Element>(&self, ctx: &mut Ctx<'_, T>, a: Var, b: Var) -> Result<(Var, Var)> {
        if ctx.tape.shape(a) != ctx.tape.shape(b) {
            return Err(shape_err!(
                "nonlocal_consensus: halves {:?} and {:?} differ",
                ctx.tape.shape(a),
                ctx.tape.shape(b)
            ));
        }
        let half = ctx.tape.shape(a)[0];
        let x = ctx.tape.concat(&[a, b], 0)?;
        let y = self.nonlocal_block(ctx, x)?;
        let parts = ctx.tape.split(y, 0, &[half, half])?;
        Ok((parts[0], parts[1]))
    }

    /// Full module for one group with an explicit shuffle `perm`.
    pub fn forward_with_perm<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        class_id: &str,
        feat: Var,
        perm: &[usize],
    ) -> Result<GroupConsensus> {
        let (a, b) = split_shuffle(ctx, feat, perm)?;
        let (a2, b2) = self.nonlocal_consensus(ctx, a, b)?;
        let shuffled = ctx.tape.concat(&[a2, b2], 0)?;
        let cons = ctx.tape.index_select(shuffled, &inverse_permutation(perm))?;
        let feat_out = depthwise_fuse(ctx, feat, cons)?;
        let (vec_a, vec_b) = half_vectors(ctx, feat_out, perm)?;
        Ok(GroupConsensus {
            class_id: class_id.to_string(),
            feat_out,
            vec_a,
            vec_b,
        })
    }

    /// With a seed the group must have an even size. Without one the
    /// shuffle is the identity; an odd-sized group (inference only) then
    /// attends over all its images at once and both consensus vectors pool
    /// the whole group.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        class_id: &str,
        feat: Var,
        seed: Option<u64>,
    ) -> Result<GroupConsensus> {
        let s = ctx.tape.shape(feat)[0];
        if s % 2 == 0 || seed.is_some() {
            return self.forward_with_perm(ctx, class_id, feat, &permutation(s, seed));
        }
        let cons = self.nonlocal_block(ctx, feat)?;
        let feat_out = depthwise_fuse(ctx, feat, cons)?;
        let pooled = ctx.tape.global_avg_pool(feat_out)?;
        let v = ctx.tape.mean_axis(pooled, 0)?;
        Ok(GroupConsensus {
            class_id: class_id.to_string(),
            feat_out,
            vec_a: v,
            vec_b: v,
        })
    }
}

/// Scales each channel of `orig` by the mean of `cons` over images and
/// space, then concatenates `cons` along channels.
pub fn depthwise_fuse<T: Element>(ctx: &mut Ctx<'_, T>, orig: Var, cons: Var) -> Result<Var> {
    if ctx.tape.shape(orig) != ctx.tape.shape(cons) {
        return Err(shape_err!(
            "depthwise_fuse: {:?} and {:?} differ",
            ctx.tape.shape(orig),
            ctx.tape.shape(cons)
        ));
    }
    let c = ctx.tape.shape(cons)[1];
    let pooled = ctx.tape.global_avg_pool(cons)?;
    let kernel = ctx.tape.mean_axis(pooled, 0)?;
    let kernel = ctx.tape.reshape(kernel, &[c, 1, 1])?;
    let fused = ctx.tape.depthwise_conv2d(orig, kernel)?;
    ctx.tape.concat(&[fused, cons], 1)
}

/// Mean pooled vector of the images in each half of `perm`.
pub fn half_vectors<T: Element>(ctx: &mut Ctx<'_, T>, feat: Var, perm: &[usize]) -> Result<(Var, Var)> {
    let half = perm.len() / 2;
    let pooled = ctx.tape.global_avg_pool(feat)?;
    let a = ctx.tape.index_select(pooled, &perm[..half])?;
    let b = ctx.tape.index_select(pooled, &perm[half..])?;
    Ok((ctx.tape.mean_axis(a, 0)?, ctx.tape.mean_axis(b, 0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::Mode;
    use crate::tensor::Tensor;

    fn setup(c: usize) -> (Gcam, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let g = Gcam::build(&mut store, &mut rng, c).unwrap();
        (g, store)
    }

    #[test]
    fn split_identity_and_odd() {
        let (_, store) = setup(2);
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..4).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(&[4, 1, 1, 1], data).unwrap());
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let (a, b) = split_shuffle(&mut ctx, x, &permutation(4, None)).unwrap();
        assert_eq!(ctx.tape.value(a).data(), &[0.0, 1.0]);
        assert_eq!(ctx.tape.value(b).data(), &[2.0, 3.0]);
        let odd = ctx.tape.constant(Tensor::zeros(&[3, 1, 1, 1]));
        assert!(split_shuffle(&mut ctx, odd, &permutation(3, None)).is_err());
    }

    #[test]
    fn fuse_with_ones_keeps_original() {
        let (_, store) = setup(2);
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = tape.constant(Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng));
        let ones = tape.constant(Tensor::ones(&[2, 2, 3, 3]));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let out = depthwise_fuse(&mut ctx, orig, ones).unwrap();
        let expect = ctx.tape.concat(&[orig, ones], 1).unwrap();
        assert_eq!(ctx.tape.value(out), ctx.tape.value(expect));
    }

    #[test]
    fn output_shape_and_rows() {
        let (g, store) = setup(4);
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::uniform(&[4, 4, 2, 2], -1.0, 1.0, &mut rng));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let out = g.forward(&mut ctx, "c", x, Some(9)).unwrap();
        assert_eq!(ctx.tape.shape(out.feat_out), &[4, 8, 2, 2]);
        assert_eq!(ctx.tape.shape(out.vec_a), &[8]);
        let aff = g.affinity(&mut ctx, x).unwrap();
        let a = ctx.tape.value(aff);
        for row in a.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
