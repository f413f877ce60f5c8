//! Encoder/decoder skeleton: a four-stage convolutional feature pyramid,
//! 1x1 lateral projections, and a decoder of four residual blocks that ends
//! in a single-channel saliency logit map.

use rand::Rng;

use crate::autodiff::{sigmoid, Var};
use crate::error::{shape_err, Result};
use crate::layers::{BatchNorm, Conv, Ctx, ParamStore, ResBlock};
use crate::metrics::SaliencyMap;
use crate::tensor::{Element, Tensor};

/// Total downsampling of the encoder.
pub const STRIDE: usize = 32;

/// Upper clamp applied to predicted probabilities.
pub const PROB_EPS: f64 = 1e-7;

/// Stage features at `H/4, H/8, H/16` (the lateral taps) and `H/32`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub lateral: [Var; 3],
    pub last: Var,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Conv,
    bn: BatchNorm,
    res: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    channels: [usize; 4],
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<EncoderStage>,
    laterals: Vec<Conv>,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl Backbone {
    /// Decoder width after each block; the first three match the lateral
    /// taps from deep to shallow.
    pub fn decoder_channels(channels: [usize; 4]) -> [usize; 4] {
        [channels[2], channels[1], channels[0], channels[0]]
    }

    /// `consensus_channels` is the width of the map handed to [`Backbone::decode`].
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        channels: [usize; 4],
        consensus_channels: usize,
    ) -> Result<Self> {
        let stem = Conv::build(store, rng, "enc/stem/conv", 3, channels[0], 4, 2, 1, false)?;
        let stem_bn = BatchNorm::build(store, "enc/stem/bn", channels[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = channels[0];
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("enc/s{}", i + 1);
            stages.push(EncoderStage {
                down: Conv::build(store, rng, &format!("{name}/down"), cin, c, 4, 2, 1, false)?,
                bn: BatchNorm::build(store, &format!("{name}/bn"), c)?,
                res: ResBlock::build(store, rng, &format!("{name}/res"), c, c)?,
            });
            cin = c;
        }
        let dec = Self::decoder_channels(channels);
        let mut laterals = Vec::with_capacity(3);
        for i in 0..3 {
            // Lateral i taps encoder stage i and feeds decoder block 2 - i.
            laterals.push(Conv::build(
                store,
                rng,
                &format!("lat/{}", i + 1),
                channels[i],
                dec[2 - i],
                1,
                1,
                0,
                true,
            )?);
        }
        let mut blocks = Vec::with_capacity(4);
        let mut cin = consensus_channels;
        for (i, &c) in dec.iter().enumerate() {
            blocks.push(ResBlock::build(store, rng, &format!("dec/b{}", i + 1), cin, c)?);
            cin = c;
        }
        let head = Conv::build(store, rng, "dec/head", dec[3], 1, 1, 1, 0, true)?;
        Ok(Backbone {
            channels,
            stem,
            stem_bn,
            stages,
            laterals,
            blocks,
            head,
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn encode<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<EncoderFeatures> {
        let shape = ctx.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % STRIDE != 0 || shape[3] % STRIDE != 0 || shape[2] == 0 {
            return Err(shape_err!(
                "encode: expected B x 3 x H x W with H, W divisible by {STRIDE}, got {:?}",
                shape
            ));
        }
        let x = self.stem.forward(ctx, images)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let mut x = ctx.tape.relu(x);
        let mut taps = Vec::with_capacity(4);
        for stage in &self.stages {
            let h = stage.down.forward(ctx, x)?;
            let h = stage.bn.forward(ctx, h)?;
            let h = ctx.tape.relu(h);
            x = stage.res.forward(ctx, h)?;
            taps.push(x);
        }
        Ok(EncoderFeatures {
            lateral: [taps[0], taps[1], taps[2]],
            last: taps[3],
        })
    }

    /// 1x1 projection of encoder stage `stage` (0-based, shallow to deep).
    pub fn lateral_project<T: Element>(&self, ctx: &mut Ctx<'_, T>, stage: usize, f: Var) -> Result<Var> {
        let conv = self
            .laterals
            .get(stage)
            .ok_or_else(|| shape_err!("lateral_project: no lateral for stage {stage}"))?;
        conv.forward(ctx, f)
    }

    /// Decodes the consensus map into logits at `out_h x out_w`.
    pub fn decode<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        consensus: Var,
        feats: &EncoderFeatures,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let mut x = consensus;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            if i < 3 {
                let s = ctx.tape.shape(x).to_vec();
                let up = ctx.tape.resize(x, s[2] * 2, s[3] * 2)?;
                let lat = self.lateral_project(ctx, 2 - i, feats.lateral[2 - i])?;
                if ctx.tape.shape(lat) != ctx.tape.shape(up) {
                    return Err(shape_err!(
                        "decode: lateral {:?} does not match upsampled path {:?}",
                        ctx.tape.shape(lat),
                        ctx.tape.shape(up)
                    ));
                }
                x = ctx.tape.add(up, lat)?;
            }
        }
        let logits = self.head.forward(ctx, x)?;
        ctx.tape.resize(logits, out_h, out_w)
    }
}

/// Sigmoid, clamp into `[PROB_EPS, 1 - PROB_EPS]` and resize each element to
/// its original size.
pub fn predict_maps<T: Element>(logits: &Tensor<T>, orig_sizes: &[(usize, usize)]) -> Result<Vec<SaliencyMap>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != orig_sizes.len() {
        return Err(shape_err!(
            "predict_maps: logits {:?} do not match {} target sizes",
            s,
            orig_sizes.len()
        ));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(s[0]);
    for (b, &(oh, ow)) in orig_sizes.iter().enumerate() {
        let probs: Vec<f64> = logits.data()[b * h * w..(b + 1) * h * w]
            .iter()
            .map(|v| sigmoid(v.f64()).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        let resized = crate::kernels::resize_forward(&probs, 1, h, w, oh, ow);
        out.push(SaliencyMap::new(oh, ow, resized)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(channels: [usize; 4]) -> (Backbone, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::build(&mut store, &mut rng, channels, 2 * channels[3]).unwrap();
        (bb, store)
    }

    #[test]
    fn encode_shapes_follow_ladder() {
        let (bb, store) = build([16, 32, 64, 128]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[4, 3, 64, 64], 0.0, 1.0, &mut rng));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let f = bb.encode(&mut ctx, x).unwrap();
        drop(ctx);
        assert_eq!(tape.shape(f.lateral[0]), &[4, 16, 16, 16]);
        assert_eq!(tape.shape(f.lateral[1]), &[4, 32, 8, 8]);
        assert_eq!(tape.shape(f.lateral[2]), &[4, 64, 4, 4]);
        assert_eq!(tape.shape(f.last), &[4, 128, 2, 2]);
    }

    #[test]
    fn encode_rejects_indivisible_size() {
        let (bb, store) = build([2, 4, 8, 16]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 3, 48, 40]));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        assert!(bb.encode(&mut ctx, x).is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let (bb, store) = build([4, 8, 8, 16]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[2, 3, 32, 32]));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
        let f = bb.encode(&mut ctx, x).unwrap();
        drop(ctx);
        for v in f.lateral.iter().chain([&f.last]) {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn predict_maps_of_zero_logits_is_half() {
        let logits = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let maps = predict_maps(&logits, &[(4, 4), (6, 3)]).unwrap();
        assert_eq!((maps[1].height(), maps[1].width()), (6, 3));
        assert!(maps.iter().all(|m| m.values().iter().all(|&v| v == 0.5)));
        let big = Tensor::<f32>::full(&[1, 1, 2, 2], 1e6);
        let maps = predict_maps(&big, &[(2, 2)]).unwrap();
        assert!(maps[0].values().iter().all(|&v| v <= 1.0 - 1e-7));
    }
}
