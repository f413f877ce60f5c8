//! The generator: encode all images jointly, aggregate each group's
//! consensus, and decode back to per-image saliency logits.

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, EncoderFeatures};
use crate::error::{shape_err, Result};
use crate::gcam::{half_vectors, permutation, Gcam, GroupConsensus};
use crate::layers::{Ctx, ParamStore};
use crate::tensor::{Element, Tensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub gcam: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128],
            gcam: true,
        }
    }
}

/// Per-channel standardization of `B x 3 x H x W` images in `[0, 1]`.
pub fn normalize_images<T: Element>(images: &Tensor<T>) -> Tensor<T> {
    let s = images.shape();
    let plane = s[2] * s[3];
    let mut out = images.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 3;
        *v = T::of((v.f64() - IMAGENET_MEAN[c] as f64) / IMAGENET_STD[c] as f64);
    }
    out
}

/// A contiguous run of images belonging to one class.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSlice {
    pub class_id: String,
    pub len: usize,
    /// Shuffle seed for the consensus split; `None` keeps image order.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `B x 1 x H x W` logits.
    pub logits: Var,
    pub groups: Vec<GroupConsensus>,
    pub features: EncoderFeatures,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    backbone: Backbone,
    gcam: Option<Gcam>,
}

impl Model {
    pub fn build<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: ModelConfig) -> Result<Self> {
        let c4 = config.channels[3];
        let backbone = Backbone::build(store, rng, config.channels, 2 * c4)?;
        let gcam = if config.gcam {
            Some(Gcam::build(store, rng, c4)?)
        } else {
            None
        };
        Ok(Model { config, backbone, gcam })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn gcam(&self) -> Option<&Gcam> {
        self.gcam.as_ref()
    }

    /// `images` are already normalized; `groups` partition the batch in order.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var, groups: &[GroupSlice]) -> Result<ModelOutput> {
        let s = ctx.tape.shape(images).to_vec();
        let total: usize = groups.iter().map(|g| g.len).sum();
        if s.is_empty() || total != s[0] || groups.iter().any(|g| g.len == 0) {
            return Err(shape_err!(
                "forward: group sizes {:?} do not partition a batch of {:?}",
                groups.iter().map(|g| g.len).collect::<Vec<_>>(),
                s
            ));
        }
        let features = self.backbone.encode(ctx, images)?;
        let sizes: Vec<usize> = groups.iter().map(|g| g.len).collect();
        let per_group = ctx.tape.split(features.last, 0, &sizes)?;
        let mut outs = Vec::with_capacity(groups.len());
        for (g, &feat) in groups.iter().zip(&per_group) {
            let out = match &self.gcam {
                Some(gcam) => gcam.forward(ctx, &g.class_id, feat, g.seed)?,
                None => {
                    let feat_out = ctx.tape.concat(&[feat, feat], 1)?;
                    let (vec_a, vec_b) = if g.len % 2 == 0 {
                        half_vectors(ctx, feat_out, &permutation(g.len, g.seed))?
                    } else {
                        let pooled = ctx.tape.global_avg_pool(feat_out)?;
                        let v = ctx.tape.mean_axis(pooled, 0)?;
                        (v, v)
                    };
                    GroupConsensus {
                        class_id: g.class_id.clone(),
                        feat_out,
                        vec_a,
                        vec_b,
                    }
                }
            };
            outs.push(out);
        }
        let maps: Vec<Var> = outs.iter().map(|o| o.feat_out).collect();
        let consensus = ctx.tape.concat(&maps, 0)?;
        let logits = self.backbone.decode(ctx, consensus, &features, s[2], s[3])?;
        Ok(ModelOutput {
            logits,
            groups: outs,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logits_match_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = ModelConfig {
            channels: [4, 4, 8, 8],
            gcam: true,
        };
        let model = Model::build(&mut store, &mut rng, cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[6, 3, 64, 32], 0.0, 1.0, &mut rng));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, true);
        let groups = vec![
            GroupSlice { class_id: "a".into(), len: 4, seed: Some(1) },
            GroupSlice { class_id: "b".into(), len: 2, seed: Some(2) },
        ];
        let out = model.forward(&mut ctx, x, &groups).unwrap();
        assert_eq!(ctx.tape.shape(out.logits), &[6, 1, 64, 32]);
        assert_eq!(ctx.tape.shape(out.groups[1].vec_a), &[16]);
        let bad = vec![GroupSlice { class_id: "a".into(), len: 5, seed: None }];
        assert!(model.forward(&mut ctx, x, &bad).is_err());
    }

    #[test]
    fn normalization_centres_mean_colour() {
        let mut t = Tensor::<f32>::zeros(&[1, 3, 1, 1]);
        t.data_mut().copy_from_slice(&IMAGENET_MEAN);
        assert!(normalize_images(&t).data().iter().all(|v| v.abs() < 1e-6));
    }
}
