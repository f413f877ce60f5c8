//! Training loop, checkpoints, inference and throughput measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ail::{adv_generator_loss, DiscScores, DiscState};
use crate::autodiff::{sigmoid, Tape};
use crate::backbone::{predict_maps, PROB_EPS};
use crate::checkpoint::{self, Tensors};
use crate::config::TrainConfig;
use crate::data::{self, io, AugmentConfig, GroupBatch, ImageGroup};
use crate::error::{io_err, Error, Result};
use crate::layers::{Ctx, Mode, ParamStore};
use crate::losses::{bce_loss, iou_loss, total_generator_loss, LossParts};
use crate::mcm::{mcm_loss, ConsensusMemory};
use crate::metrics::SaliencyMap;
use crate::network::{normalize_images, GroupSlice, Model, ModelConfig};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::tensor::Tensor;

/// Seed offsets keeping the independent random streams of a run apart.
const DISC_STREAM: u64 = 0x6469_7363;
const DATA_STREAM: u64 = 0x6461_7461;

/// Scalar losses of one step; disabled modules are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub bce: f64,
    pub iou: f64,
    pub mcm: Option<f64>,
    pub adv: Option<f64>,
    pub disc: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub sal: f64,
}

/// Epoch means of [`StepLosses`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub iou: f64,
    pub mcm: Option<f64>,
    pub adv: Option<f64>,
    pub disc: Option<f64>,
    pub sal: f64,
}

impl EpochLog {
    fn from_steps(epoch: usize, lr: f64, steps: &[StepLosses]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepLosses) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: &dyn Fn(&StepLosses) -> Option<f64>| {
            steps.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        EpochLog {
            epoch,
            lr,
            bce: mean(&|s| s.bce),
            iou: mean(&|s| s.iou),
            mcm: mean_opt(&|s| s.mcm),
            adv: mean_opt(&|s| s.adv),
            disc: mean_opt(&|s| s.disc),
            sal: mean(&|s| s.sal),
        }
    }
}

/// Renders the per-epoch log. Columns for disabled modules are omitted.
pub fn log_tsv(config: &TrainConfig, epochs: &[EpochLog]) -> String {
    let mut s = String::new();
    for line in config.to_key_values().lines() {
        let _ = writeln!(s, "# {line}");
    }
    let mut header = vec!["epoch", "lr", "L_BCE", "L_IoU"];
    if config.enable_mcm {
        header.push("L_MCM");
    }
    if config.enable_ail {
        header.extend(["L_adv", "L_disc"]);
    }
    header.push("L_sal");
    let _ = writeln!(s, "{}", header.join("\t"));
    for e in epochs {
        let mut row = vec![(e.epoch + 1).to_string(), format!("{:e}", e.lr), fmt(e.bce), fmt(e.iou)];
        if config.enable_mcm {
            row.push(e.mcm.map_or("nan".into(), fmt));
        }
        if config.enable_ail {
            row.push(e.adv.map_or("nan".into(), fmt));
            row.push(e.disc.map_or("nan".into(), fmt));
        }
        row.push(fmt(e.sal));
        let _ = writeln!(s, "{}", row.join("\t"));
    }
    s
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// All mutable state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub disc: Option<DiscState<f32>>,
    pub memory: ConsensusMemory,
    gen_opt: AdamW,
    disc_opt: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Generator, discriminator and data sampling draw from separate
    /// streams, so toggling a module never changes the others' randomness.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::build(&mut store, &mut init_rng, model_config(&config))?;
        let disc = if config.enable_ail {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DISC_STREAM);
            Some(DiscState::new(&mut rng)?)
        } else {
            None
        };
        let mut memory = ConsensusMemory::new(config.beta, config.alpha)?;
        memory.clamp = config.mcm_clamp;
        let opt = AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        };
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ DATA_STREAM),
            config,
            model,
            store,
            disc,
            memory,
            gen_opt: AdamW::new(opt),
            disc_opt: AdamW::new(opt),
        })
    }

    /// Optimizer steps skipped for non-finite gradients (generator, discriminator).
    pub fn skipped_steps(&self) -> (u64, u64) {
        (self.gen_opt.skipped(), self.disc_opt.skipped())
    }

    /// Samples a batch from `groups` and takes one step.
    pub fn step(&mut self, groups: &[ImageGroup], lr: f64) -> Result<StepLosses> {
        let batch = data::make_batch(groups, self.config.groups_per_batch, self.config.group_cap, &mut self.rng)?;
        let aug = self.config.augment.then(AugmentConfig::default);
        let (images, gts) = batch.assemble(groups, aug.as_ref(), &mut self.rng)?;
        let seeds: Vec<u64> = batch.members.iter().map(|_| self.rng.gen()).collect();
        self.step_on(&batch, &images, &gts, &seeds, lr)
    }

    /// One alternating update on an assembled batch: the discriminator
    /// first (on detached predictions), then the generator.
    pub fn step_on(
        &mut self,
        batch: &GroupBatch,
        images: &Tensor<f32>,
        gts: &Tensor<f32>,
        seeds: &[u64],
        lr: f64,
    ) -> Result<StepLosses> {
        let slices: Vec<GroupSlice> = batch
            .members
            .iter()
            .zip(seeds)
            .map(|(m, &seed)| GroupSlice {
                class_id: m.class_id.clone(),
                len: batch.per_group,
                seed: Some(seed),
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(normalize_images(images));
        let source = tape.constant(images.clone());
        let y = tape.constant(gts.clone());

        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train, true);
        let out = self.model.forward(&mut ctx, x, &slices)?;
        let bound = ctx.finish();
        let probs = tape.sigmoid(out.logits);
        let probs = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
        let bce = bce_loss(&mut tape, probs, y)?;
        let iou = iou_loss(&mut tape, probs, y)?;

        let mcm = if self.config.enable_mcm {
            let mut live = BTreeMap::new();
            for g in &out.groups {
                let a = tape.value(g.vec_a).to_f64_vec();
                let b = tape.value(g.vec_b).to_f64_vec();
                self.memory.update(&g.class_id, &a, &b)?;
                live.insert(g.class_id.clone(), (g.vec_a, g.vec_b));
            }
            Some(mcm_loss(&mut tape, &batch.class_ids(), &self.memory, &live)?)
        } else {
            None
        };

        let mut disc_value = None;
        let mut disc_scores: Option<DiscScores> = None;
        let adv = match self.disc.as_mut() {
            Some(disc) => {
                let pred = tape.value(probs).clone();
                let (loss, scores, dbound) = disc.loss_and_grads(images, &pred, gts, self.config.weights.disc)?;
                clip_grad_norm(&mut disc.store, self.config.clip_norm);
                if self.disc_opt.step(&mut disc.store, lr) {
                    disc.store.update_running_stats(&dbound.observed)?;
                }
                disc_value = Some(loss);
                disc_scores = Some(scores);
                let mut dctx = Ctx::new(&mut tape, &disc.store, Mode::Train, false);
                let adv = adv_generator_loss(&mut dctx, &disc.net, source, probs, y)?;
                dctx.finish();
                Some(adv)
            }
            None => None,
        };

        let parts = LossParts { bce, iou, mcm, adv };
        let total = total_generator_loss(&mut tape, &parts, &self.config.weights)?;
        tape.backward(total)?;
        self.store.zero_grads();
        bound.collect_grads(&tape, &mut self.store)?;
        clip_grad_norm(&mut self.store, self.config.clip_norm);
        if self.gen_opt.step(&mut self.store, lr) {
            self.store.update_running_stats(&bound.observed)?;
        }
        self.store.zero_grads();
        if let Some(d) = self.disc.as_mut() {
            d.store.zero_grads();
        }

        let item = |v: crate::autodiff::Var| tape.value(v).item() as f64;
        Ok(StepLosses {
            bce: item(bce),
            iou: item(iou),
            mcm: mcm.map(item),
            adv: adv.map(item),
            disc: disc_value,
            disc_accuracy: disc_scores.map(|s| s.accuracy()),
            sal: item(total),
        })
    }

    /// Updates only the discriminator against the current (frozen)
    /// generator on a fresh batch; returns the scores before the update.
    pub fn disc_step(&mut self, groups: &[ImageGroup], lr: f64) -> Result<DiscScores> {
        let Some(disc) = self.disc.as_mut() else {
            return Err(Error::Config("disc_step needs enable_ail".into()));
        };
        let batch = data::make_batch(groups, self.config.groups_per_batch, self.config.group_cap, &mut self.rng)?;
        let aug = self.config.augment.then(AugmentConfig::default);
        let (images, gts) = batch.assemble(groups, aug.as_ref(), &mut self.rng)?;
        let slices: Vec<GroupSlice> = batch
            .members
            .iter()
            .map(|m| GroupSlice {
                class_id: m.class_id.clone(),
                len: batch.per_group,
                seed: Some(self.rng.gen()),
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(normalize_images(&images));
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train, false);
        let out = self.model.forward(&mut ctx, x, &slices)?;
        let probs = tape.sigmoid(out.logits);
        let probs = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
        let pred = tape.value(probs).clone();
        let (_, scores, bound) = disc.loss_and_grads(&images, &pred, &gts, self.config.weights.disc)?;
        clip_grad_norm(&mut disc.store, self.config.clip_norm);
        if self.disc_opt.step(&mut disc.store, lr) {
            disc.store.update_running_stats(&bound.observed)?;
        }
        disc.store.zero_grads();
        Ok(scores)
    }

    /// Runs every configured epoch; each epoch takes `ceil(groups / N)` steps.
    pub fn fit(&mut self, groups: &[ImageGroup], mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let steps = groups.len().div_ceil(self.config.groups_per_batch);
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let lr = self.config.lr_at(epoch);
            let mut losses = Vec::with_capacity(steps);
            for step in 0..steps {
                let l = self.step(groups, lr).map_err(|e| Error::Train {
                    epoch: epoch + 1,
                    step: step + 1,
                    source: Box::new(e),
                })?;
                losses.push(l);
            }
            let log = EpochLog::from_steps(epoch, lr, &losses);
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Parameters, buffers, memory, discriminator and architecture metadata.
    pub fn checkpoint_tensors(&self) -> Tensors {
        let mut t = self.store.named_tensors();
        t.extend(self.memory.named_tensors());
        if let Some(d) = &self.disc {
            t.extend(d.store.named_tensors());
        }
        t.extend(meta_tensors(&self.model.config(), self.config.image_size));
        t
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_tensors())
    }
}

pub fn model_config(config: &TrainConfig) -> ModelConfig {
    ModelConfig {
        channels: config.channels,
        gcam: config.enable_gcam,
    }
}

fn meta_tensors(model: &ModelConfig, image_size: usize) -> Tensors {
    let mut t = BTreeMap::new();
    let ch: Vec<f32> = model.channels.iter().map(|&c| c as f32).collect();
    t.insert("meta/channels".into(), Tensor::new(&[4], ch).expect("four"));
    t.insert("meta/gcam".into(), Tensor::new(&[1], vec![model.gcam as u8 as f32]).expect("one"));
    t.insert("meta/image_size".into(), Tensor::new(&[1], vec![image_size as f32]).expect("one"));
    t
}

fn read_meta(tensors: &Tensors) -> Result<(ModelConfig, usize)> {
    let get = |name: &str| {
        tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    };
    let ch = get("meta/channels")?.data();
    if ch.len() != 4 {
        return Err(Error::Checkpoint("meta/channels must hold four widths".into()));
    }
    let channels = [ch[0] as usize, ch[1] as usize, ch[2] as usize, ch[3] as usize];
    let gcam = get("meta/gcam")?.data().first().is_some_and(|&v| v != 0.0);
    let size = get("meta/image_size")?.data().first().map_or(0, |&v| v as usize);
    Ok((ModelConfig { channels, gcam }, size))
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub seconds: f64,
    pub skipped_steps: (u64, u64),
}

/// Trains on `images_root`/`gts_root`, writing `checkpoint.mccl` and
/// `train_log.tsv` into `out_dir`.
pub fn train(
    config: &TrainConfig,
    images_root: &Path,
    gts_root: &Path,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    let groups = data::load_dataset(images_root, gts_root, Some(config.image_size))?;
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let epochs = trainer.fit(&groups, &mut progress)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    trainer.save_checkpoint(&out_dir.join("checkpoint.mccl"))?;
    let log_path = out_dir.join("train_log.tsv");
    std::fs::write(&log_path, log_tsv(config, &epochs)).map_err(io_err(&log_path))?;
    Ok(TrainReport {
        epochs,
        seconds: start.elapsed().as_secs_f64(),
        skipped_steps: trainer.skipped_steps(),
    })
}

/// An inference-only generator.
pub struct Predictor {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub image_size: usize,
}

impl Predictor {
    /// Builds the generator described by the checkpoint and loads it; memory
    /// and discriminator tensors are ignored.
    pub fn from_tensors(tensors: &Tensors) -> Result<Self> {
        let (config, image_size) = read_meta(tensors)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::build(&mut store, &mut rng, config)?;
        store.load_from(tensors)?;
        Ok(Predictor { model, store, image_size })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }

    /// Logits `S x 1 x H x W` for one group of images at the training size.
    pub fn logits(&self, class_id: &str, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(normalize_images(images));
        let groups = [GroupSlice {
            class_id: class_id.to_string(),
            len: images.shape()[0],
            seed: None,
        }];
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
        let out = self.model.forward(&mut ctx, x, &groups)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Saliency maps at each image's original size.
    pub fn predict_group(&self, group: &ImageGroup) -> Result<Vec<SaliencyMap>> {
        let images = Tensor::stack(&group.images)?;
        let logits = self.logits(&group.class_id, &images)?;
        let maps = predict_maps(&logits, &group.orig_sizes)?;
        Ok(maps
            .into_iter()
            .zip(&group.stems)
            .map(|(m, stem)| m.with_name(&group.class_id, stem))
            .collect())
    }
}

/// Predicts every group under `images_root` independently and writes
/// `out_dir/<group>/<stem>.png`. Returns the number of maps written.
pub fn infer(checkpoint_path: &Path, images_root: &Path, out_dir: &Path) -> Result<usize> {
    let predictor = Predictor::load(checkpoint_path)?;
    infer_with(&predictor, images_root, out_dir)
}

pub fn infer_with(predictor: &Predictor, images_root: &Path, out_dir: &Path) -> Result<usize> {
    let groups = data::load_images(images_root, Some(predictor.image_size))?;
    let mut written = 0;
    for g in &groups {
        for (map, stem) in predictor.predict_group(g)?.iter().zip(&g.stems) {
            io::save_map(&out_dir.join(&g.class_id).join(format!("{stem}.png")), map)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Inference throughput at one batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub batch: usize,
    pub images_per_second: f64,
    pub seconds_per_batch: f64,
}

/// Times forward passes on random images for each batch size.
pub fn bench(predictor: &Predictor, batch_sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = predictor.image_size;
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let images = Tensor::uniform(&[b, 3, size, size], 0.0, 1.0, &mut rng);
        predictor.logits("bench", &images)?;
        let start = Instant::now();
        for _ in 0..repeats.max(1) {
            predictor.logits("bench", &images)?;
        }
        let per = start.elapsed().as_secs_f64() / repeats.max(1) as f64;
        out.push(BenchResult {
            batch: b,
            images_per_second: b as f64 / per,
            seconds_per_batch: per,
        });
    }
    Ok(out)
}

/// Probability maps of a logit tensor without resizing, as in training.
pub fn probabilities(logits: &Tensor<f32>) -> Tensor<f32> {
    logits.map(|v| sigmoid(v as f64).clamp(PROB_EPS, 1.0 - PROB_EPS) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_omits_disabled_columns() {
        let cfg = TrainConfig {
            enable_mcm: false,
            enable_ail: false,
            ..Default::default()
        };
        let log = EpochLog::from_steps(
            0,
            1e-4,
            &[StepLosses {
                bce: 1.0,
                iou: 0.5,
                sal: 30.25,
                ..Default::default()
            }],
        );
        let tsv = log_tsv(&cfg, &[log]);
        let header = tsv.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header, "epoch\tlr\tL_BCE\tL_IoU\tL_sal");
        let full = log_tsv(&TrainConfig::default(), &[]);
        assert!(full.contains("L_MCM\tL_adv\tL_disc\tL_sal"));
    }
}
