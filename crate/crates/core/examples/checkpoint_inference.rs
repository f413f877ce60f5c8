//! Trains briefly, saves a checkpoint, strips the training-only tensors,
//! and shows that inference is unchanged; then times inference.

use mccl::checkpoint::{self, strip_training_state};
use mccl::config::TrainConfig;
use mccl::data::{load_dataset, synth_generate, SynthConfig};
use mccl::train::{bench, Predictor, Trainer};

fn main() -> mccl::Result<()> {
    let dir = std::env::temp_dir().join("mccl_checkpoint_inference");
    let synth = SynthConfig {
        n_groups: 4,
        images_per_group: 4,
        size: 32,
        ..Default::default()
    };
    synth_generate(&synth, &dir)?;
    let groups = load_dataset(&dir.join("images"), &dir.join("gts"), Some(32))?;
    let config = TrainConfig {
        image_size: 32,
        epochs: 2,
        channels: [8, 16, 32, 64],
        ..Default::default()
    };
    let mut trainer = Trainer::new(config)?;
    trainer.fit(&groups, |e| println!("epoch {} L_sal {:.3}", e.epoch + 1, e.sal))?;

    let path = dir.join("checkpoint.mccl");
    trainer.save_checkpoint(&path)?;
    let full = checkpoint::load(&path)?;
    let stripped = strip_training_state(&full);
    println!("{} tensors saved, {} needed for inference", full.len(), stripped.len());

    let a = Predictor::from_tensors(&full)?.predict_group(&groups[0])?;
    let b = Predictor::from_tensors(&stripped)?.predict_group(&groups[0])?;
    println!("identical predictions after stripping: {}", a == b);

    for r in bench(&Predictor::from_tensors(&stripped)?, &[1, 2, 4], 3, 0)? {
        println!("batch {:>2}: {:.1} images/s", r.batch, r.images_per_second);
    }
    Ok(())
}
