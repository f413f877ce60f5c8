//! Trains only the discriminator against a frozen, freshly initialized
//! generator and reports real-vs-fake accuracy as it learns.
//!
//! ```text
//! cargo run --release --example discriminator_sanity -- 200
//! ```

use mccl::config::TrainConfig;
use mccl::data::{load_dataset, synth_generate, SynthConfig};
use mccl::train::Trainer;

fn main() -> mccl::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let config = TrainConfig::default();
    let dir = std::env::temp_dir().join("mccl_discriminator_sanity");
    let synth = SynthConfig {
        size: config.image_size,
        seed: config.seed,
        ..Default::default()
    };
    synth_generate(&synth, &dir)?;
    let groups = load_dataset(&dir.join("images"), &dir.join("gts"), Some(config.image_size))?;

    let lr = config.lr;
    let mut trainer = Trainer::new(config)?;
    let mut window = Vec::new();
    for step in 1..=steps {
        let scores = trainer.disc_step(&groups, lr)?;
        window.push(scores.accuracy());
        if step % 10 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {step:>4}  accuracy {mean:.3}");
            window.clear();
        }
    }
    Ok(())
}
