//! End-to-end run on a generated dataset: synthesize train and test splits,
//! train, predict the held-out images and score them.
//!
//! Extra arguments are `key=value` overrides of the training configuration:
//!
//! ```text
//! cargo run --release --example train_synthetic -- epochs=50 lr=3e-4
//! ```

use std::path::Path;

use mccl::config::TrainConfig;
use mccl::data::SynthConfig;
use mccl::metrics::evaluate_dataset;
use mccl::train::{infer, train};

fn main() -> mccl::Result<()> {
    let mut config = TrainConfig::default();
    let mut out = std::env::temp_dir().join("mccl_train_synthetic");
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("out", dir)) => out = dir.into(),
            Some((k, v)) => config.set(k, v)?,
            None => return Err(mccl::Error::Config(format!("expected key=value, got {arg:?}"))),
        }
    }

    let train_dir = out.join("train");
    let test_dir = out.join("test");
    let synth = |dir: &Path, images_per_group, seed| {
        let cfg = SynthConfig {
            n_groups: 6,
            images_per_group,
            size: config.image_size,
            seed,
            ..Default::default()
        };
        mccl::data::synth_generate(&cfg, dir)
    };
    synth(&train_dir, 12, config.seed)?;
    synth(&test_dir, 2, config.seed + 1)?;

    let run_dir = out.join("run");
    let report = train(&config, &train_dir.join("images"), &train_dir.join("gts"), &run_dir, |e| {
        println!(
            "epoch {:>4}  lr {:.0e}  bce {:.4}  iou {:.4}  mcm {}  adv {}  disc {}  sal {:.4}",
            e.epoch + 1,
            e.lr,
            e.bce,
            e.iou,
            e.mcm.map_or("-".into(), |v| format!("{v:.4}")),
            e.adv.map_or("-".into(), |v| format!("{v:.4}")),
            e.disc.map_or("-".into(), |v| format!("{v:.4}")),
            e.sal
        );
    })?;
    println!("trained in {:.1}s, skipped steps {:?}", report.seconds, report.skipped_steps);

    let pred_dir = out.join("pred");
    infer(&run_dir.join("checkpoint.mccl"), &test_dir.join("images"), &pred_dir)?;
    let metrics = evaluate_dataset(&pred_dir, &test_dir.join("gts"))?;
    print!("{}", metrics.to_table());
    Ok(())
}
