//! Library-level pipeline: short training runs, logs, checkpoints, inference.

use std::path::Path;

use mccl::checkpoint::{load, save};
use mccl::config::TrainConfig;
use mccl::data::{synth_generate, SynthConfig};
use mccl::train::{infer, log_tsv, train, Predictor, Trainer};
use mccl::Error;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        image_size: 32,
        epochs: 2,
        channels: [4, 8, 16, 32],
        group_cap: 4,
        ..TrainConfig::default()
    }
}

fn tiny_data(dir: &Path) {
    let cfg = SynthConfig {
        n_groups: 2,
        images_per_group: 4,
        size: 32,
        seed: 11,
        ..Default::default()
    };
    synth_generate(&cfg, dir).unwrap();
}

#[test]
fn smoke_run_writes_a_loadable_checkpoint_and_deterministic_maps() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let run = dir.path().join("run");
    let report = train(&tiny_config(), &dir.path().join("images"), &dir.path().join("gts"), &run, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().all(|e| e.sal.is_finite()));

    let ckpt = run.join("checkpoint.mccl");
    let tensors = load(&ckpt).unwrap();
    assert!(tensors.keys().any(|k| k.starts_with("mcm/")));
    Predictor::from_tensors(&tensors).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(infer(&ckpt, &dir.path().join("images"), &a).unwrap(), 8);
    infer(&ckpt, &dir.path().join("images"), &b).unwrap();
    for group in ["circle", "square"] {
        for entry in std::fs::read_dir(a.join(group)).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.join(group).join(&name)).unwrap();
            let y = std::fs::read(b.join(group).join(&name)).unwrap();
            assert_eq!(x, y, "{group}/{name:?}");
        }
    }
}

#[test]
fn log_omits_columns_of_disabled_modules() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let config = TrainConfig {
        epochs: 1,
        enable_mcm: false,
        enable_ail: false,
        ..tiny_config()
    };
    let run = dir.path().join("run");
    let report = train(&config, &dir.path().join("images"), &dir.path().join("gts"), &run, |_| {}).unwrap();
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    let header = log.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "epoch\tlr\tL_BCE\tL_IoU\tL_sal");
    assert!(report.epochs[0].mcm.is_none() && report.epochs[0].adv.is_none());

    let full = log_tsv(&tiny_config(), &report.epochs);
    let header = full.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "epoch\tlr\tL_BCE\tL_IoU\tL_MCM\tL_adv\tL_disc\tL_sal");
}

#[test]
fn missing_tensor_is_named_in_the_error() {
    let mut tensors = Trainer::new(tiny_config()).unwrap().checkpoint_tensors();
    let victim = tensors.keys().find(|k| k.starts_with("dec/")).unwrap().clone();
    tensors.remove(&victim);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.mccl");
    save(&path, &tensors).unwrap();
    match Predictor::load(&path) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains(&victim), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("loaded a checkpoint without {victim}"),
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.mccl");
    std::fs::write(&path, b"MCCL\x01\x00\x00\x00\xff\xff").unwrap();
    assert!(Predictor::load(&path).is_err());
}
