//! Command-line front end: `synth`, `train`, `infer`, `eval`, `gradcheck`
//! and `bench`.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mccl::config::TrainConfig;
use mccl::data::{synth_generate, SynthConfig};
use mccl::gradcheck::suite::run_suite;
use mccl::metrics::evaluate_dataset;
use mccl::train::{bench, infer, train, Predictor, Trainer};

#[derive(Parser)]
#[command(name = "mccl", version, about = "Co-salient object detection: data, training, inference and evaluation")]
struct Cli {
    /// Line-based key=value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images/, gts/, manifest.tsv).
    Synth(SynthArgs),
    /// Train a model and write checkpoint.mccl and train_log.tsv.
    Train(TrainArgs),
    /// Predict saliency maps for every image under a dataset root.
    Infer(InferArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck,
    /// Time inference at several batch sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    groups: usize,
    #[arg(long, default_value_t = 12)]
    per_group: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding images/ and gts/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Group folders of images, or a dataset root holding images/.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the per-group rows as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

fn base_config(cli: &Cli) -> mccl::Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> mccl::Result<bool> {
    let config = base_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n_groups: a.groups,
                images_per_group: a.per_group,
                size: a.size,
                seed: config.seed,
                ..Default::default()
            };
            let s = synth_generate(&cfg, &a.out)?;
            println!("wrote {} images in {} groups to {}", s.images, s.groups, a.out.display());
        }
        Command::Train(a) => {
            let mut config = config;
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            if let Some(lr) = a.lr {
                config.lr = lr;
            }
            for kv in &a.overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| mccl::Error::Config(format!("--set expects key=value, got {kv:?}")))?;
                config.set(k, v)?;
            }
            let report = train(&config, &a.data.join("images"), &a.data.join("gts"), &a.out, |e| {
                println!("epoch {:>4}  lr {:.0e}  L_sal {:.4}", e.epoch + 1, e.lr, e.sal);
            })?;
            println!(
                "trained {} epochs in {:.1}s; checkpoint in {}",
                report.epochs.len(),
                report.seconds,
                a.out.display()
            );
        }
        Command::Infer(a) => {
            let nested = a.images.join("images");
            let root = if nested.is_dir() { nested } else { a.images };
            let n = infer(&a.checkpoint, &root, &a.out)?;
            println!("wrote {n} maps to {}", a.out.display());
        }
        Command::Eval(a) => {
            let report = evaluate_dataset(&a.pred, &a.gt)?;
            print!("{}", report.to_table());
            if let Some(path) = a.tsv {
                std::fs::write(&path, report.to_tsv()).map_err(|source| mccl::Error::Io { path, source })?;
            }
        }
        Command::Gradcheck => {
            let results = run_suite(config.seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<18} cases {:>3}  max rel error {:.3e}  threshold {:.0e}  {}",
                    r.name,
                    r.cases,
                    r.max_rel_error,
                    r.threshold,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
        Command::Bench(a) => {
            let predictor = match &a.checkpoint {
                Some(path) => Predictor::load(path)?,
                None => Predictor::from_tensors(&Trainer::new(config.clone())?.checkpoint_tensors())?,
            };
            for r in bench(&predictor, &a.batch_sizes, a.repeats, config.seed)? {
                println!(
                    "batch {:>3}  {:>8.2} images/s  {:>8.4} s/batch",
                    r.batch, r.images_per_second, r.seconds_per_batch
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
