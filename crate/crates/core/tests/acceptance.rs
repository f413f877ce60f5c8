//! Acceptance criteria, run in order with one pass/fail line each.
//!
//! The criteria share a single test so they run sequentially: the
//! end-to-end training run is timed and must not compete for the CPU.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mccl::ail::{disc_loss, Discriminator, DISC_CHANNELS};
use mccl::checkpoint::{strip_training_state, to_bytes};
use mccl::config::TrainConfig;
use mccl::data::{even_floor, load_dataset, make_batch, synth_generate, ImageGroup, SynthConfig};
use mccl::gradcheck::suite::run_suite;
use mccl::layers::{Ctx, Mode, ParamStore};
use mccl::losses::{total_generator_loss, LossParts, LossWeights};
use mccl::mcm::{mcm_loss, mcm_loss_vars, triplet_loss, ConsensusMemory};
use mccl::metrics::{e_measure_max, evaluate_dataset, f_measure_max, mae, s_measure, SaliencyMap};
use mccl::train::{infer, train, Predictor, Trainer};
use mccl::{Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed() || (r.name != "full_model" && r.cases < 3))
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
        .collect();
    let worst_op = results
        .iter()
        .filter(|r| r.name != "full_model")
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let model = results.iter().find(|r| r.name == "full_model").expect("full-model check");
    outcome(
        failed.is_empty() && secs < 300.0,
        format!(
            "{} checks, worst op/loss {:.2e} (< 1e-4), full model {:.2e} (< 1e-3), {:.0}s (< 300s){}",
            results.len(),
            worst_op,
            model.max_rel_error,
            secs,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn momentum_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    // With beta = 0.1 the error shrinks to 1e-20 of its start, below the
    // rounding of a nonzero target, so that case uses the target zero.
    for (beta, zero_target) in [(0.1, true), (0.5, false), (0.9, false), (0.99, false)] {
        let d = 16;
        let c0: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f: Vec<f64> = if zero_target {
            vec![0.0; d]
        } else {
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let mut mem = ConsensusMemory::new(beta, 0.1).unwrap();
        mem.update("k", &c0, &c0).unwrap();
        let e0 = dist(&c0, &f);
        for t in 1..=20 {
            mem.update("k", &f, &f).unwrap();
            let e = mem.get("k").unwrap();
            for slot in [&e.a, &e.b] {
                let want = beta.powi(t) * e0;
                worst = worst.max((dist(slot, &f) - want).abs() / want);
            }
        }
    }
    let mut mem = ConsensusMemory::new(0.0, 0.1).unwrap();
    mem.update("k", &[1.0, 2.0], &[3.0, 4.0]).unwrap();
    mem.update("k", &[-5.0, 0.25], &[7.0, -1.5]).unwrap();
    let e = mem.get("k").unwrap();
    let overwrite = e.a == [-5.0, 0.25] && e.b == [7.0, -1.5];
    outcome(
        worst < 1e-5 && overwrite,
        format!("geometric decay worst relative error {worst:.2e} (< 1e-5) for t <= 20; beta = 0 overwrite {overwrite}"),
    )
}

// ---------------------------------------------------------------- 3

fn norm_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.hypot(x - y))
}

fn contrastive_algebra() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let n = tape.constant(Tensor::new(&[3], vec![0.5, 0.0, 2.0]).unwrap());
    let t = triplet_loss(&mut tape, a, a, n, 0.1, false).unwrap();
    let triplet = tape.value(t).item();
    let triplet_ok = (triplet + 0.9).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let alpha = rng.gen_range(0.01..1.0);
        let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let live: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|_| (v(&mut rng), v(&mut rng))).collect();
        let mut mem = ConsensusMemory::new(0.1, alpha).unwrap();
        for c in &classes {
            let (ma, mb) = (v(&mut rng), v(&mut rng));
            mem.update(c, &ma, &mb).unwrap();
        }
        let mut tape = Tape::<f64>::new();
        let mut vars = BTreeMap::new();
        for (c, (la, lb)) in classes.iter().zip(&live) {
            let va = tape.param(Tensor::new(&[d], la.clone()).unwrap());
            let vb = tape.param(Tensor::new(&[d], lb.clone()).unwrap());
            vars.insert(c.clone(), (va, vb));
        }
        let loss = mcm_loss(&mut tape, &classes, &mem, &vars).unwrap();
        let got = tape.value(loss).item();
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                want += if i == j {
                    alpha
                } else {
                    let neg = &mem.get(&classes[j]).unwrap().b;
                    norm_oracle(&live[i].0, &live[i].1) - norm_oracle(&live[i].0, neg) + alpha
                };
            }
        }
        want /= (n * n) as f64;
        worst = worst.max((got - want).abs());
    }

    // Memory negatives entered as differentiable leaves still get no gradient.
    let mut tape = Tape::<f64>::new();
    let pairs: Vec<_> = (0..3)
        .map(|_| {
            let a = tape.param(Tensor::uniform(&[4], -1.0, 1.0, &mut rng));
            let b = tape.param(Tensor::uniform(&[4], -1.0, 1.0, &mut rng));
            (a, b)
        })
        .collect();
    let negs: Vec<_> = (0..3).map(|_| tape.param(Tensor::uniform(&[4], -1.0, 1.0, &mut rng))).collect();
    let loss = mcm_loss_vars(&mut tape, &pairs, &negs, 0.1, false).unwrap();
    tape.backward(loss).unwrap();
    let memory_grad_zero = negs
        .iter()
        .all(|&v| tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    let live_grad = pairs.iter().any(|&(a, _)| tape.grad(a).is_some_and(|g| g.iter().any(|&x| x != 0.0)));

    outcome(
        triplet_ok && worst < 1e-6 && memory_grad_zero && live_grad,
        format!(
            "triplet {triplet:.6} (-0.9); mcm vs brute force worst {worst:.2e} (< 1e-6) over 50; memory gradient zero {memory_grad_zero}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn loss_weighting() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let mut one = || tape.constant(Tensor::scalar(1.0));
    let parts = LossParts {
        bce: one(),
        iou: one(),
        mcm: Some(one()),
        adv: Some(one()),
    };
    let total = total_generator_loss(&mut tape, &parts, &LossWeights::default()).unwrap();
    let total = tape.value(total).item();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let disc = Discriminator::build(&mut store, &mut rng, DISC_CHANNELS).unwrap();
    store.param_mut("disc/head/w").unwrap().data_mut().fill(0.0);
    let src = tape.constant(Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let pred = tape.constant(Tensor::uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng));
    let gt = tape.constant(Tensor::full(&[2, 1, 32, 32], 1.0));
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let (loss, scores) = disc_loss(&mut ctx, &disc, src, pred, gt, 3.0).unwrap();
    let d_loss = tape.value(loss).item();
    let at_half = scores.real.iter().chain(&scores.fake).all(|&p| p == 0.5);
    let ln2x3 = 3.0 * 2f64.ln();
    outcome(
        total == 43.5 && at_half && (d_loss - ln2x3).abs() < 1e-6,
        format!("unit components -> {total} (43.5 exactly); discriminator loss at D = 0.5 -> {d_loss:.9} (3 ln 2 = {ln2x3:.9})"),
    )
}

// ---------------------------------------------------------------- 5

fn fake_groups(sizes: &[usize]) -> Vec<ImageGroup> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| ImageGroup {
            class_id: format!("g{i}"),
            images: vec![Tensor::zeros(&[3, 1, 1]); n],
            gts: vec![Tensor::zeros(&[1, 1, 1]); n],
            stems: (0..n).map(|s| format!("{s}")).collect(),
            orig_sizes: vec![(1, 1); n],
        })
        .collect()
}

fn batcher() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop::collection::vec(2usize..70, 1..8), 2usize..60, any::<u64>());
    let result = runner.run(&strategy, |(sizes, cap, seed)| {
        let groups = fake_groups(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=groups.len());
        let batch = make_batch(&groups, n, cap, &mut rng).expect("valid batch");
        let chosen: Vec<usize> = batch.members.iter().map(|m| m.group).collect();
        let min = chosen.iter().map(|&g| sizes[g]).min().unwrap();
        prop_assert_eq!(batch.per_group, even_floor(min.min(cap)));
        let mut distinct = chosen.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), n);
        for m in &batch.members {
            prop_assert_eq!(m.indices.len(), batch.per_group);
            let mut idx = m.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            prop_assert_eq!(idx.len(), batch.per_group);
            prop_assert!(idx.iter().all(|&i| i < sizes[m.group]));
        }
        Ok(())
    });
    outcome(
        result.is_ok(),
        match result {
            Ok(()) => "1000 random group-size vectors: S = even_floor(min(sizes, cap)), no duplicate classes or images".into(),
            Err(e) => format!("property failed: {e}"),
        },
    )
}

// ---------------------------------------------------------------- 6

const GUARD: f64 = 1e-12;

fn thresholds() -> Vec<f64> {
    (0..256).map(|i| i as f64 / 255.0).collect()
}

fn naive_mae(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64
}

fn naive_fmax(p: &[f64], g: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for t in thresholds() {
        let (mut tp, mut fp, mut pos) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            let b = p[i] > t;
            let fg = g[i] > 0.5;
            if fg {
                pos += 1.0;
            }
            if b && fg {
                tp += 1.0;
            }
            if b && !fg {
                fp += 1.0;
            }
        }
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let recall = tp / pos;
        let f = if precision == 0.0 && recall == 0.0 {
            0.0
        } else {
            1.3 * precision * recall / (0.3 * precision + recall)
        };
        best = best.max(f);
    }
    best
}

fn naive_emax(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let gm: f64 = g.iter().sum::<f64>() / n;
    let mut best: f64 = 0.0;
    for t in thresholds() {
        let b: Vec<f64> = p.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
        let bm: f64 = b.iter().sum::<f64>() / n;
        let score = if g.iter().all(|&v| v == 0.0) {
            1.0 - bm
        } else if g.iter().all(|&v| v == 1.0) {
            bm
        } else {
            let mut s = 0.0;
            for i in 0..p.len() {
                let (pg, pb) = (g[i] - gm, b[i] - bm);
                let xi = 2.0 * pg * pb / (pg * pg + pb * pb + GUARD);
                s += (xi + 1.0) * (xi + 1.0) / 4.0;
            }
            s / n
        };
        best = best.max(score);
    }
    best
}

fn naive_object_score(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + GUARD)
}

fn naive_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let d = (n - 1.0).max(1.0);
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / d;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / d;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / d;
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + GUARD)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn naive_s(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let n = p.len() as f64;
    let mu = g.iter().sum::<f64>() / n;
    if mu == 0.0 {
        return 1.0 - p.iter().sum::<f64>() / n;
    }
    if mu == 1.0 {
        return p.iter().sum::<f64>() / n;
    }
    let fg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 1.0).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - p[i]).collect();
    let object = mu * naive_object_score(&fg) + (1.0 - mu) * naive_object_score(&bg);

    let (mut sy, mut sx, mut c) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] == 1.0 {
                sy += y as f64;
                sx += x as f64;
                c += 1.0;
            }
        }
    }
    let round_even = |v: f64| {
        let r = v.round();
        if (v - v.floor() - 0.5).abs() == 0.0 && r % 2.0 != 0.0 {
            r - 1.0
        } else {
            r
        }
    };
    let cx = ((round_even(sx / c) as usize) + 1).min(w);
    let cy = ((round_even(sy / c) as usize) + 1).min(h);
    let mut region = 0.0;
    for (y0, y1) in [(0, cy), (cy, h)] {
        for (x0, x1) in [(0, cx), (cx, w)] {
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            if area == 0.0 {
                continue;
            }
            let mut bp = Vec::new();
            let mut bg = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    bp.push(p[y * w + x]);
                    bg.push(g[y * w + x]);
                }
            }
            region += area / n * naive_ssim(&bp, &bg);
        }
    }
    (0.5 * object + 0.5 * region).clamp(0.0, 1.0)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (16, 16);
    let mut worst = [0.0f64; 4];
    for k in 0..100 {
        let p: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        // Mostly blob-shaped ground truths, with some scattered ones.
        let g: Vec<f64> = if k % 4 == 3 {
            (0..h * w).map(|_| rng.gen_bool(0.3) as u8 as f64).collect()
        } else {
            let (cy, cx, r) = (rng.gen_range(2.0..14.0), rng.gen_range(2.0..14.0), rng.gen_range(2.0..7.0));
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() < r) as u8 as f64
                })
                .collect()
        };
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let pm = SaliencyMap::new(h, w, p.clone()).unwrap();
        let gm = SaliencyMap::new(h, w, g.clone()).unwrap();
        let got = [
            s_measure(&pm, &gm).unwrap(),
            f_measure_max(&pm, &gm).unwrap(),
            e_measure_max(&pm, &gm).unwrap(),
            mae(&pm, &gm).unwrap(),
        ];
        let want = [naive_s(&p, &g, h, w), naive_fmax(&p, &g), naive_emax(&p, &g), naive_mae(&p, &g)];
        for i in 0..4 {
            worst[i] = worst[i].max((got[i] - want[i]).abs());
        }
    }
    let oracle_ok = worst.iter().all(|&e| e < 1e-9);

    let g: Vec<f64> = (0..h * w).map(|i| ((i / w) > 4 && (i / w) < 11 && (i % w) > 3) as u8 as f64).collect();
    let gm = SaliencyMap::new(h, w, g).unwrap();
    let perfect = [
        s_measure(&gm, &gm).unwrap(),
        f_measure_max(&gm, &gm).unwrap(),
        e_measure_max(&gm, &gm).unwrap(),
        mae(&gm, &gm).unwrap(),
    ];
    let perfect_ok =
        (perfect[0] - 1.0).abs() < 1e-9 && (perfect[1] - 1.0).abs() < 1e-9 && (perfect[2] - 1.0).abs() < 1e-9 && perfect[3] == 0.0;

    let zero = SaliencyMap::new(h, w, vec![0.0; h * w]).unwrap();
    let p: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let pm = SaliencyMap::new(h, w, p.clone()).unwrap();
    let mean_p = p.iter().sum::<f64>() / p.len() as f64;
    let degenerate_ok = (s_measure(&pm, &zero).unwrap() - (1.0 - mean_p)).abs() < 1e-12
        && s_measure(&zero, &zero).unwrap() == 1.0
        && (e_measure_max(&pm, &zero).unwrap() - naive_emax(&p, &vec![0.0; h * w])).abs() < 1e-12
        && f_measure_max(&pm, &zero).is_err()
        && (mae(&pm, &zero).unwrap() - mean_p).abs() < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        oracle_ok && perfect_ok && degenerate_ok && secs < 120.0,
        format!(
            "oracle max |diff| S {:.1e} F {:.1e} E {:.1e} MAE {:.1e} (< 1e-9); perfect {:?}; all-zero-gt conventions {}; {:.1}s",
            worst[0], worst[1], worst[2], worst[3], perfect, degenerate_ok, secs
        ),
    )
}

// ---------------------------------------------------------------- 7

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig::default();
    let make = |sub: &str, per_group: usize, seed: u64| {
        let cfg = SynthConfig {
            n_groups: 6,
            images_per_group: per_group,
            size: config.image_size,
            seed,
            ..Default::default()
        };
        synth_generate(&cfg, &dir.path().join(sub)).unwrap();
    };
    make("train", 12, config.seed);
    make("test", 2, config.seed + 1);
    let run = dir.path().join("run");
    let report = train(
        &config,
        &dir.path().join("train/images"),
        &dir.path().join("train/gts"),
        &run,
        |_| {},
    )
    .unwrap();
    let pred = dir.path().join("pred");
    infer(&run.join("checkpoint.mccl"), &dir.path().join("test/images"), &pred).unwrap();
    let scores = evaluate_dataset(&pred, &dir.path().join("test/gts")).unwrap().scores();
    let first = report.epochs.first().unwrap().sal;
    let last = report.epochs.last().unwrap().sal;
    let pass = report.seconds <= 1800.0 && scores.f_max >= 0.80 && scores.mae <= 0.10 && last < 0.3 * first;
    outcome(
        pass,
        format!(
            "held-out max F {:.3} (>= 0.80), MAE {:.3} (<= 0.10); L_sal first {:.3} -> last {:.3} (< 0.3x); train {:.0}s (<= 1800s)",
            scores.f_max, scores.mae, first, last, report.seconds
        ),
    )
}

// ---------------------------------------------------------------- 8

fn small_config() -> TrainConfig {
    TrainConfig {
        image_size: 32,
        epochs: 1,
        channels: [8, 16, 32, 64],
        ..TrainConfig::default()
    }
}

fn small_groups(dir: &std::path::Path) -> Vec<ImageGroup> {
    let cfg = SynthConfig {
        n_groups: 4,
        images_per_group: 4,
        size: 32,
        seed: 9,
        ..Default::default()
    };
    synth_generate(&cfg, dir).unwrap();
    load_dataset(&dir.join("images"), &dir.join("gts"), Some(32)).unwrap()
}

fn tensors_bits(t: &mccl::checkpoint::Tensors) -> Vec<u8> {
    to_bytes(t)
}

fn discriminator_sanity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig::default();
    synth_generate(
        &SynthConfig {
            size: config.image_size,
            seed: config.seed,
            ..Default::default()
        },
        dir.path(),
    )
    .unwrap();
    let groups = load_dataset(&dir.path().join("images"), &dir.path().join("gts"), Some(config.image_size)).unwrap();
    let lr = config.lr;
    let mut trainer = Trainer::new(config).unwrap();
    let mut recent = Vec::new();
    let mut reached = None;
    for step in 1..=200 {
        recent.push(trainer.disc_step(&groups, lr).unwrap().accuracy());
        if recent.len() > 10 {
            recent.remove(0);
        }
        if recent.len() == 10 && recent.iter().sum::<f64>() / 10.0 >= 0.9 {
            reached = Some(step);
            break;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let groups = small_groups(dir.path());
    let mut with_zero_weight = small_config();
    with_zero_weight.weights.adv = 0.0;
    let without = TrainConfig {
        enable_ail: false,
        ..small_config()
    };
    let mut a = Trainer::new(with_zero_weight).unwrap();
    let mut b = Trainer::new(without).unwrap();
    let mut same_losses = true;
    for _ in 0..2 {
        let la = a.step(&groups, 1e-4).unwrap();
        let lb = b.step(&groups, 1e-4).unwrap();
        same_losses &= la.bce.to_bits() == lb.bce.to_bits()
            && la.iou.to_bits() == lb.iou.to_bits()
            && la.sal.to_bits() == lb.sal.to_bits();
    }
    let gen = |t: &Trainer| {
        let mut g = t.store.named_tensors();
        g.extend(t.memory.named_tensors());
        tensors_bits(&g)
    };
    let identical = same_losses && gen(&a) == gen(&b);
    outcome(
        reached.is_some() && identical,
        format!(
            "10-step mean accuracy >= 0.9 {}; lambda4 = 0 generator bit-identical to AIL disabled: {identical}",
            reached.map_or("not reached in 200 steps".into(), |s| format!("at step {s}"))
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let groups = small_groups(dir.path());
    let run = |seed: u64| {
        let mut t = Trainer::new(TrainConfig {
            seed,
            ..small_config()
        })
        .unwrap();
        t.fit(&groups, |_| {}).unwrap();
        t.checkpoint_tensors()
    };
    let (a, b, c) = (run(5), run(5), run(6));
    let same_seed = to_bytes(&a) == to_bytes(&b);
    let other_seed_differs = to_bytes(&a) != to_bytes(&c);

    let stripped = strip_training_state(&a);
    let has_training_state = a.keys().any(|k| k.starts_with("mcm/")) && a.keys().any(|k| k.starts_with("disc/"));
    let full = Predictor::from_tensors(&a).unwrap();
    let lean = Predictor::from_tensors(&stripped).unwrap();
    let mut inference_same = true;
    for g in &groups {
        let x = full.predict_group(g).unwrap();
        let y = lean.predict_group(g).unwrap();
        inference_same &= x.len() == y.len()
            && x.iter().zip(&y).all(|(p, q)| {
                p.values().iter().zip(q.values()).all(|(u, v)| u.to_bits() == v.to_bits())
            });
    }
    outcome(
        same_seed && other_seed_differs && has_training_state && inference_same,
        format!(
            "same seed bit-identical checkpoints {same_seed} (other seed differs {other_seed_differs}); stripped checkpoint ({} of {} tensors) gives bit-identical inference {inference_same}",
            stripped.len(),
            a.len()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("momentum update algebra", momentum_algebra),
        ("triplet and contrastive loss algebra", contrastive_algebra),
        ("loss weighting", loss_weighting),
        ("group batcher", batcher),
        ("metric oracles", metric_oracles),
        ("end-to-end synthetic learning", end_to_end),
        ("discriminator sanity and AIL toggle", discriminator_sanity),
        ("determinism and checkpoint round-trip", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {} {status}: {name}: {}", i + 1, out.detail);
        if !out.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
