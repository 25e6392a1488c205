//! Acceptance suite: one pass/fail line per criterion, run sequentially in a
//! single test so timing-sensitive checks are not distorted by parallel
//! load. Criteria 5 and 6 share one desk-scale training run.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use uec_core::checkpoint;
use uec_core::gradcheck;
use uec_core::image::ImageF32;
use uec_core::isp::{self, synth_sequence, verify_monotonicity, SynthOptions, DEFAULT_EV_GRID};
use uec_core::metrics::{self, MetricSelection};
use uec_core::model::UecModel;
use uec_core::synthetic::test_scene;
use uec_core::train::{self, Dataset, TrainConfig, TrainOptions};

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, id: usize, name: &str, passed: bool, detail: String) {
    println!(
        "criterion {:>2} [{}] {}: {}",
        id,
        if passed { "PASS" } else { "FAIL" },
        name,
        detail
    );
    results.push(Outcome { id, passed, detail });
}

fn corpus(n: usize, size: usize, base_seed: u64) -> Dataset {
    let seqs = (0..n)
        .map(|i| {
            synth_sequence(
                &format!("scene_{i:03}"),
                &test_scene(size, size, base_seed + i as u64),
                &DEFAULT_EV_GRID,
            )
            .unwrap()
        })
        .collect();
    Dataset::from_sequences(seqs)
}

#[test]
fn acceptance() {
    let mut results = Vec::new();

    criterion_1_gradient_suite(&mut results);
    criterion_2_ev_ordering(&mut results);
    criterion_3_identity_contracts(&mut results);
    criterion_4_pixel_locality(&mut results);
    let trained = criterion_5_desk_training(&mut results);
    criterion_6_monopoly_sweep(&mut results, &trained);
    criterion_7_parameter_budget(&mut results);
    criterion_8_latency(&mut results);
    criterion_9_metric_oracles(&mut results);
    criterion_10_determinism(&mut results);

    let failures: Vec<&Outcome> = results.iter().filter(|o| !o.passed).collect();
    if !failures.is_empty() {
        let summary: Vec<String> = failures
            .iter()
            .map(|o| format!("criterion {}: {}", o.id, o.detail))
            .collect();
        panic!("{} criterion(s) failed:\n{}", failures.len(), summary.join("\n"));
    }
}

/// 1. Every differentiable op and the end-to-end 8x8 forward pass match
/// central finite differences, max relative error < 1e-3 over 10 seeds,
/// in under 2 minutes.
fn criterion_1_gradient_suite(results: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let reports = gradcheck::run_standard_suite(10, gradcheck::DEFAULT_TOLERANCE);
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let all_passed = reports.iter().all(|r| r.passed());
    let in_time = elapsed < 120.0;
    record(
        results,
        1,
        "gradient suite",
        all_passed && in_time,
        format!(
            "{} ops x 10 seeds, worst {} at {:.2e} (< 1e-3), {:.1}s (< 120s)",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            elapsed
        ),
    );
}

/// 2. EV ordering holds pixelwise in float form (zero violations) and
/// within 1/255 after 8-bit quantization, over at least 20 scenes.
fn criterion_2_ev_ordering(results: &mut Vec<Outcome>) {
    let scenes = 24usize;
    let mut float_violations = 0usize;
    let mut quant_failures = 0usize;
    let mut worst_quant = 0.0f32;
    for i in 0..scenes {
        let seq = synth_sequence(
            &format!("ord_{i}"),
            &test_scene(32, 32, 3_000 + i as u64),
            &DEFAULT_EV_GRID,
        )
        .unwrap();
        let float_report = verify_monotonicity(&seq, 0.0);
        float_violations += float_report.violating_pixels;

        let quantized = isp::ExposureSequence {
            scene_id: seq.scene_id.clone(),
            frames: seq.frames.iter().map(|(ev, f)| (*ev, f.quantized())).collect(),
            gt_index: seq.gt_index,
        };
        let quant_report = verify_monotonicity(&quantized, 1.0 / 255.0);
        if !quant_report.passed {
            quant_failures += 1;
        }
        worst_quant = worst_quant.max(quant_report.max_violation);
    }
    record(
        results,
        2,
        "EV ordering",
        float_violations == 0 && quant_failures == 0,
        format!(
            "{scenes} scenes x 6 EVs: {float_violations} float violations, \
             {quant_failures} sequences beyond 1/255 after quantization (worst {worst_quant:.6})"
        ),
    );
}

/// 3. Identity contracts: unit lambdas return the input bit-exactly; a
/// freshly initialized model deviates < 1e-3 per channel.
fn criterion_3_identity_contracts(results: &mut Vec<Outcome>) {
    let mut bit_exact = true;
    let mut max_dev = 0.0f32;
    for seed in 0..5u64 {
        let model = UecModel::init(seed);
        let img = test_scene(33, 47, 4_000 + seed);
        let out = model.correct(&img, [1.0, 1.0, 1.0]);
        bit_exact &= out.data() == img.data();

        let reference = model.encode(&test_scene(32, 32, 5_000 + seed));
        let fresh = model.apply(&img, &reference);
        for (a, b) in img.data().iter().zip(fresh.data()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    record(
        results,
        3,
        "identity contracts",
        bit_exact && max_dev < 1e-3,
        format!("unit-lambda bit-exact: {bit_exact}; fresh-model max deviation {max_dev:.2e} (< 1e-3)"),
    );
}

/// 4. Pixel locality: correct() commutes with crops bit-exactly, 10 random
/// crops on each of 5 images.
fn criterion_4_pixel_locality(results: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0usize;
    for seed in 0..5u64 {
        let model = UecModel::init(seed);
        let img = test_scene(64, 80, 6_000 + seed);
        let lambdas = [
            rng.random_range(-0.5f32..1.5),
            rng.random_range(-0.5f32..1.5),
            rng.random_range(-0.5f32..1.5),
        ];
        let full = model.correct(&img, lambdas);
        for _ in 0..10 {
            let h = rng.random_range(1..=img.height());
            let w = rng.random_range(1..=img.width());
            let y0 = rng.random_range(0..=img.height() - h);
            let x0 = rng.random_range(0..=img.width() - w);
            let direct = model.correct(&img.crop(y0, x0, h, w).unwrap(), lambdas);
            let cropped = full.crop(y0, x0, h, w).unwrap();
            if direct.data() != cropped.data() {
                mismatches += 1;
            }
        }
    }
    record(
        results,
        4,
        "pixel locality",
        mismatches == 0,
        format!("5 images x 10 random crops: {mismatches} bit-level mismatches"),
    );
}

/// 5. Desk-scale training on a >=50-scene synthesized corpus finishes within
/// the single-thread budget and beats the identity baseline on held-out
/// pretext restoration PSNR by >= 3 dB averaged over EVs. Both sides of the
/// comparison come from the same evaluation harness.
fn criterion_5_desk_training(results: &mut Vec<Outcome>) -> (UecModel, Dataset) {
    let train_ds = corpus(48, 96, 10_000);
    let held_out = corpus(8, 96, 20_000);
    let sel = MetricSelection {
        psnr: true,
        ssim: false,
        edge: false,
    };

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 800,
        crop: 48,
        batch_pairs: 6,
        batch_triples: 6,
        lr: 1e-3,
        seed: 1,
        checkpoint_every: 400,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        out: dir.path().join("desk.ueck"),
        log: None,
        resume: None,
    };
    let t0 = Instant::now();
    train::train(&train_ds, &cfg, &opts).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let model = checkpoint::load_model(&opts.out).unwrap();

    let baseline = metrics::evaluate_dataset(&|img| img.clone(), &held_out, &sel).unwrap();
    let trained = metrics::evaluate_with_gt_reference(&model, &held_out, &sel).unwrap();
    let mut gains = Vec::new();
    for (b, t) in baseline.per_ev.iter().zip(trained.per_ev.iter()) {
        assert_eq!(b.ev, t.ev);
        gains.push(t.scores.psnr_db.unwrap() - b.scores.psnr_db.unwrap());
    }
    let avg_gain = gains.iter().sum::<f64>() / gains.len() as f64;

    // post-training audits: exposure-difference sign consistency and
    // brightening of under-exposed inputs
    let mut sign_pos = 0usize;
    let mut sign_total = 0usize;
    for scene in &held_out.scenes {
        for pair in scene.frames.windows(2) {
            let delta = model.predict_delta(&model.encode(&pair[0].1), &model.encode(&pair[1].1));
            if delta > 0.0 {
                sign_pos += 1;
            }
            sign_total += 1;
        }
    }
    let sign_consistency = sign_pos.max(sign_total - sign_pos) as f64 / sign_total as f64;

    let mut brightened = 0usize;
    let mut dark_total = 0usize;
    for scene in &held_out.scenes {
        let reference = model.encode(&scene.frames[scene.gt_index].1);
        for (ev, frame) in &scene.frames {
            if *ev < -0.5 {
                let out = model.apply(frame, &reference);
                if out.mean_luminance() > frame.mean_luminance() {
                    brightened += 1;
                }
                dark_total += 1;
            }
        }
    }
    let brighten_frac = brightened as f64 / dark_total as f64;

    let passed = avg_gain >= 3.0
        && train_secs < 3_600.0
        && sign_consistency >= 0.9
        && brighten_frac >= 0.9;
    record(
        results,
        5,
        "desk-scale training",
        passed,
        format!(
            "56-scene corpus, {} steps in {:.0}s (< 3600s): held-out gain {:+.2} dB over identity \
             (>= +3 dB; per-EV {:?}), delta-sign consistency {:.0}%, \
             under-exposed brightened {brightened}/{dark_total}",
            cfg.steps,
            train_secs,
            avg_gain,
            gains.iter().map(|g| format!("{g:+.1}")).collect::<Vec<_>>(),
            sign_consistency * 100.0
        ),
    );
    (model, held_out)
}

/// 6. Monopoly property after training: >= 95% of held-out inputs have mean
/// output luminance non-decreasing in the reference EV.
fn criterion_6_monopoly_sweep(results: &mut Vec<Outcome>, trained: &(UecModel, Dataset)) {
    let (model, held_out) = trained;
    let sel = MetricSelection {
        psnr: false,
        ssim: false,
        edge: false,
    };
    let audit =
        metrics::ev_sweep_audit(model, &held_out.scenes[1..], &held_out.scenes[0], &sel).unwrap();
    record(
        results,
        6,
        "monopoly sweep",
        audit.monotone_fraction >= 0.95,
        format!(
            "{:.1}% of {} held-out inputs monotone in reference EV (>= 95%)",
            audit.monotone_fraction * 100.0,
            audit.inputs_checked
        ),
    );
}

/// 7. Parameter budget between 5,000 and 30,000.
fn criterion_7_parameter_budget(results: &mut Vec<Outcome>) {
    let count = UecModel::init(0).param_count();
    record(
        results,
        7,
        "parameter budget",
        (5_000..=30_000).contains(&count),
        format!("{count} parameters in [5000, 30000] (published reference model: 19388)"),
    );
}

/// 8. Latency: single-threaded apply() median < 50 ms at 256x256 and a 4K
/// frame completes in < 5 s.
fn criterion_8_latency(results: &mut Vec<Outcome>) {
    let model = UecModel::init(0);
    let small = metrics::bench_apply(&model, 256, 256, 30).unwrap();
    let large = metrics::bench_apply(&model, 2160, 3840, 10).unwrap();
    record(
        results,
        8,
        "latency",
        small.median_ms < 50.0 && large.median_ms < 5_000.0,
        format!(
            "256x256 median {:.2} ms (< 50 ms, published anchor 6.38 ms); \
             3840x2160 median {:.0} ms (< 5000 ms), {:.1} MP/s",
            small.median_ms, large.median_ms, large.megapixels_per_second
        ),
    );
}

/// 9. Metric oracles: uniform 1/255 shift = 48.13 +/- 0.01 dB, ssim(a,a)=1,
/// edge_f1(identical)=1, ssim matches a direct sliding-window oracle to
/// 1e-6 on 32x32 random pairs.
fn criterion_9_metric_oracles(results: &mut Vec<Outcome>) {
    let a = ImageF32::constant(16, 16, 0.4).unwrap();
    let b = ImageF32::constant(16, 16, 0.4 + 1.0 / 255.0).unwrap();
    let shift_psnr = metrics::psnr(&a, &b).unwrap();
    let psnr_ok = (shift_psnr - 48.13).abs() <= 0.01;

    let img = test_scene(32, 32, 7_000);
    let ssim_self = metrics::ssim(&img, &img).unwrap();
    let ssim_self_ok = ssim_self == 1.0;

    let map = metrics::edge_map(&img).unwrap();
    let f1_ok = metrics::edge_f1(&map, &map).unwrap() == 1.0;

    let mut worst_ssim_dev = 0.0f64;
    for seed in 0..3u64 {
        let x = test_scene(32, 32, 8_000 + seed);
        let y = test_scene(32, 32, 9_000 + seed);
        let fast = metrics::ssim(&x, &y).unwrap();
        let slow = ssim_window_oracle(&x, &y);
        worst_ssim_dev = worst_ssim_dev.max((fast - slow).abs());
    }
    let oracle_ok = worst_ssim_dev <= 1e-6;

    record(
        results,
        9,
        "metric oracles",
        psnr_ok && ssim_self_ok && f1_ok && oracle_ok,
        format!(
            "1/255 shift {shift_psnr:.3} dB (48.13 +/- 0.01), ssim(a,a) = {ssim_self}, \
             edge_f1(identical) = 1, ssim-vs-window-oracle dev {worst_ssim_dev:.2e} (<= 1e-6)"
        ),
    );
}

/// Independent SSIM oracle: literal per-window weighted sums.
fn ssim_window_oracle(a: &ImageF32, b: &ImageF32) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let mut kernel = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *k = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *k;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = kernel[dy] * kernel[dx];
                        let va = a.get(y0 + dy, x0 + dx, c) as f64;
                        let vb = b.get(y0 + dy, x0 + dx, c) as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        eaa += wgt * va * va;
                        ebb += wgt * vb * vb;
                        eab += wgt * va * vb;
                    }
                }
                let va = eaa - ma * ma;
                let vb = ebb - mb * mb;
                let cov = eab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// 10. Determinism: two full synth -> train(500) -> correct runs with the
/// same seeds produce bit-identical checkpoints and output images.
fn criterion_10_determinism(results: &mut Vec<Outcome>) {
    let run = || -> (Vec<String>, Vec<u8>, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let input_dir = dir.path().join("in");
        std::fs::create_dir_all(&input_dir).unwrap();
        for i in 0..6u64 {
            test_scene(64, 64, 30_000 + i)
                .save(&input_dir.join(format!("img_{i}.png")))
                .unwrap();
        }
        let data_dir = dir.path().join("data");
        let manifest = isp::synth_dataset(
            &input_dir,
            &data_dir,
            &SynthOptions {
                ev_grid: DEFAULT_EV_GRID.to_vec(),
                jitter: false,
                seed: 7,
            },
        )
        .unwrap();
        let checksums: Vec<String> = manifest
            .scenes
            .iter()
            .flat_map(|s| s.frames.iter().map(|f| f.sha256.clone()))
            .collect();

        let dataset = Dataset::load(&data_dir.join("manifest.json")).unwrap();
        let cfg = TrainConfig {
            steps: 500,
            crop: 32,
            batch_pairs: 2,
            batch_triples: 2,
            seed: 7,
            checkpoint_every: 250,
            ..TrainConfig::default()
        };
        let out = dir.path().join("m.ueck");
        train::train(
            &dataset,
            &cfg,
            &TrainOptions {
                out: out.clone(),
                log: None,
                resume: None,
            },
        )
        .unwrap();
        let ckpt_bytes = std::fs::read(&out).unwrap();

        let model = checkpoint::load_model(&out).unwrap();
        let reference = model.encode(&dataset.scenes[0].frames[dataset.scenes[0].gt_index].1);
        let corrected = model.apply(&dataset.scenes[1].frames[0].1, &reference);
        let png = corrected.encode_png().unwrap();
        (checksums, ckpt_bytes, png)
    };

    let t0 = Instant::now();
    let (sums_a, ckpt_a, png_a) = run();
    let (sums_b, ckpt_b, png_b) = run();
    record(
        results,
        10,
        "determinism",
        sums_a == sums_b && ckpt_a == ckpt_b && png_a == png_b,
        format!(
            "two synth->train(500)->correct runs in {:.0}s: frame checksums equal: {}, \
             checkpoints bit-identical: {}, corrected PNGs bit-identical: {}",
            t0.elapsed().as_secs_f64(),
            sums_a == sums_b,
            ckpt_a == ckpt_b,
            png_a == png_b
        ),
    );
}
