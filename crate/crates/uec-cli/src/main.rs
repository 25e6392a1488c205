//! `uec`: command-line pipeline for unsupervised exposure correction.
//!
//! Subcommands cover the whole workflow: `synth` builds multi-exposure
//! datasets from well-exposed images, `train` fits the corrector network,
//! `correct` fixes a single image against a reference, `eval` scores a test
//! manifest, `bench` measures single-thread latency, and `gradcheck` runs
//! the finite-difference suite.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 runtime
//! abort (non-finite loss). All processing is single-threaded and
//! deterministic under the given seeds.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use uec_core::checkpoint;
use uec_core::gradcheck;
use uec_core::isp::{self, SynthOptions};
use uec_core::metrics::{self, MetricSelection};
use uec_core::train::{self, Dataset, TrainConfig, TrainOptions};
use uec_core::ImageF32;

#[derive(Parser)]
#[command(name = "uec", version, about = "Unsupervised exposure correction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a multi-exposure dataset from well-exposed images
    Synth(SynthArgs),
    /// Train the corrector on a synthesized dataset
    Train(TrainArgs),
    /// Correct one image against a reference image or cached feature
    Correct(CorrectArgs),
    /// Score corrected frames of a test manifest against ground truth
    Eval(EvalArgs),
    /// Measure single-threaded apply() latency
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of 8-bit RGB PNG/PPM images
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Comma-separated EV grid in stops; must contain 0
    #[arg(long, default_value = "-2,-1,0,1,2,3")]
    ev_grid: String,
    /// Jitter each non-zero EV by up to +/-0.25 stop
    #[arg(long)]
    jitter: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the dataset manifest.json
    #[arg(long)]
    data: PathBuf,
    /// JSON file mirroring the training config fields
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path (a .state sidecar is written next to it)
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint and its .state sidecar
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Metrics log path (default: <out>.metrics.jsonl)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference image to encode
    #[arg(long, conflicts_with = "ref_feature", required_unless_present = "ref_feature")]
    reference: Option<PathBuf>,
    /// Cached reference feature (.uecf)
    #[arg(long)]
    ref_feature: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Cache the encoded reference feature to this .uecf path
    #[arg(long)]
    save_ref_feature: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference image; when omitted, eval sweeps the first manifest
    /// scene's frames and picks the best-PSNR reference
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    test_manifest: PathBuf,
    /// Comma-separated subset of psnr,ssim,edge
    #[arg(long, default_value = "psnr,ssim,edge")]
    metrics: String,
    /// Report JSON output path
    #[arg(long)]
    report: PathBuf,
    /// Optional CSV with the per-(input, reference-EV) sweep rows
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WxH, e.g. 256x256 or 3840x2160
    #[arg(long, default_value = "256x256")]
    resolution: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds per op
    #[arg(long, default_value_t = 2)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Correct(args) => cmd_correct(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let runtime_abort = err
                .downcast_ref::<uec_core::Error>()
                .map(|e| matches!(e, uec_core::Error::NonFiniteLoss { .. }))
                .unwrap_or(false);
            if runtime_abort {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn parse_ev_grid(spec: &str) -> anyhow::Result<Vec<f32>> {
    let mut grid = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let ev: f32 = part
            .parse()
            .with_context(|| format!("invalid EV '{part}' in grid '{spec}'"))?;
        if !(-5.0..=5.0).contains(&ev) {
            bail!("EV {ev} outside [-5, +5]");
        }
        grid.push(ev);
    }
    if grid.is_empty() {
        bail!("empty EV grid");
    }
    if !grid.contains(&0.0) {
        bail!("EV grid must contain 0 (the ground-truth exposure)");
    }
    Ok(grid)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let ev_grid = parse_ev_grid(&args.ev_grid)?;
    let manifest = isp::synth_dataset(
        &args.input_dir,
        &args.output_dir,
        &SynthOptions {
            ev_grid,
            jitter: args.jitter,
            seed: args.seed,
        },
    )?;
    let frames: usize = manifest.scenes.iter().map(|s| s.frames.len()).sum();
    println!(
        "wrote {} ({} scenes, {} frames)",
        args.output_dir.join("manifest.json").display(),
        manifest.scenes.len(),
        frames
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = TrainConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    let dataset = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let summary = train::train(
        &dataset,
        &cfg,
        &TrainOptions {
            out: args.out,
            log: args.log,
            resume: args.resume,
        },
    )?;
    if let Some(rec) = &summary.last_record {
        println!(
            "step {}: l_rest {:.6} l_mono {:.6} l_sem {:.6} l_total {:.6}",
            rec.step, rec.l_rest, rec.l_mono, rec.l_sem, rec.l_total
        );
    }
    println!(
        "trained {} steps -> {} (log: {})",
        summary.steps_run,
        summary.checkpoint.display(),
        summary.metrics_log.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_correct(args: CorrectArgs) -> anyhow::Result<ExitCode> {
    let model = checkpoint::load_model(&args.checkpoint)?;
    let feature = match (&args.reference, &args.ref_feature) {
        (Some(path), None) => {
            let reference = ImageF32::load(path)?;
            model.encode(&reference)
        }
        (None, Some(path)) => checkpoint::load_feature(path)?,
        _ => bail!("exactly one of --reference / --ref-feature is required"),
    };
    if let Some(path) = &args.save_ref_feature {
        checkpoint::save_feature(&feature, path)?;
        println!("cached reference feature -> {}", path.display());
    }
    let input = ImageF32::load(&args.input)?;
    let output = model.apply(&input, &feature);
    output.save(&args.output)?;
    println!(
        "corrected {}x{} image -> {}",
        input.width(),
        input.height(),
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct ReferenceInfo {
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ev: Option<f32>,
}

#[derive(serde::Serialize)]
struct FullReport {
    metrics: String,
    reference: ReferenceInfo,
    model: metrics::EvalReport,
    identity_baseline: metrics::EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepSummary>,
}

#[derive(serde::Serialize)]
struct SweepSummary {
    monotone_fraction: f64,
    inputs_checked: usize,
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let sel = MetricSelection::parse(&args.metrics)?;
    let model = checkpoint::load_model(&args.checkpoint)?;
    let dataset = Dataset::load(&args.test_manifest)?;

    let identity_baseline = metrics::evaluate_dataset(&|img| img.clone(), &dataset, &sel)?;

    let (reference_info, model_report, sweep) = match &args.reference {
        Some(path) => {
            let feature = model.encode(&ImageF32::load(path)?);
            let report =
                metrics::evaluate_dataset(&|img| model.apply(img, &feature), &dataset, &sel)?;
            let info = ReferenceInfo {
                path: Some(path.display().to_string()),
                scene: None,
                ev: None,
            };
            let sweep_csv = args.csv.is_some();
            if sweep_csv {
                bail_if_single_scene(&dataset)?;
                let audit =
                    metrics::ev_sweep_audit(&model, &dataset.scenes[1..], &dataset.scenes[0], &sel)?;
                write_csv(&args, &audit)?;
            }
            (info, report, None)
        }
        None => {
            // Sweep the first scene's frames as candidate references and
            // keep the best mean PSNR.
            if !sel.psnr {
                bail!("reference auto-selection needs the psnr metric enabled");
            }
            bail_if_single_scene(&dataset)?;
            let ref_scene = &dataset.scenes[0];
            let test = Dataset {
                scenes: dataset.scenes[1..].to_vec(),
            };
            let mut best: Option<(f64, f32, metrics::EvalReport)> = None;
            for (ev, frame) in &ref_scene.frames {
                let feature = model.encode(frame);
                let report =
                    metrics::evaluate_dataset(&|img| model.apply(img, &feature), &test, &sel)?;
                let score = report.aggregate.psnr_db.unwrap_or(f64::NEG_INFINITY);
                if best.as_ref().map(|(s, _, _)| score > *s).unwrap_or(true) {
                    best = Some((score, *ev, report));
                }
            }
            let (_, best_ev, report) = best.expect("manifest scenes are non-empty");
            let audit = metrics::ev_sweep_audit(&model, &test.scenes, ref_scene, &sel)?;
            write_csv(&args, &audit)?;
            let info = ReferenceInfo {
                path: None,
                scene: Some(ref_scene.scene_id.clone()),
                ev: Some(best_ev),
            };
            let sweep = SweepSummary {
                monotone_fraction: audit.monotone_fraction,
                inputs_checked: audit.inputs_checked,
            };
            (info, report, Some(sweep))
        }
    };

    let full = FullReport {
        metrics: args.metrics.clone(),
        reference: reference_info,
        model: model_report,
        identity_baseline,
        sweep,
    };
    std::fs::write(&args.report, serde_json::to_string_pretty(&full)?)
        .with_context(|| format!("writing {}", args.report.display()))?;
    if let Some(p) = full.model.aggregate.psnr_db {
        let base = full
            .identity_baseline
            .aggregate
            .psnr_db
            .unwrap_or(f64::NAN);
        println!("aggregate psnr {:.3} dB (identity baseline {:.3} dB)", p, base);
    }
    println!("report -> {}", args.report.display());
    Ok(ExitCode::SUCCESS)
}

fn bail_if_single_scene(dataset: &Dataset) -> anyhow::Result<()> {
    if dataset.scenes.len() < 2 {
        bail!("the EV sweep needs at least 2 scenes (one serves as the reference sequence)");
    }
    Ok(())
}

fn write_csv(args: &EvalArgs, audit: &metrics::SweepAudit) -> anyhow::Result<()> {
    if let Some(path) = &args.csv {
        std::fs::write(path, audit.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("sweep csv -> {}", path.display());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<ExitCode> {
    let (w, h) = parse_resolution(&args.resolution)?;
    let model = checkpoint::load_model(&args.checkpoint)?;
    let stats = metrics::bench_apply(&model, h, w, args.iters)?;
    println!(
        "{}x{}: median {:.3} ms, p95 {:.3} ms, {:.1} MP/s ({} iters, single-threaded)",
        w, h, stats.median_ms, stats.p95_ms, stats.megapixels_per_second, stats.iters
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_resolution(spec: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = spec
        .split_once(['x', 'X'])
        .with_context(|| format!("resolution '{spec}' is not WxH"))?;
    let w: usize = w.trim().parse().with_context(|| format!("bad width in '{spec}'"))?;
    let h: usize = h.trim().parse().with_context(|| format!("bad height in '{spec}'"))?;
    if w == 0 || h == 0 {
        bail!("resolution must be positive");
    }
    Ok((w, h))
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let reports = gradcheck::run_standard_suite(args.seeds, gradcheck::DEFAULT_TOLERANCE);
    let mut failed = false;
    let mut worst: Option<&gradcheck::GradCheckReport> = None;
    for r in &reports {
        println!(
            "{:<18} max rel err {:.3e} (tolerance {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed = true;
        }
        if worst.map(|w| r.max_rel_err > w.max_rel_err).unwrap_or(true) {
            worst = Some(r);
        }
    }
    if let Some(w) = worst {
        println!("worst op: {} at {:.3e}", w.name, w.max_rel_err);
    }
    Ok(if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}
