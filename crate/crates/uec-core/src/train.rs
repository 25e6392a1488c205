//! Losses, batch sampling, the Adam optimizer, and the training loop.
//!
//! Each step mixes two regimes. Pretext pairs take the input and the
//! reference from one multi-exposure sequence, so the reference is also the
//! pixel target (restoration loss). Real triples correct one input against
//! two references from a different scene and only constrain the ordering of
//! the two outputs (monopoly loss). A squared total-variation term keeps
//! spatial structure intact on every generated output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageF32;
use crate::isp::Manifest;
use crate::model::{
    tape_correct, tape_encode, tape_predict_delta, tape_predict_lambdas, BoundModel, UecModel,
    ARCH,
};
use crate::tensor::{Tape, TensorId};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Training hyperparameters. The JSON config file mirrors these field names
/// exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha1: f32,
    pub alpha2: f32,
    pub alpha3: f32,
    pub lr: f32,
    pub batch_pairs: usize,
    pub batch_triples: usize,
    pub steps: u64,
    pub crop: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 0.1,
            lr: 1e-3,
            batch_pairs: 8,
            batch_triples: 8,
            steps: 20_000,
            crop: 128,
            seed: 0,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha3 < 0.0 {
            return Err(Error::InvalidConfig {
                reason: "loss weights must be >= 0".into(),
            });
        }
        if self.crop < 16 {
            return Err(Error::InvalidConfig {
                reason: format!("crop {} < 16", self.crop),
            });
        }
        if self.batch_pairs < 1 || self.batch_triples < 1 {
            return Err(Error::InvalidConfig {
                reason: "batch counts must be >= 1".into(),
            });
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig {
                reason: "steps must be >= 1".into(),
            });
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("lr {} must be > 0", self.lr),
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Dataset ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SceneFrames {
    pub scene_id: String,
    /// (ev, frame) sorted ascending by ev.
    pub frames: Vec<(f32, ImageF32)>,
    pub gt_index: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneFrames>,
}

impl Dataset {
    /// Load every frame referenced by a synthesis manifest into memory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, root)
    }

    pub fn from_manifest(manifest: &Manifest, root: &Path) -> Result<Self> {
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for scene in &manifest.scenes {
            let mut frames = Vec::with_capacity(scene.frames.len());
            for frame in &scene.frames {
                frames.push((frame.ev, ImageF32::load(&root.join(&frame.path))?));
            }
            frames.sort_by(|a, b| a.0.total_cmp(&b.0));
            let gt_index = frames
                .iter()
                .position(|(ev, _)| *ev == scene.gt_ev)
                .ok_or_else(|| {
                    Error::Manifest(format!("scene '{}' lacks a gt frame", scene.scene_id))
                })?;
            scenes.push(SceneFrames {
                scene_id: scene.scene_id.clone(),
                frames,
                gt_index,
            });
        }
        Ok(Self { scenes })
    }

    pub fn from_sequences(seqs: Vec<crate::isp::ExposureSequence>) -> Self {
        Self {
            scenes: seqs
                .into_iter()
                .map(|s| SceneFrames {
                    scene_id: s.scene_id,
                    frames: s.frames,
                    gt_index: s.gt_index,
                })
                .collect(),
        }
    }
}

// ── Sampling ──────────────────────────────────────────────────────────

/// Input and reference from one sequence; the reference is the target.
#[derive(Debug, Clone)]
pub struct PretextPair {
    pub input: ImageF32,
    pub reference: ImageF32,
    pub scene: String,
    pub input_ev: f32,
    pub ref_ev: f32,
}

/// Input from one scene, two references (higher/lower EV) from another.
#[derive(Debug, Clone)]
pub struct RealTriple {
    pub input: ImageF32,
    pub ref_hi: ImageF32,
    pub ref_lo: ImageF32,
    pub input_scene: String,
    pub ref_scene: String,
    pub input_ev: f32,
    pub ev_hi: f32,
    pub ev_lo: f32,
}

fn crop_origin(rng: &mut ChaCha8Rng, h: usize, w: usize, side: usize) -> (usize, usize) {
    let y = if h > side { rng.random_range(0..=h - side) } else { 0 };
    let x = if w > side { rng.random_range(0..=w - side) } else { 0 };
    (y, x)
}

fn crop_side(cfg_crop: usize, h: usize, w: usize) -> usize {
    cfg_crop.min(h).min(w)
}

/// Draw one step's pretext pairs and real triples. All picks are uniform;
/// images from the same scene within an item share the crop window (the
/// monopoly premise needs pixel-aligned references). Deterministic given the
/// RNG state.
pub fn sample_step(
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Vec<PretextPair>, Vec<RealTriple>)> {
    if dataset.scenes.len() < 2 {
        return Err(Error::TooFewScenes {
            found: dataset.scenes.len(),
            needed: 2,
        });
    }
    let n_scenes = dataset.scenes.len();
    let mut pairs = Vec::with_capacity(cfg.batch_pairs);
    for _ in 0..cfg.batch_pairs {
        let scene = &dataset.scenes[rng.random_range(0..n_scenes)];
        let n = scene.frames.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (h, w) = (scene.frames[0].1.height(), scene.frames[0].1.width());
        let side = crop_side(cfg.crop, h, w);
        let (y0, x0) = crop_origin(rng, h, w, side);
        pairs.push(PretextPair {
            input: scene.frames[a].1.crop(y0, x0, side, side)?,
            reference: scene.frames[b].1.crop(y0, x0, side, side)?,
            scene: scene.scene_id.clone(),
            input_ev: scene.frames[a].0,
            ref_ev: scene.frames[b].0,
        });
    }

    let mut triples = Vec::with_capacity(cfg.batch_triples);
    for _ in 0..cfg.batch_triples {
        let input_idx = rng.random_range(0..n_scenes);
        let mut ref_idx = rng.random_range(0..n_scenes - 1);
        if ref_idx >= input_idx {
            ref_idx += 1;
        }
        let input_scene = &dataset.scenes[input_idx];
        let ref_scene = &dataset.scenes[ref_idx];
        let input_frame = rng.random_range(0..input_scene.frames.len());
        let nr = ref_scene.frames.len();
        let a = rng.random_range(0..nr);
        let mut b = rng.random_range(0..nr - 1);
        if b >= a {
            b += 1;
        }
        // frames are ev-sorted, so the larger index is the higher EV
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };

        let (ih, iw) = (
            input_scene.frames[0].1.height(),
            input_scene.frames[0].1.width(),
        );
        let iside = crop_side(cfg.crop, ih, iw);
        let (iy, ix) = crop_origin(rng, ih, iw, iside);
        let (rh, rw) = (ref_scene.frames[0].1.height(), ref_scene.frames[0].1.width());
        let rside = crop_side(cfg.crop, rh, rw);
        let (ry, rx) = crop_origin(rng, rh, rw, rside);

        triples.push(RealTriple {
            input: input_scene.frames[input_frame].1.crop(iy, ix, iside, iside)?,
            ref_hi: ref_scene.frames[hi].1.crop(ry, rx, rside, rside)?,
            ref_lo: ref_scene.frames[lo].1.crop(ry, rx, rside, rside)?,
            input_scene: input_scene.scene_id.clone(),
            ref_scene: ref_scene.scene_id.clone(),
            input_ev: input_scene.frames[input_frame].0,
            ev_hi: ref_scene.frames[hi].0,
            ev_lo: ref_scene.frames[lo].0,
        });
    }
    Ok((pairs, triples))
}

// ── Losses ────────────────────────────────────────────────────────────
//
// Plain f64 versions mirror the tape versions; the norm notation is read as
// mean of squares over C*H*W.

pub fn loss_restoration(out: &ImageF32, reference: &ImageF32) -> Result<f64> {
    if (out.height(), out.width()) != (reference.height(), reference.width()) {
        return Err(Error::ShapeMismatch {
            op: "loss_restoration",
            what: "image dimensions",
            expected: format!("{}x{}", out.height(), out.width()),
            got: format!("{}x{}", reference.height(), reference.width()),
        });
    }
    let sum: f64 = out
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(sum / out.data().len() as f64)
}

/// Mean positive part of (out_lo - out_hi); zero iff the higher-EV-reference
/// output dominates everywhere.
pub fn loss_monopoly(out_hi: &ImageF32, out_lo: &ImageF32) -> Result<f64> {
    if (out_hi.height(), out_hi.width()) != (out_lo.height(), out_lo.width()) {
        return Err(Error::ShapeMismatch {
            op: "loss_monopoly",
            what: "image dimensions",
            expected: format!("{}x{}", out_hi.height(), out_hi.width()),
            got: format!("{}x{}", out_lo.height(), out_lo.width()),
        });
    }
    let sum: f64 = out_hi
        .data()
        .iter()
        .zip(out_lo.data())
        .map(|(&h, &l)| ((l - h) as f64).max(0.0))
        .sum();
    Ok(sum / out_hi.data().len() as f64)
}

/// Squared anisotropic total variation: mean over C*H*W of dx^2 + dy^2 with
/// forward differences, zero-padded at the last row/column.
pub fn loss_semantic(img: &ImageF32) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h < 2 && w < 2 {
        return Err(Error::ImageTooSmall {
            op: "loss_semantic",
            height: h,
            width: w,
        });
    }
    let mut sum = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.get(y, x, c) as f64;
                if x + 1 < w {
                    sum += (img.get(y, x + 1, c) as f64 - v).powi(2);
                }
                if y + 1 < h {
                    sum += (img.get(y + 1, x, c) as f64 - v).powi(2);
                }
            }
        }
    }
    Ok(sum / (3 * h * w) as f64)
}

pub fn total_loss(parts: (f64, f64, f64), alphas: (f32, f32, f32)) -> f64 {
    alphas.0 as f64 * parts.0 + alphas.1 as f64 * parts.1 + alphas.2 as f64 * parts.2
}

// Tape versions used inside the training graph.

pub fn tape_loss_restoration(tape: &mut Tape, out: TensorId, target: TensorId) -> Result<TensorId> {
    let d = tape.sub(out, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

pub fn tape_loss_monopoly(tape: &mut Tape, out_hi: TensorId, out_lo: TensorId) -> Result<TensorId> {
    let d = tape.sub(out_lo, out_hi)?;
    let r = tape.relu(d);
    Ok(tape.mean_all(r))
}

pub fn tape_loss_semantic(tape: &mut Tape, out: TensorId) -> Result<TensorId> {
    let dx = tape.diff_x(out)?;
    let dy = tape.diff_y(out)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let s = tape.add(dx2, dy2)?;
    Ok(tape.mean_all(s))
}

// ── Step graph ────────────────────────────────────────────────────────

pub struct StepLosses {
    pub restoration: TensorId,
    pub monopoly: TensorId,
    pub semantic: TensorId,
    pub total: TensorId,
}

fn mean_of(tape: &mut Tape, items: &[TensorId]) -> Result<TensorId> {
    let mut acc = items[0];
    for &it in &items[1..] {
        acc = tape.add(acc, it)?;
    }
    Ok(tape.affine_const(acc, 1.0 / items.len() as f32, 0.0))
}

/// Build the full forward graph for one optimizer step: restoration over the
/// pretext branch, monopoly over the real branch, semantic over every
/// generated output, combined with the configured weights.
pub fn build_step_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    pairs: &[PretextPair],
    triples: &[RealTriple],
    alphas: (f32, f32, f32),
) -> Result<StepLosses> {
    assert!(!pairs.is_empty() && !triples.is_empty());
    let mut restoration_items = Vec::with_capacity(pairs.len());
    let mut monopoly_items = Vec::with_capacity(triples.len());
    let mut semantic_items = Vec::with_capacity(pairs.len() + 2 * triples.len());

    for pair in pairs {
        let (h, w) = (pair.input.height(), pair.input.width());
        let x = tape.leaf(vec![3, h, w], pair.input.to_chw(), false);
        let target = tape.leaf(vec![3, h, w], pair.reference.to_chw(), false);
        let e_in = tape_encode(tape, bound, x)?;
        let e_ref = tape_encode(tape, bound, target)?;
        let delta = tape_predict_delta(tape, bound, e_in, e_ref)?;
        let lambdas = tape_predict_lambdas(tape, bound, delta)?;
        let out = tape_correct(tape, bound, x, lambdas)?;
        restoration_items.push(tape_loss_restoration(tape, out, target)?);
        semantic_items.push(tape_loss_semantic(tape, out)?);
    }

    for triple in triples {
        let (h, w) = (triple.input.height(), triple.input.width());
        let (rh, rw) = (triple.ref_hi.height(), triple.ref_hi.width());
        let x = tape.leaf(vec![3, h, w], triple.input.to_chw(), false);
        let hi = tape.leaf(vec![3, rh, rw], triple.ref_hi.to_chw(), false);
        let lo = tape.leaf(vec![3, rh, rw], triple.ref_lo.to_chw(), false);
        let e_in = tape_encode(tape, bound, x)?;
        let e_hi = tape_encode(tape, bound, hi)?;
        let e_lo = tape_encode(tape, bound, lo)?;
        let delta_hi = tape_predict_delta(tape, bound, e_in, e_hi)?;
        let delta_lo = tape_predict_delta(tape, bound, e_in, e_lo)?;
        let lam_hi = tape_predict_lambdas(tape, bound, delta_hi)?;
        let lam_lo = tape_predict_lambdas(tape, bound, delta_lo)?;
        let out_hi = tape_correct(tape, bound, x, lam_hi)?;
        let out_lo = tape_correct(tape, bound, x, lam_lo)?;
        monopoly_items.push(tape_loss_monopoly(tape, out_hi, out_lo)?);
        semantic_items.push(tape_loss_semantic(tape, out_hi)?);
        semantic_items.push(tape_loss_semantic(tape, out_lo)?);
    }

    let restoration = mean_of(tape, &restoration_items)?;
    let monopoly = mean_of(tape, &monopoly_items)?;
    let semantic = mean_of(tape, &semantic_items)?;
    let wr = tape.affine_const(restoration, alphas.0, 0.0);
    let wm = tape.affine_const(monopoly, alphas.1, 0.0);
    let ws = tape.affine_const(semantic, alphas.2, 0.0);
    let rm = tape.add(wr, wm)?;
    let total = tape.add(rm, ws)?;
    Ok(StepLosses {
        restoration,
        monopoly,
        semantic,
        total,
    })
}

// ── Adam ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Completed optimizer steps.
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &UecModel) -> Self {
        Self {
            step: 0,
            m: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            v: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected).
/// `grads` is aligned with `ARCH`; a missing entry is an error naming the
/// parameter.
pub fn adam_step(
    model: &mut UecModel,
    grads: &[Option<&[f32]>],
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = (1.0 - (ADAM_BETA1 as f64).powf(t)) as f32;
    let bc2 = (1.0 - (ADAM_BETA2 as f64).powf(t)) as f32;
    for (i, spec) in ARCH.iter().enumerate() {
        let g = grads[i].ok_or_else(|| Error::MissingGradient {
            name: spec.name.to_string(),
        })?;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = model.param_mut(i);
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── Training loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_rest: f64,
    pub l_mono: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Metrics log path; defaults to `<out>.metrics.jsonl`.
    pub log: Option<PathBuf>,
    /// Resume from this checkpoint and its `<path>.state` sidecar.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub last_record: Option<StepRecord>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_os_string();
    os.push(".state");
    PathBuf::from(os)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stateless per-step sampling seed: resuming at step k replays exactly the
/// batches an uninterrupted run would have drawn.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step.wrapping_add(1))))
}

fn batch_diagnostics(pairs: &[PretextPair], triples: &[RealTriple]) -> String {
    let mut parts = Vec::new();
    for p in pairs {
        parts.push(format!("pair({} ev{:+.2}->ev{:+.2})", p.scene, p.input_ev, p.ref_ev));
    }
    for t in triples {
        parts.push(format!(
            "triple({} ev{:+.2} vs {} ev{:+.2}/ev{:+.2})",
            t.input_scene, t.input_ev, t.ref_scene, t.ev_hi, t.ev_lo
        ));
    }
    parts.join(", ")
}

/// Run (or resume) training, writing checkpoints on the configured schedule
/// plus a final one, and appending one JSON line of loss components per step.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.scenes.len() < 2 {
        return Err(Error::TooFewScenes {
            found: dataset.scenes.len(),
            needed: 2,
        });
    }

    let (mut model, mut adam) = match &opts.resume {
        Some(path) => {
            let model = checkpoint::load_model(path)?;
            let state = checkpoint::load_train_state(&state_path(path))?;
            (model, state)
        }
        None => {
            let model = UecModel::init(cfg.seed);
            let state = AdamState::new(&model);
            (model, state)
        }
    };
    if adam.step >= cfg.steps {
        return Err(Error::InvalidConfig {
            reason: format!(
                "resume checkpoint is already at step {} >= steps {}",
                adam.step, cfg.steps
            ),
        });
    }

    let log_path = opts
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", opts.out.display())));
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;

    let start_step = adam.step;
    let mut last_record = None;
    for step in start_step..cfg.steps {
        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, step);
        let (pairs, triples) = sample_step(dataset, &mut rng, cfg)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let losses = build_step_graph(
            &mut tape,
            &bound,
            &pairs,
            &triples,
            (cfg.alpha1, cfg.alpha2, cfg.alpha3),
        )?;
        let total = tape.value(losses.total);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: batch_diagnostics(&pairs, &triples),
            });
        }
        tape.backward(losses.total)?;

        let record = StepRecord {
            step,
            l_rest: tape.value(losses.restoration) as f64,
            l_mono: tape.value(losses.monopoly) as f64,
            l_sem: tape.value(losses.semantic) as f64,
            l_total: total as f64,
            wall_ms: 0.0, // filled after the update below
        };

        let grads: Vec<Option<&[f32]>> = bound.ids.iter().map(|&id| tape.grad(id)).collect();
        adam_step(&mut model, &grads, &mut adam, cfg.lr)?;

        let record = StepRecord {
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            ..record
        };
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")
            .map_err(|e| Error::io("writing metrics log", e))?;
        last_record = Some(record);

        let done = adam.step;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            checkpoint::save_model(&model, &opts.out)?;
            checkpoint::save_train_state(&adam, &state_path(&opts.out))?;
        }
    }
    checkpoint::save_model(&model, &opts.out)?;
    checkpoint::save_train_state(&adam, &state_path(&opts.out))?;

    Ok(TrainSummary {
        steps_run: cfg.steps - start_step,
        final_step: adam.step,
        last_record,
        checkpoint: opts.out.clone(),
        metrics_log: log_path,
    })
}
