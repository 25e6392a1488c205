//! Emulated-ISP synthesis of multi-exposure sequences from well-exposed sRGB
//! images: inverse EOTF, linear-light gain by 2^EV, hard clip, re-encode.
//!
//! Channels are treated independently and nothing but radiometry changes, so
//! for any two frames of one scene the higher-EV frame dominates the lower
//! one pixelwise (exactly in float form, within 1/255 after 8-bit I/O).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageF32;

/// Default EV grid for dataset synthesis.
pub const DEFAULT_EV_GRID: [f32; 6] = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

/// Maximum jitter applied per non-reference EV when enabled, in stops.
pub const EV_JITTER: f32 = 0.25;

// ── Transfer functions (IEC 61966-2-1 piecewise sRGB) ────────────────

pub fn srgb_value_to_linear(v: f32) -> f32 {
    let v = v as f64;
    let lin = if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    };
    lin.clamp(0.0, 1.0) as f32
}

pub fn linear_value_to_srgb(v: f32) -> f32 {
    let v = v as f64;
    let enc = if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    enc.clamp(0.0, 1.0) as f32
}

pub fn srgb_to_linear(img: &ImageF32) -> ImageF32 {
    let data = img.data().iter().map(|&v| srgb_value_to_linear(v)).collect();
    ImageF32::from_clamped(img.height(), img.width(), data)
}

pub fn linear_to_srgb(img: &ImageF32) -> ImageF32 {
    let data = img.data().iter().map(|&v| linear_value_to_srgb(v)).collect();
    ImageF32::from_clamped(img.height(), img.width(), data)
}

/// Linear-light exposure gain: clip(v * 2^ev, 0, 1). Highlights clip hard;
/// there is no soft knee.
pub fn apply_ev(img: &ImageF32, ev: f32) -> Result<ImageF32> {
    if !(-5.0..=5.0).contains(&ev) {
        return Err(Error::OutOfRange {
            what: "ev".into(),
            value: ev as f64,
            expected: "[-5, +5] stops",
        });
    }
    let gain = (ev as f64).exp2() as f32;
    let data = img
        .data()
        .iter()
        .map(|&v| (v * gain).clamp(0.0, 1.0))
        .collect();
    Ok(ImageF32::from_clamped(img.height(), img.width(), data))
}

// ── Sequences ─────────────────────────────────────────────────────────

/// One scene rendered at several exposures, frames sorted ascending by EV.
#[derive(Debug, Clone)]
pub struct ExposureSequence {
    pub scene_id: String,
    pub frames: Vec<(f32, ImageF32)>,
    pub gt_index: usize,
}

impl ExposureSequence {
    pub fn gt(&self) -> &ImageF32 {
        &self.frames[self.gt_index].1
    }
}

/// Render `gt` at every EV of the grid. The grid must contain 0 (the
/// ground-truth exposure); frames come out sorted by EV.
pub fn synth_sequence(scene_id: &str, gt: &ImageF32, ev_grid: &[f32]) -> Result<ExposureSequence> {
    if ev_grid.is_empty() {
        return Err(Error::InvalidEvGrid {
            reason: "empty grid".into(),
        });
    }
    if !ev_grid.iter().any(|&e| e == 0.0) {
        return Err(Error::InvalidEvGrid {
            reason: "grid must contain 0".into(),
        });
    }
    let mut evs = ev_grid.to_vec();
    evs.sort_by(f32::total_cmp);
    evs.dedup();

    let linear = srgb_to_linear(gt);
    let mut frames = Vec::with_capacity(evs.len());
    for &ev in &evs {
        let exposed = apply_ev(&linear, ev)?;
        frames.push((ev, linear_to_srgb(&exposed)));
    }
    let gt_index = evs.iter().position(|&e| e == 0.0).expect("grid contains 0");
    Ok(ExposureSequence {
        scene_id: scene_id.to_string(),
        frames,
        gt_index,
    })
}

/// Pixelwise EV-ordering check over all adjacent frame pairs.
#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub pairs_checked: usize,
    pub violating_pixels: usize,
    pub max_violation: f32,
    pub slack: f32,
    pub passed: bool,
}

/// Verify that every higher-EV frame dominates every lower-EV frame
/// pixelwise, up to `slack` (0 for float-form sequences, 1/255 after 8-bit
/// quantization).
pub fn verify_monotonicity(seq: &ExposureSequence, slack: f32) -> MonotonicityReport {
    let mut violating = 0usize;
    let mut max_violation = 0.0f32;
    let mut pairs = 0usize;
    for pair in seq.frames.windows(2) {
        let (lo, hi) = (&pair[0].1, &pair[1].1);
        pairs += 1;
        for (&l, &h) in lo.data().iter().zip(hi.data()) {
            let violation = l - h;
            if violation > max_violation {
                max_violation = violation;
            }
            if violation > slack + 1e-6 {
                violating += 1;
            }
        }
    }
    MonotonicityReport {
        pairs_checked: pairs,
        violating_pixels: violating,
        max_violation,
        slack,
        passed: violating == 0,
    }
}

// ── Dataset synthesis ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub ev_grid: Vec<f32>,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            ev_grid: DEFAULT_EV_GRID.to_vec(),
            jitter: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub ev: f32,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub scene_id: String,
    pub gt_ev: f32,
    pub evs: Vec<f32>,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub ev_grid: Vec<f32>,
    pub jitter: bool,
    pub scenes: Vec<ManifestScene>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.scenes.is_empty() {
            return Err(Error::Manifest("manifest lists no scenes".into()));
        }
        Ok(m)
    }
}

pub fn ev_label(ev: f32) -> String {
    format!("ev{:+.2}", ev)
}

fn scene_rng(seed: u64, scene_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(scene_id.as_bytes());
    let digest = hasher.finalize();
    let mut s = [0u8; 8];
    s.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(s))
}

/// Jittered copy of the grid: every non-reference EV moves by up to
/// +/-0.25 stop; the 0 EV frame stays exact so the ground truth is preserved.
fn jittered_grid(grid: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
    grid.iter()
        .map(|&ev| {
            if ev == 0.0 {
                0.0
            } else {
                (ev + rng.random_range(-EV_JITTER..EV_JITTER)).clamp(-5.0, 5.0)
            }
        })
        .collect()
}

/// Synthesize a multi-exposure dataset from every decodable PNG/PPM under
/// `input_dir` (non-recursive), writing
/// `<output_dir>/<scene_id>/ev{+d.dd|-d.dd}.png` frames plus
/// `<output_dir>/manifest.json`. Unreadable files are skipped with a warning.
pub fn synth_dataset(input_dir: &Path, output_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    let entries = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(format!("reading {}", input_dir.display()), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::io(format!("creating {}", output_dir.display()), e))?;

    let mut seen = BTreeSet::new();
    let mut scenes = Vec::new();
    for file in &files {
        let scene_id = match file.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if !seen.insert(scene_id.clone()) {
            eprintln!("warning: duplicate scene id '{scene_id}', skipping {}", file.display());
            continue;
        }
        let gt = match ImageF32::load(file) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", file.display());
                continue;
            }
        };
        let grid = if opts.jitter {
            jittered_grid(&opts.ev_grid, &mut scene_rng(opts.seed, &scene_id))
        } else {
            opts.ev_grid.clone()
        };
        let seq = synth_sequence(&scene_id, &gt, &grid)?;

        let scene_dir = output_dir.join(&scene_id);
        std::fs::create_dir_all(&scene_dir)
            .map_err(|e| Error::io(format!("creating {}", scene_dir.display()), e))?;
        let mut frames = Vec::with_capacity(seq.frames.len());
        for (ev, img) in &seq.frames {
            let name = format!("{}.png", ev_label(*ev));
            let rel = format!("{}/{}", scene_id, name);
            let bytes = img.encode_png()?;
            let digest = Sha256::digest(&bytes);
            std::fs::write(scene_dir.join(&name), &bytes)
                .map_err(|e| Error::io(format!("writing {rel}"), e))?;
            frames.push(ManifestFrame {
                ev: *ev,
                path: rel,
                sha256: format!("{digest:x}"),
            });
        }
        scenes.push(ManifestScene {
            scene_id,
            gt_ev: 0.0,
            evs: seq.frames.iter().map(|(ev, _)| *ev).collect(),
            frames,
        });
    }

    if scenes.is_empty() {
        return Err(Error::EmptyInput {
            dir: input_dir.to_path_buf(),
        });
    }
    let manifest = Manifest {
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        ev_grid: opts.ev_grid.clone(),
        jitter: opts.jitter,
        scenes,
    };
    manifest.save(&output_dir.join("manifest.json"))?;
    Ok(manifest)
}
