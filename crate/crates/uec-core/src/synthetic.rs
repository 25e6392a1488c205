//! Procedural test imagery: smooth multi-frequency fields with a few
//! soft-edged shapes, kept mid-exposed so EV shifts in both directions stay
//! informative. Used by the test suites and the benchmark input.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::image::ImageF32;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    gain: f64,
}

/// Deterministic "well-exposed photograph" stand-in.
pub fn test_scene(height: usize, width: usize, seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fy: rng.random_range(0.5..4.0),
            fx: rng.random_range(0.5..4.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: rng.random_range(0.2..1.0),
        })
        .collect();
    let tints: Vec<f64> = (0..3).map(|_| rng.random_range(-0.08..0.08)).collect();
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            cy: rng.random_range(0.1..0.9),
            cx: rng.random_range(0.1..0.9),
            radius: rng.random_range(0.08..0.3),
            gain: rng.random_range(-0.35..0.35),
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.amp).sum();

    ImageF32::from_fn(height, width, |y, x, c| {
        let fy = (y as f64 + 0.5) / height as f64;
        let fx = (x as f64 + 0.5) / width as f64;
        let mut v = 0.0;
        for w in &waves {
            v += w.amp * (std::f64::consts::TAU * (w.fy * fy + w.fx * fx) + w.phase).sin();
        }
        // roughly [-1,1] -> mid-gray band
        let mut lum = 0.45 + 0.32 * (v / amp_total);
        for b in &blobs {
            let d = ((fy - b.cy).powi(2) + (fx - b.cx).powi(2)).sqrt();
            // sharp-ish soft edge so Sobel has something to find
            let t = 1.0 / (1.0 + ((d - b.radius) * 120.0).exp());
            lum += b.gain * t;
        }
        (lum + tints[c] * (1.0 - lum)).clamp(0.02, 0.98) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mid_exposed() {
        let a = test_scene(32, 48, 7);
        let b = test_scene(32, 48, 7);
        assert_eq!(a.data(), b.data());
        let lum = a.mean_luminance();
        assert!((0.2..=0.7).contains(&lum), "mean luminance {lum}");
        assert_ne!(a.data(), test_scene(32, 48, 8).data());
    }
}
