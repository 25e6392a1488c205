//! Quality metrics and the evaluation harness: PSNR, windowed SSIM, Sobel
//! edge maps binarized at the median magnitude, EV-sweep audits and the
//! single-thread latency benchmark.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageF32;
use crate::model::{ExposureFeature, UecModel};
use crate::synthetic::test_scene;
use crate::train::{Dataset, SceneFrames};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(op: &'static str, a: &ImageF32, b: &ImageF32) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op,
            what: "image dimensions",
            expected: format!("{}x{}", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        });
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio in dB for [0,1] images, capped at 99 dB.
pub fn psnr(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    check_dims("psnr", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(sum / a.data().len() as f64))
}

// ── SSIM ──────────────────────────────────────────────────────────────

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter over valid positions only: (H,W) plane in,
/// (H-10, W-10) plane out.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), K1 0.01,
/// K2 0.03, dynamic range 1, averaged over channels and valid positions.
pub fn ssim(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    check_dims("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            op: "ssim",
            height: h,
            width: w,
        });
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..3 {
        let hw = h * w;
        let mut xa = vec![0.0f64; hw];
        let mut xb = vec![0.0f64; hw];
        let mut xaa = vec![0.0f64; hw];
        let mut xbb = vec![0.0f64; hw];
        let mut xab = vec![0.0f64; hw];
        for y in 0..h {
            for x in 0..w {
                let va = a.get(y, x, c) as f64;
                let vb = b.get(y, x, c) as f64;
                let i = y * w + x;
                xa[i] = va;
                xb[i] = vb;
                xaa[i] = va * va;
                xbb[i] = vb * vb;
                xab[i] = va * vb;
            }
        }
        let mu_a = filter_valid(&xa, h, w, &kernel);
        let mu_b = filter_valid(&xb, h, w, &kernel);
        let e_aa = filter_valid(&xaa, h, w, &kernel);
        let e_bb = filter_valid(&xbb, h, w, &kernel);
        let e_ab = filter_valid(&xab, h, w, &kernel);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ── Edge metrics ──────────────────────────────────────────────────────

/// Binary edge mask with the source image's spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl EdgeMap {
    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sobel gradient magnitude of the channel-mean grayscale image, replicated
/// borders, computed in f64.
pub fn sobel_magnitude(img: &ImageF32) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let gray: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
        .collect();
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            mag[(y * w as isize + x) as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Binarize the Sobel magnitude at its median: strictly greater than the
/// median counts as edge, so a constant image yields an empty map.
pub fn edge_map(img: &ImageF32) -> Result<EdgeMap> {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return Err(Error::ImageTooSmall {
            op: "edge_map",
            height: h,
            width: w,
        });
    }
    let mag = sobel_magnitude(img);
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(EdgeMap {
        height: h,
        width: w,
        mask: mag.iter().map(|&m| m > median).collect(),
    })
}

/// Pixelwise F1 between two edge maps; two empty maps agree perfectly.
pub fn edge_f1(pred: &EdgeMap, gt: &EdgeMap) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op: "edge_f1",
            what: "map dimensions",
            expected: format!("{}x{}", gt.height, gt.width),
            got: format!("{}x{}", pred.height, pred.width),
        });
    }
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.mask.iter().zip(gt.mask.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    if tp + fp + fne == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fne as f64))
}

/// PSNR between the raw (pre-binarization) Sobel magnitude images.
pub fn edge_psnr(pred_src: &ImageF32, gt_src: &ImageF32) -> Result<f64> {
    check_dims("edge_psnr", pred_src, gt_src)?;
    let ma = sobel_magnitude(pred_src);
    let mb = sobel_magnitude(gt_src);
    let sum: f64 = ma.iter().zip(mb.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(psnr_from_mse(sum / ma.len() as f64))
}

// ── Evaluation harness ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSelection {
    pub psnr: bool,
    pub ssim: bool,
    pub edge: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            psnr: true,
            ssim: true,
            edge: true,
        }
    }
}

impl MetricSelection {
    /// Parse a comma-separated list like "psnr,ssim,edge".
    pub fn parse(spec: &str) -> Result<Self> {
        let mut sel = Self {
            psnr: false,
            ssim: false,
            edge: false,
        };
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "psnr" => sel.psnr = true,
                "ssim" => sel.ssim = true,
                "edge" => sel.edge = true,
                other => {
                    return Err(Error::UnknownMetric {
                        name: other.to_string(),
                    })
                }
            }
        }
        Ok(sel)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageScores {
    pub scene: String,
    pub ev: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AggregateScores {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvScores {
    pub ev: f32,
    #[serde(flatten)]
    pub scores: AggregateScores,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScores>,
    pub aggregate: AggregateScores,
    pub per_ev: Vec<EvScores>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = values.flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn aggregate(scores: &[&ImageScores]) -> AggregateScores {
    AggregateScores {
        count: scores.len(),
        psnr_db: mean_of(scores.iter().map(|s| s.psnr_db)),
        ssim: mean_of(scores.iter().map(|s| s.ssim)),
        edge_psnr_db: mean_of(scores.iter().map(|s| s.edge_psnr_db)),
        edge_f1: mean_of(scores.iter().map(|s| s.edge_f1)),
    }
}

fn score_pair(
    out: &ImageF32,
    gt: &ImageF32,
    scene: &str,
    ev: f32,
    sel: &MetricSelection,
) -> Result<ImageScores> {
    let mut s = ImageScores {
        scene: scene.to_string(),
        ev,
        psnr_db: None,
        ssim: None,
        edge_psnr_db: None,
        edge_f1: None,
    };
    if sel.psnr {
        s.psnr_db = Some(psnr(out, gt)?);
    }
    if sel.ssim {
        s.ssim = Some(ssim(out, gt)?);
    }
    if sel.edge {
        s.edge_psnr_db = Some(edge_psnr(out, gt)?);
        s.edge_f1 = Some(edge_f1(&edge_map(out)?, &edge_map(gt)?)?);
    }
    Ok(s)
}

fn report_from(per_image: Vec<ImageScores>) -> EvalReport {
    let refs: Vec<&ImageScores> = per_image.iter().collect();
    let agg = aggregate(&refs);
    let mut evs: Vec<f32> = per_image.iter().map(|s| s.ev).collect();
    evs.sort_by(f32::total_cmp);
    evs.dedup();
    let per_ev = evs
        .into_iter()
        .map(|ev| {
            let group: Vec<&ImageScores> = per_image.iter().filter(|s| s.ev == ev).collect();
            EvScores {
                ev,
                scores: aggregate(&group),
            }
        })
        .collect();
    EvalReport {
        per_image,
        aggregate: agg,
        per_ev,
    }
}

/// Correct every non-ground-truth frame with `correct_fn` and score it
/// against its scene's ground truth. Passing the identity closure scores the
/// uncorrected inputs, which is the baseline the training audit compares
/// against.
pub fn evaluate_dataset(
    correct_fn: &dyn Fn(&ImageF32) -> ImageF32,
    dataset: &Dataset,
    sel: &MetricSelection,
) -> Result<EvalReport> {
    let mut per_image = Vec::new();
    for scene in &dataset.scenes {
        let gt = &scene.frames[scene.gt_index].1;
        for (idx, (ev, frame)) in scene.frames.iter().enumerate() {
            if idx == scene.gt_index {
                continue;
            }
            let out = correct_fn(frame);
            per_image.push(score_pair(&out, gt, &scene.scene_id, *ev, sel)?);
        }
    }
    Ok(report_from(per_image))
}

/// Pretext-protocol evaluation: every non-GT frame is corrected against its
/// own scene's ground-truth frame (encoded once per scene) and scored
/// against that same ground truth. Shares the scoring path with
/// [`evaluate_dataset`], whose identity closure gives the uncorrected
/// baseline.
pub fn evaluate_with_gt_reference(
    model: &UecModel,
    dataset: &Dataset,
    sel: &MetricSelection,
) -> Result<EvalReport> {
    let mut per_image = Vec::new();
    for scene in &dataset.scenes {
        let gt = &scene.frames[scene.gt_index].1;
        let reference = model.encode(gt);
        for (idx, (ev, frame)) in scene.frames.iter().enumerate() {
            if idx == scene.gt_index {
                continue;
            }
            let out = model.apply(frame, &reference);
            per_image.push(score_pair(&out, gt, &scene.scene_id, *ev, sel)?);
        }
    }
    Ok(report_from(per_image))
}

// ── EV sweep audit ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub scene: String,
    pub input_ev: f32,
    pub ref_ev: f32,
    pub mean_luminance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepAudit {
    pub rows: Vec<SweepRow>,
    pub inputs_checked: usize,
    /// Fraction of inputs whose mean output luminance is non-decreasing in
    /// the reference EV (1e-6 slack).
    pub monotone_fraction: f64,
}

impl SweepAudit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,input_ev,ref_ev,mean_luminance,psnr_db,ssim,edge_f1\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.6},{},{},{}\n",
                r.scene,
                r.input_ev,
                r.ref_ev,
                r.mean_luminance,
                fmt(r.psnr_db),
                fmt(r.ssim),
                fmt(r.edge_f1),
            ));
        }
        out
    }
}

/// Apply the model to every test frame once per reference frame (references
/// ordered by EV) and audit how often output luminance tracks reference EV.
pub fn ev_sweep_audit(
    model: &UecModel,
    test_scenes: &[SceneFrames],
    ref_scene: &SceneFrames,
    sel: &MetricSelection,
) -> Result<SweepAudit> {
    let ref_features: Vec<(f32, ExposureFeature)> = ref_scene
        .frames
        .iter()
        .map(|(ev, img)| (*ev, model.encode(img)))
        .collect();

    let mut rows = Vec::new();
    let mut inputs = 0usize;
    let mut monotone = 0usize;
    for scene in test_scenes {
        let gt = &scene.frames[scene.gt_index].1;
        for (input_ev, frame) in &scene.frames {
            let e_in = model.encode(frame);
            let mut prev = f64::NEG_INFINITY;
            let mut ok = true;
            for (ref_ev, ref_feature) in &ref_features {
                let lambdas = model.predict_lambdas(model.predict_delta(&e_in, ref_feature));
                let out = model.correct(frame, lambdas);
                let lum = out.mean_luminance();
                if lum < prev - 1e-6 {
                    ok = false;
                }
                prev = lum;
                rows.push(SweepRow {
                    scene: scene.scene_id.clone(),
                    input_ev: *input_ev,
                    ref_ev: *ref_ev,
                    mean_luminance: lum,
                    psnr_db: if sel.psnr { Some(psnr(&out, gt)?) } else { None },
                    ssim: if sel.ssim { Some(ssim(&out, gt)?) } else { None },
                    edge_f1: if sel.edge {
                        Some(edge_f1(&edge_map(&out)?, &edge_map(gt)?)?)
                    } else {
                        None
                    },
                });
            }
            inputs += 1;
            if ok {
                monotone += 1;
            }
        }
    }
    Ok(SweepAudit {
        rows,
        inputs_checked: inputs,
        monotone_fraction: if inputs == 0 {
            1.0
        } else {
            monotone as f64 / inputs as f64
        },
    })
}

// ── Benchmark ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TimingStats {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub megapixels_per_second: f64,
}

/// Median / p95 wall time of `apply` with a pre-cached reference feature,
/// single-threaded, after 3 warmup runs. Image decode is outside the timed
/// region by construction.
pub fn bench_apply(
    model: &UecModel,
    height: usize,
    width: usize,
    iters: usize,
) -> Result<TimingStats> {
    if iters < 10 {
        return Err(Error::OutOfRange {
            what: "iters".into(),
            value: iters as f64,
            expected: ">= 10",
        });
    }
    let input = test_scene(height, width, 7);
    let reference = model.encode(&test_scene(256, 256, 8));
    for _ in 0..3 {
        std::hint::black_box(model.apply(&input, &reference));
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        std::hint::black_box(model.apply(&input, &reference));
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = times[times.len() / 2];
    let p95_ms = times[((times.len() as f64 * 0.95) as usize).min(times.len() - 1)];
    Ok(TimingStats {
        height,
        width,
        iters,
        median_ms,
        p95_ms,
        megapixels_per_second: (height * width) as f64 / 1e6 / (median_ms / 1e3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_known_values() {
        let a = test_scene(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        let base = ImageF32::constant(8, 8, 0.4).unwrap();
        let shifted = ImageF32::constant(8, 8, 0.4 + 1.0 / 255.0).unwrap();
        let p = psnr(&base, &shifted).unwrap();
        assert!((p - 20.0 * 255.0f64.log10()).abs() < 0.01, "{p}");

        let off = ImageF32::constant(8, 8, 0.5).unwrap();
        let p = psnr(&base, &off).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");

        let other = ImageF32::constant(8, 9, 0.4).unwrap();
        assert!(psnr(&base, &other).is_err());
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed_a in 0u64..500, seed_b in 0u64..500) {
            let a = test_scene(12, 12, seed_a);
            let b = test_scene(12, 12, seed_b);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_self_is_exactly_one_and_symmetric() {
        let a = test_scene(24, 24, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = test_scene(24, 24, 3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
        let tiny = test_scene(10, 24, 4);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_negated_pattern_scores_low() {
        let a = ImageF32::from_fn(24, 24, |y, x, _| if (y / 3 + x / 3) % 2 == 0 { 0.9 } else { 0.1 });
        let b = ImageF32::from_fn(24, 24, |y, x, c| 1.0 - a.get(y, x, c));
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.5, "{s}");
    }

    /// Direct per-window double-loop oracle, no separable filtering.
    fn ssim_oracle(a: &ImageF32, b: &ImageF32) -> f64 {
        let kernel = gaussian_kernel();
        let (h, w) = (a.height(), a.width());
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..3 {
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
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

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        for seed in 0..3 {
            let a = test_scene(32, 32, 100 + seed);
            let b = test_scene(32, 32, 200 + seed);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn edge_map_constant_step_and_median_property() {
        let flat = ImageF32::constant(9, 9, 0.5).unwrap();
        assert_eq!(edge_map(&flat).unwrap().edge_count(), 0);

        let step = ImageF32::from_fn(9, 9, |_, x, _| if x < 4 { 0.1 } else { 0.9 });
        let map = edge_map(&step).unwrap();
        // the response concentrates on the columns adjacent to the step
        for y in 0..9 {
            assert!(map.mask[y * 9 + 3] || map.mask[y * 9 + 4], "row {y}");
            assert!(!map.mask[y * 9], "row {y} left border");
            assert!(!map.mask[y * 9 + 8], "row {y} right border");
        }

        let noisy = test_scene(32, 32, 5);
        let map = edge_map(&noisy).unwrap();
        let frac = map.edge_count() as f64 / (32.0 * 32.0);
        assert!((frac - 0.5).abs() < 0.05, "edge fraction {frac}");

        assert!(edge_map(&ImageF32::constant(2, 9, 0.5).unwrap()).is_err());
    }

    #[test]
    fn edge_map_ignores_global_luminance_offsets() {
        let a = ImageF32::from_fn(16, 16, |y, x, _| {
            if (y / 4 + x / 4) % 2 == 0 { 0.2 } else { 0.6 }
        });
        let b = ImageF32::from_fn(16, 16, |y, x, c| a.get(y, x, c) + 0.15);
        assert_eq!(edge_map(&a).unwrap(), edge_map(&b).unwrap());
        assert_eq!(edge_psnr(&a, &b).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn edge_f1_cases() {
        let mk = |bits: &[usize]| EdgeMap {
            height: 4,
            width: 4,
            mask: (0..16).map(|i| bits.contains(&i)).collect(),
        };
        let a = mk(&[1, 2, 5, 9]);
        assert_eq!(edge_f1(&a, &a).unwrap(), 1.0);
        let disjoint = mk(&[0, 3, 7]);
        assert_eq!(edge_f1(&a, &disjoint).unwrap(), 0.0);
        let half = mk(&[1, 2]);
        let f1 = edge_f1(&half, &a).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "{f1}");
        assert_eq!(edge_f1(&mk(&[]), &mk(&[])).unwrap(), 1.0);
        let other = EdgeMap { height: 2, width: 8, mask: vec![false; 16] };
        assert!(edge_f1(&a, &other).is_err());
    }

    #[test]
    fn edge_psnr_matches_psnr_of_magnitudes() {
        let a = test_scene(16, 16, 7);
        let b = test_scene(16, 16, 8);
        assert_eq!(edge_psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let got = edge_psnr(&a, &b).unwrap();
        let ma = sobel_magnitude(&a);
        let mb = sobel_magnitude(&b);
        let mse: f64 =
            ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ma.len() as f64;
        assert!((got - psnr_from_mse(mse)).abs() < 1e-12);
    }

    #[test]
    fn metric_selection_parsing() {
        let sel = MetricSelection::parse("psnr,edge").unwrap();
        assert!(sel.psnr && sel.edge && !sel.ssim);
        assert!(MetricSelection::parse("psnr,blur").is_err());
    }

    #[test]
    fn evaluate_identity_on_gt_only_comparisons() {
        use crate::isp::synth_sequence;
        let seqs = (0..2)
            .map(|i| {
                synth_sequence(
                    &format!("s{i}"),
                    &test_scene(24, 24, 900 + i),
                    &[-1.0, 0.0, 1.0],
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::from_sequences(seqs);
        // identity "correction": inputs scored against GT directly
        let report = evaluate_dataset(&|img| img.clone(), &ds, &MetricSelection::default()).unwrap();
        assert_eq!(report.per_image.len(), 4);
        assert_eq!(report.per_ev.len(), 2);

        // aggregates are exactly the means of per-image values
        let mean: f64 = report
            .per_image
            .iter()
            .map(|s| s.psnr_db.unwrap())
            .sum::<f64>()
            / report.per_image.len() as f64;
        assert!((report.aggregate.psnr_db.unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn sweep_with_identity_model_is_trivially_monotone() {
        use crate::isp::synth_sequence;
        let model = UecModel::init(0);
        let seqs: Vec<_> = (0..3)
            .map(|i| {
                synth_sequence(
                    &format!("s{i}"),
                    &test_scene(24, 24, 700 + i),
                    &[-1.0, 0.0, 1.0],
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::from_sequences(seqs);
        let sel = MetricSelection {
            psnr: true,
            ssim: false,
            edge: false,
        };
        let audit = ev_sweep_audit(&model, &ds.scenes[1..], &ds.scenes[0], &sel).unwrap();
        assert_eq!(audit.monotone_fraction, 1.0);
        // one row per (input, reference EV) pair
        assert_eq!(audit.rows.len(), 2 * 3 * 3);
        let csv = audit.to_csv();
        assert!(csv.starts_with("scene,input_ev,ref_ev,mean_luminance,psnr_db,ssim,edge_f1"));
        assert_eq!(csv.lines().count(), 1 + audit.rows.len());
    }

    #[test]
    fn bench_rejects_low_iteration_counts() {
        let model = UecModel::init(0);
        assert!(bench_apply(&model, 32, 32, 5).is_err());
        let stats = bench_apply(&model, 32, 32, 10).unwrap();
        assert!(stats.median_ms > 0.0);
        assert!(stats.p95_ms >= stats.median_ms);
    }
}
