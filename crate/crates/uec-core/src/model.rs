//! The three-network exposure corrector: feature encoder, exposure-difference
//! predictor, and the iterative pixel-wise corrector.
//!
//! The corrector blends each pixel with a pointwise nonlinear transform,
//! `out = clip(lambda * x + (1 - lambda) * h(x))`, repeated for three stages
//! with per-stage lambda and per-stage h weights. Output pixel (y, x) depends
//! only on input pixel (y, x), so any resolution is accepted and the hot path
//! never resamples the input; only the encoder works on a thumbnail.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageF32;
use crate::tensor::{affine_raw, conv2d_raw, sigmoid_raw, stat_pool_raw, Tape, TensorId};

pub const FEATURE_LEN: usize = 96;
pub const THUMBNAIL_MAX_SIDE: usize = 256;
pub const CORRECTOR_STAGES: usize = 3;
pub const LAMBDA_LO: f32 = -1.0;
pub const LAMBDA_HI: f32 = 2.0;

/// Bias on the lambda head that makes the scaled sigmoid emit exactly 1 at
/// zero-initialized head weights: logit((1 - lo) / (hi - lo)).
pub fn lambda_identity_bias() -> f32 {
    let p = (1.0 - LAMBDA_LO as f64) / ((LAMBDA_HI - LAMBDA_LO) as f64);
    (p / (1.0 - p)).ln() as f32
}

/// 96-component exposure descriptor: per encoder channel (32 of them) the
/// global max, mean and standard deviation of its activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureFeature {
    values: Vec<f32>,
}

impl ExposureFeature {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != FEATURE_LEN {
            return Err(Error::ShapeMismatch {
                op: "ExposureFeature::new",
                what: "length",
                expected: FEATURE_LEN.to_string(),
                got: values.len().to_string(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::OutOfRange {
                    what: format!("feature component {i}"),
                    value: v as f64,
                    expected: "finite",
                });
            }
            // last third holds standard deviations
            if i >= 2 * FEATURE_LEN / 3 && v < 0.0 {
                return Err(Error::OutOfRange {
                    what: format!("std feature component {i}"),
                    value: v as f64,
                    expected: ">= 0",
                });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Fixed parameter layout. Names are the checkpoint tensor names.
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: &'static [usize],
}

pub const ARCH: [ParamSpec; 24] = [
    ParamSpec { name: "encoder.conv1.weight", shape: &[16, 3, 3, 3] },
    ParamSpec { name: "encoder.conv1.bias", shape: &[16] },
    ParamSpec { name: "encoder.conv2.weight", shape: &[32, 16, 3, 3] },
    ParamSpec { name: "encoder.conv2.bias", shape: &[32] },
    ParamSpec { name: "predictor.diff.weight", shape: &[32, 96] },
    ParamSpec { name: "predictor.diff.bias", shape: &[32] },
    ParamSpec { name: "predictor.head.weight", shape: &[1, 32] },
    ParamSpec { name: "predictor.head.bias", shape: &[1] },
    ParamSpec { name: "predictor.lambda_hidden.weight", shape: &[16, 1] },
    ParamSpec { name: "predictor.lambda_hidden.bias", shape: &[16] },
    ParamSpec { name: "predictor.lambda_out.weight", shape: &[3, 16] },
    ParamSpec { name: "predictor.lambda_out.bias", shape: &[3] },
    ParamSpec { name: "corrector.stage1.expand.weight", shape: &[8, 3, 1, 1] },
    ParamSpec { name: "corrector.stage1.expand.bias", shape: &[8] },
    ParamSpec { name: "corrector.stage1.project.weight", shape: &[3, 8, 1, 1] },
    ParamSpec { name: "corrector.stage1.project.bias", shape: &[3] },
    ParamSpec { name: "corrector.stage2.expand.weight", shape: &[8, 3, 1, 1] },
    ParamSpec { name: "corrector.stage2.expand.bias", shape: &[8] },
    ParamSpec { name: "corrector.stage2.project.weight", shape: &[3, 8, 1, 1] },
    ParamSpec { name: "corrector.stage2.project.bias", shape: &[3] },
    ParamSpec { name: "corrector.stage3.expand.weight", shape: &[8, 3, 1, 1] },
    ParamSpec { name: "corrector.stage3.expand.bias", shape: &[8] },
    ParamSpec { name: "corrector.stage3.project.weight", shape: &[3, 8, 1, 1] },
    ParamSpec { name: "corrector.stage3.project.bias", shape: &[3] },
];

pub const P_ENC1_W: usize = 0;
pub const P_ENC1_B: usize = 1;
pub const P_ENC2_W: usize = 2;
pub const P_ENC2_B: usize = 3;
pub const P_DIFF_W: usize = 4;
pub const P_DIFF_B: usize = 5;
pub const P_HEAD_W: usize = 6;
pub const P_HEAD_B: usize = 7;
pub const P_LAM_HID_W: usize = 8;
pub const P_LAM_HID_B: usize = 9;
pub const P_LAM_OUT_W: usize = 10;
pub const P_LAM_OUT_B: usize = 11;

pub const fn stage_param(stage: usize, which: usize) -> usize {
    12 + stage * 4 + which
}

pub fn count_params<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> usize {
    shapes
        .into_iter()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

/// All learnable parameters, stored in `ARCH` order.
#[derive(Debug, Clone, PartialEq)]
pub struct UecModel {
    pub version: u32,
    params: Vec<Vec<f32>>,
}

impl UecModel {
    /// Initialize for training: uniform Xavier weights with zero biases,
    /// except the lambda head, whose weights start at zero and whose bias
    /// makes every lambda exactly 1 — the untrained model is the identity.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(ARCH.len());
        for (i, spec) in ARCH.iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let data = if i == P_LAM_OUT_W {
                vec![0.0; n]
            } else if i == P_LAM_OUT_B {
                vec![lambda_identity_bias(); n]
            } else if spec.shape.len() == 1 {
                vec![0.0; n]
            } else {
                let (fan_in, fan_out) = match spec.shape.len() {
                    4 => (
                        spec.shape[1] * spec.shape[2] * spec.shape[3],
                        spec.shape[0] * spec.shape[2] * spec.shape[3],
                    ),
                    _ => (spec.shape[1], spec.shape[0]),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            params.push(data);
        }
        Self { version: 1, params }
    }

    /// Construct from raw per-tensor buffers in `ARCH` order.
    pub fn from_params(version: u32, params: Vec<Vec<f32>>) -> Result<Self> {
        if params.len() != ARCH.len() {
            return Err(Error::Checkpoint {
                field: "tensor count".into(),
                reason: format!("expected {}, got {}", ARCH.len(), params.len()),
            });
        }
        for (spec, data) in ARCH.iter().zip(params.iter()) {
            let n: usize = spec.shape.iter().product();
            if data.len() != n {
                return Err(Error::Checkpoint {
                    field: format!("tensor '{}'", spec.name),
                    reason: format!("expected {} values, got {}", n, data.len()),
                });
            }
        }
        Ok(Self { version, params })
    }

    pub fn param(&self, idx: usize) -> &[f32] {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.params[idx]
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        count_params(ARCH.iter().map(|s| s.shape))
    }

    // ── Inference (frozen parameters, pure) ──────────────────────────

    /// Downscale to the 256-longest-side thumbnail, run the two stride-2
    /// convolutions, and pool per-channel (max, mean, std) into 96 values.
    pub fn encode(&self, img: &ImageF32) -> ExposureFeature {
        let thumb = img.resize_max_side(THUMBNAIL_MAX_SIDE);
        let (h, w) = (thumb.height(), thumb.width());
        let x = thumb.to_chw();
        let mut a1 = conv2d_raw(
            &x,
            (3, h, w),
            self.param(P_ENC1_W),
            (16, 3),
            self.param(P_ENC1_B),
            2,
            1,
        );
        for v in &mut a1 {
            *v = v.max(0.0);
        }
        let (h1, w1) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
        let mut a2 = conv2d_raw(
            &a1,
            (16, h1, w1),
            self.param(P_ENC2_W),
            (32, 3),
            self.param(P_ENC2_B),
            2,
            1,
        );
        for v in &mut a2 {
            *v = v.max(0.0);
        }
        let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
        let (pooled, _, _, _) = stat_pool_raw(&a2, 32, h2 * w2);
        ExposureFeature::new(pooled).expect("pooled stats are finite with non-negative std")
    }

    /// Scalar exposure-difference code from two features (reference minus
    /// input through a small MLP). Antisymmetry is learned, not guaranteed.
    pub fn predict_delta(&self, e_in: &ExposureFeature, e_ref: &ExposureFeature) -> f32 {
        let diff: Vec<f32> = e_ref
            .values()
            .iter()
            .zip(e_in.values().iter())
            .map(|(&r, &i)| r - i)
            .collect();
        let mut hidden = affine_raw(
            &diff,
            self.param(P_DIFF_W),
            self.param(P_DIFF_B),
            32,
            FEATURE_LEN,
        );
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        affine_raw(&hidden, self.param(P_HEAD_W), self.param(P_HEAD_B), 1, 32)[0]
    }

    /// Per-stage blend coefficients, each in (LAMBDA_LO, LAMBDA_HI).
    pub fn predict_lambdas(&self, delta: f32) -> [f32; CORRECTOR_STAGES] {
        let mut hidden = affine_raw(
            &[delta],
            self.param(P_LAM_HID_W),
            self.param(P_LAM_HID_B),
            16,
            1,
        );
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        let m = affine_raw(
            &hidden,
            self.param(P_LAM_OUT_W),
            self.param(P_LAM_OUT_B),
            CORRECTOR_STAGES,
            16,
        );
        let mut lambdas = [0.0f32; CORRECTOR_STAGES];
        for (l, &mi) in lambdas.iter_mut().zip(m.iter()) {
            *l = (LAMBDA_HI - LAMBDA_LO) * sigmoid_raw(mi) + LAMBDA_LO;
        }
        lambdas
    }

    /// Three blended pointwise stages at native resolution. Strictly
    /// per-pixel: commutes bit-exactly with any crop.
    pub fn correct(&self, img: &ImageF32, lambdas: [f32; CORRECTOR_STAGES]) -> ImageF32 {
        let mut px = img.data().to_vec();
        for stage in 0..CORRECTOR_STAGES {
            let w1 = self.param(stage_param(stage, 0));
            let b1 = self.param(stage_param(stage, 1));
            let w2 = self.param(stage_param(stage, 2));
            let b2 = self.param(stage_param(stage, 3));
            let lambda = lambdas[stage];
            let one_minus = -lambda + 1.0;
            for p in px.chunks_exact_mut(3) {
                let mut hidden = [0.0f32; 8];
                for (o, hv) in hidden.iter_mut().enumerate() {
                    let mut acc = b1[o];
                    acc += p[0] * w1[o * 3];
                    acc += p[1] * w1[o * 3 + 1];
                    acc += p[2] * w1[o * 3 + 2];
                    *hv = acc.max(0.0);
                }
                for (c, pv) in p.iter_mut().enumerate() {
                    let mut acc = b2[c];
                    for (j, hv) in hidden.iter().enumerate() {
                        acc += hv * w2[c * 8 + j];
                    }
                    *pv = (lambda * *pv + one_minus * acc).clamp(0.0, 1.0);
                }
            }
        }
        ImageF32::from_clamped(img.height(), img.width(), px)
    }

    /// End-to-end single-reference correction: encode the input thumbnail,
    /// compare against the cached reference feature, and run the corrector
    /// at native resolution.
    pub fn apply(&self, img: &ImageF32, reference: &ExposureFeature) -> ImageF32 {
        let e_in = self.encode(img);
        let delta = self.predict_delta(&e_in, reference);
        let lambdas = self.predict_lambdas(delta);
        self.correct(img, lambdas)
    }
}

pub(crate) fn conv_out(dim: usize, k: usize, stride: usize, padding: usize) -> usize {
    (dim + 2 * padding - k) / stride + 1
}

// ── Tape builders (training path) ────────────────────────────────────

/// Model parameters mirrored onto a tape as gradient-tracked leaves,
/// aligned with `ARCH`.
pub struct BoundModel {
    pub ids: Vec<TensorId>,
}

impl UecModel {
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let ids = ARCH
            .iter()
            .zip(self.params.iter())
            .map(|(spec, data)| tape.leaf(spec.shape.to_vec(), data.clone(), true))
            .collect();
        BoundModel { ids }
    }
}

/// Encoder forward on a [3,H,W] tensor (already thumbnail-sized in training,
/// where crops never exceed the thumbnail limit).
pub fn tape_encode(tape: &mut Tape, bm: &BoundModel, img: TensorId) -> Result<TensorId> {
    let c1 = tape.conv2d(img, bm.ids[P_ENC1_W], bm.ids[P_ENC1_B], 2, 1)?;
    let r1 = tape.relu(c1);
    let c2 = tape.conv2d(r1, bm.ids[P_ENC2_W], bm.ids[P_ENC2_B], 2, 1)?;
    let r2 = tape.relu(c2);
    tape.global_stat_pool(r2)
}

pub fn tape_predict_delta(
    tape: &mut Tape,
    bm: &BoundModel,
    e_in: TensorId,
    e_ref: TensorId,
) -> Result<TensorId> {
    let diff = tape.sub(e_ref, e_in)?;
    let hidden = tape.affine(diff, bm.ids[P_DIFF_W], bm.ids[P_DIFF_B])?;
    let act = tape.relu(hidden);
    tape.affine(act, bm.ids[P_HEAD_W], bm.ids[P_HEAD_B])
}

pub fn tape_predict_lambdas(tape: &mut Tape, bm: &BoundModel, delta: TensorId) -> Result<TensorId> {
    let hidden = tape.affine(delta, bm.ids[P_LAM_HID_W], bm.ids[P_LAM_HID_B])?;
    let act = tape.relu(hidden);
    let m = tape.affine(act, bm.ids[P_LAM_OUT_W], bm.ids[P_LAM_OUT_B])?;
    let s = tape.sigmoid(m);
    Ok(tape.affine_const(s, LAMBDA_HI - LAMBDA_LO, LAMBDA_LO))
}

pub fn tape_correct(
    tape: &mut Tape,
    bm: &BoundModel,
    img: TensorId,
    lambdas: TensorId,
) -> Result<TensorId> {
    let mut x = img;
    for stage in 0..CORRECTOR_STAGES {
        let lam = tape.index(lambdas, stage)?;
        let c1 = tape.conv2d(x, bm.ids[stage_param(stage, 0)], bm.ids[stage_param(stage, 1)], 1, 0)?;
        let r = tape.relu(c1);
        let h = tape.conv2d(r, bm.ids[stage_param(stage, 2)], bm.ids[stage_param(stage, 3)], 1, 0)?;
        let scaled_x = tape.scalar_mul(lam, x)?;
        let one_minus = tape.affine_const(lam, -1.0, 1.0);
        let scaled_h = tape.scalar_mul(one_minus, h)?;
        let blended = tape.add(scaled_x, scaled_h)?;
        x = tape.clip01(blended);
    }
    Ok(x)
}

/// Full forward from an input image tensor and a reference feature tensor to
/// the corrected image tensor.
pub fn tape_apply(
    tape: &mut Tape,
    bm: &BoundModel,
    img: TensorId,
    e_ref: TensorId,
) -> Result<TensorId> {
    let e_in = tape_encode(tape, bm, img)?;
    let delta = tape_predict_delta(tape, bm, e_in, e_ref)?;
    let lambdas = tape_predict_lambdas(tape, bm, delta)?;
    tape_correct(tape, bm, img, lambdas)
}
