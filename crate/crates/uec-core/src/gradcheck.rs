//! Finite-difference verification of every backward pass.
//!
//! Central differences with step 1e-3; probe losses are read back through
//! `Tape::value_f64` so the reduction is accumulated in 64-bit. Sampled
//! points are rejected while any ReLU kink, pooling max tie, or
//! near-constant pooled channel sits close enough to flip under the probe
//! step.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::model::{ARCH, P_LAM_OUT_B};
use crate::synthetic::test_scene;
use crate::tensor::{Tape, TensorId};
use crate::train::{build_step_graph, PretextPair, RealTriple};

pub const FD_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

const RELU_MARGIN: f64 = 2e-3;
const MAX_GAP_MARGIN: f64 = 5e-3;
const STD_MARGIN: f64 = 1e-2;
const MAX_RESAMPLES: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type BuildFn = Box<dyn Fn(&mut Tape, &[Vec<f32>]) -> (Vec<TensorId>, TensorId)>;
type SampleFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Vec<f32>>>;

pub struct Case {
    pub name: &'static str,
    sample: SampleFn,
    build: BuildFn,
}

impl Case {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        (self.sample)(rng)
    }

    pub fn build(&self, tape: &mut Tape, data: &[Vec<f32>]) -> (Vec<TensorId>, TensorId) {
        (self.build)(tape, data)
    }

    pub fn build_fn(&self) -> &BuildFn {
        &self.build
    }
}

fn eval_loss(build: &BuildFn, data: &[Vec<f32>]) -> f64 {
    let mut tape = Tape::new();
    let (_, loss) = build(&mut tape, data);
    tape.value_f64(loss)
}

/// Central-difference gradients of the probe loss w.r.t. every element of
/// every checked leaf. The effective step is measured after f32 rounding.
pub fn finite_diff_gradients(data: &[Vec<f32>], build: &BuildFn) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(data.len());
    for l in 0..data.len() {
        let mut g = vec![0.0f64; data[l].len()];
        for i in 0..data[l].len() {
            let x = data[l][i] as f64;
            let xp = (x + FD_STEP) as f32;
            let xm = (x - FD_STEP) as f32;
            let mut plus = data.to_vec();
            plus[l][i] = xp;
            let mut minus = data.to_vec();
            minus[l][i] = xm;
            let lp = eval_loss(build, &plus);
            let lm = eval_loss(build, &minus);
            g[i] = (lp - lm) / (xp as f64 - xm as f64);
        }
        grads.push(g);
    }
    grads
}

/// Max over components of |analytic - numeric| / max(|analytic|, |numeric|, 1).
pub fn max_rel_error(analytic: &[Vec<f32>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let av = av as f64;
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

fn fd_safe(tape: &Tape) -> bool {
    let m = tape.fd_margins();
    m.relu > RELU_MARGIN && m.max_gap > MAX_GAP_MARGIN && m.std > STD_MARGIN
}

/// Run one case: sample inputs (resampling away from non-differentiable
/// points), take analytic gradients from the tape, and compare against
/// central differences.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng, tolerance: f64) -> GradCheckReport {
    let mut data = (case.sample)(rng);
    for _ in 0..MAX_RESAMPLES {
        let mut tape = Tape::new();
        (case.build)(&mut tape, &data);
        if fd_safe(&tape) {
            break;
        }
        data = (case.sample)(rng);
    }

    let mut tape = Tape::new();
    let (ids, loss) = (case.build)(&mut tape, &data);
    tape.backward(loss).expect("scalar probe loss");
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("checked leaves track gradients").to_vec())
        .collect();
    let numeric = finite_diff_gradients(&data, &case.build);
    GradCheckReport {
        name: case.name.to_string(),
        max_rel_err: max_rel_error(&analytic, &numeric),
        tolerance,
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Magnitudes in [margin, 1) with random sign: ReLU-safe by construction.
fn sample_signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.01f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn probe_loss(tape: &mut Tape, y: TensorId, seed: u64) -> TensorId {
    let n = tape.data(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    let weights: Vec<f32> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5f32..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let shape = tape.shape(y).to_vec();
    let w = tape.leaf(shape, weights, false);
    let prod = tape.mul(y, w).expect("probe weights share the output shape");
    tape.mean_all(prod)
}

/// The per-op cases plus the end-to-end training-step graph on 8x8 toy
/// images. Image content is derived from `seed`; fresh calls give fresh
/// sampling.
pub fn make_cases(seed: u64) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    cases.push(Case {
        name: "relu",
        sample: Box::new(|rng| vec![sample_signed_away_from_zero(rng, 32)]),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![32], data[0].clone(), true);
            let y = tape.relu(x);
            let loss = probe_loss(tape, y, seed);
            (vec![x], loss)
        }),
    });

    cases.push(Case {
        name: "sigmoid",
        sample: Box::new(|rng| vec![sample_uniform(rng, 32, -3.0, 3.0)]),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![32], data[0].clone(), true);
            let y = tape.sigmoid(x);
            let loss = probe_loss(tape, y, seed + 1);
            (vec![x], loss)
        }),
    });

    cases.push(Case {
        name: "affine",
        sample: Box::new(|rng| {
            vec![
                sample_uniform(rng, 6, -1.0, 1.0),
                sample_uniform(rng, 24, -1.0, 1.0),
                sample_uniform(rng, 4, -1.0, 1.0),
            ]
        }),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![6], data[0].clone(), true);
            let w = tape.leaf(vec![4, 6], data[1].clone(), true);
            let b = tape.leaf(vec![4], data[2].clone(), true);
            let y = tape.affine(x, w, b).unwrap();
            let loss = probe_loss(tape, y, seed + 2);
            (vec![x, w, b], loss)
        }),
    });

    struct ConvSpec {
        name: &'static str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    }
    for spec in [
        ConvSpec { name: "conv2d_3x3_s1", c_in: 2, c_out: 3, k: 3, stride: 1, padding: 1 },
        ConvSpec { name: "conv2d_3x3_s2", c_in: 3, c_out: 4, k: 3, stride: 2, padding: 1 },
        ConvSpec { name: "conv2d_1x1", c_in: 3, c_out: 5, k: 1, stride: 1, padding: 0 },
    ] {
        let ConvSpec { name, c_in, c_out, k, stride, padding } = spec;
        cases.push(Case {
            name,
            sample: Box::new(move |rng| {
                vec![
                    sample_uniform(rng, c_in * 25, -1.0, 1.0),
                    sample_uniform(rng, c_out * c_in * k * k, -1.0, 1.0),
                    sample_uniform(rng, c_out, -1.0, 1.0),
                ]
            }),
            build: Box::new(move |tape, data| {
                let x = tape.leaf(vec![c_in, 5, 5], data[0].clone(), true);
                let w = tape.leaf(vec![c_out, c_in, k, k], data[1].clone(), true);
                let b = tape.leaf(vec![c_out], data[2].clone(), true);
                let y = tape.conv2d(x, w, b, stride, padding).unwrap();
                let loss = probe_loss(tape, y, seed + 3);
                (vec![x, w, b], loss)
            }),
        });
    }

    cases.push(Case {
        name: "global_stat_pool",
        sample: Box::new(|rng| vec![sample_uniform(rng, 3 * 16, 0.0, 1.0)]),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![3, 4, 4], data[0].clone(), true);
            let y = tape.global_stat_pool(x).unwrap();
            let loss = probe_loss(tape, y, seed + 4);
            (vec![x], loss)
        }),
    });

    cases.push(Case {
        name: "blend_clip",
        sample: Box::new(|rng| {
            vec![
                sample_uniform(rng, 1, 0.2, 0.8),
                sample_uniform(rng, 27, 0.1, 0.9),
                sample_uniform(rng, 27, 0.1, 0.9),
            ]
        }),
        build: Box::new(move |tape, data| {
            let lam = tape.leaf(vec![1], data[0].clone(), true);
            let x = tape.leaf(vec![3, 3, 3], data[1].clone(), true);
            let h = tape.leaf(vec![3, 3, 3], data[2].clone(), true);
            let sx = tape.scalar_mul(lam, x).unwrap();
            let one_minus = tape.affine_const(lam, -1.0, 1.0);
            let sh = tape.scalar_mul(one_minus, h).unwrap();
            let sum = tape.add(sx, sh).unwrap();
            let y = tape.clip01(sum);
            let loss = probe_loss(tape, y, seed + 5);
            (vec![lam, x, h], loss)
        }),
    });

    cases.push(Case {
        name: "clip_saturated",
        sample: Box::new(|rng| {
            // elements pinned outside [0,1]: gradient must vanish exactly
            let vals: Vec<f32> = (0..24)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(1.1f32..1.8)
                    } else {
                        rng.random_range(-0.8f32..-0.1)
                    }
                })
                .collect();
            vec![vals]
        }),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![24], data[0].clone(), true);
            let y = tape.clip01(x);
            let loss = probe_loss(tape, y, seed + 7);
            (vec![x], loss)
        }),
    });

    cases.push(Case {
        name: "restoration_loss",
        sample: Box::new(|rng| {
            vec![
                sample_uniform(rng, 48, 0.0, 1.0),
                sample_uniform(rng, 48, 0.0, 1.0),
            ]
        }),
        build: Box::new(|tape, data| {
            let out = tape.leaf(vec![3, 4, 4], data[0].clone(), true);
            let target = tape.leaf(vec![3, 4, 4], data[1].clone(), true);
            let loss = crate::train::tape_loss_restoration(tape, out, target).unwrap();
            (vec![out, target], loss)
        }),
    });

    cases.push(Case {
        name: "monopoly_loss",
        sample: Box::new(|rng| {
            // keep |hi - lo| away from the ReLU kink
            let lo = sample_uniform(rng, 48, 0.1, 0.8);
            let hi: Vec<f32> = lo
                .iter()
                .map(|&v| {
                    let d = rng.random_range(0.02f32..0.15);
                    if rng.random_bool(0.5) {
                        v + d
                    } else {
                        v - d
                    }
                })
                .collect();
            vec![hi, lo]
        }),
        build: Box::new(|tape, data| {
            let hi = tape.leaf(vec![3, 4, 4], data[0].clone(), true);
            let lo = tape.leaf(vec![3, 4, 4], data[1].clone(), true);
            let loss = crate::train::tape_loss_monopoly(tape, hi, lo).unwrap();
            (vec![hi, lo], loss)
        }),
    });

    cases.push(Case {
        name: "semantic_loss",
        sample: Box::new(|rng| vec![sample_uniform(rng, 48, 0.0, 1.0)]),
        build: Box::new(|tape, data| {
            let out = tape.leaf(vec![3, 4, 4], data[0].clone(), true);
            let loss = crate::train::tape_loss_semantic(tape, out).unwrap();
            (vec![out], loss)
        }),
    });

    cases.push(Case {
        name: "encoder_tail",
        sample: Box::new(|rng| {
            vec![
                sample_uniform(rng, 3 * 16, 0.0, 1.0),
                sample_uniform(rng, 4 * 9, -1.0, 1.0),
                sample_uniform(rng, 4, -0.5, 0.5),
            ]
        }),
        build: Box::new(move |tape, data| {
            let x = tape.leaf(vec![3, 4, 4], data[0].clone(), true);
            let w = tape.leaf(vec![4, 9], data[1].clone(), true);
            let b = tape.leaf(vec![4], data[2].clone(), true);
            let pooled = tape.global_stat_pool(x).unwrap();
            let a = tape.affine(pooled, w, b).unwrap();
            let y = tape.sigmoid(a);
            let loss = probe_loss(tape, y, seed + 6);
            (vec![x, w, b], loss)
        }),
    });

    cases.push(end_to_end_case(seed));
    cases
}

/// Full training-step graph (one pretext pair, one real triple, 8x8 crops)
/// differentiated w.r.t. every model parameter.
///
/// The sampled point is kept away from every non-differentiable surface by
/// construction: encoder weights/biases are strictly positive (on positive
/// imagery no encoder ReLU sits near its kink and no pooled channel goes
/// dead), the corrector's projection is positive and small with moderate
/// lambdas so each stage is a contraction into (0.05, 0.8) and the [0,1]
/// clip never engages, and images live in [0.2, 0.8]. The remaining kinks
/// (predictor MLPs, monopoly hinge) are margin-screened and resampled.
pub fn end_to_end_case(seed: u64) -> Case {
    let band = |img: crate::image::ImageF32| {
        crate::image::ImageF32::from_fn(img.height(), img.width(), |y, x, c| {
            0.2 + 0.6 * img.get(y, x, c)
        })
    };
    let pair = PretextPair {
        input: band(test_scene(8, 8, seed.wrapping_mul(31).wrapping_add(1))),
        reference: band(test_scene(8, 8, seed.wrapping_mul(31).wrapping_add(2))),
        scene: "toy_a".into(),
        input_ev: -1.0,
        ref_ev: 0.0,
    };
    let triple = RealTriple {
        input: band(test_scene(8, 8, seed.wrapping_mul(31).wrapping_add(3))),
        ref_hi: band(test_scene(8, 8, seed.wrapping_mul(31).wrapping_add(4))),
        ref_lo: band(test_scene(8, 8, seed.wrapping_mul(31).wrapping_add(5))),
        input_scene: "toy_b".into(),
        ref_scene: "toy_c".into(),
        input_ev: 0.0,
        ev_hi: 1.0,
        ev_lo: -1.0,
    };
    Case {
        name: "end_to_end_8x8",
        sample: Box::new(|rng| {
            use crate::model::{stage_param, P_ENC1_B, P_ENC1_W, P_ENC2_B, P_ENC2_W, P_LAM_OUT_W};
            let project: Vec<usize> = (0..3).flat_map(|s| [stage_param(s, 2), stage_param(s, 3)]).collect();
            ARCH.iter()
                .enumerate()
                .map(|(i, spec)| {
                    let n: usize = spec.shape.iter().product();
                    if i == P_ENC1_W || i == P_ENC2_W {
                        sample_uniform(rng, n, 0.02, 0.3)
                    } else if i == P_ENC1_B || i == P_ENC2_B {
                        sample_uniform(rng, n, 0.05, 0.2)
                    } else if i == P_LAM_OUT_W {
                        sample_uniform(rng, n, -0.02, 0.02)
                    } else if i == P_LAM_OUT_B {
                        sample_uniform(rng, n, 0.25, 0.35)
                    } else if project.contains(&i) {
                        if spec.shape.len() == 4 {
                            sample_uniform(rng, n, 0.005, 0.035)
                        } else {
                            sample_uniform(rng, n, 0.05, 0.15)
                        }
                    } else if i == stage_param(0, 1) || i == stage_param(1, 1) || i == stage_param(2, 1) {
                        sample_uniform(rng, n, -0.15, 0.15)
                    } else {
                        sample_uniform(rng, n, -0.3, 0.3)
                    }
                })
                .collect()
        }),
        build: Box::new(move |tape, data| {
            let ids: Vec<TensorId> = ARCH
                .iter()
                .zip(data.iter())
                .map(|(spec, d)| tape.leaf(spec.shape.to_vec(), d.clone(), true))
                .collect();
            let bound = crate::model::BoundModel { ids: ids.clone() };
            let losses = build_step_graph(
                tape,
                &bound,
                std::slice::from_ref(&pair),
                std::slice::from_ref(&triple),
                (1.0, 1.0, 0.1),
            )
            .unwrap();
            (ids, losses.total)
        }),
    }
}

/// Run every case over `seeds` seeds; each report carries the worst error
/// seen for that op.
pub fn run_standard_suite(seeds: u64, tolerance: f64) -> Vec<GradCheckReport> {
    let mut worst: Vec<GradCheckReport> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed);
        for case in make_cases(seed) {
            let report = check_case(&case, &mut rng, tolerance);
            match worst.iter_mut().find(|r| r.name == report.name) {
                Some(existing) => {
                    if report.max_rel_err > existing.max_rel_err {
                        existing.max_rel_err = report.max_rel_err;
                    }
                }
                None => worst.push(report),
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_cases_pass_on_a_couple_of_seeds() {
        for seed in [0, 1] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for case in make_cases(seed) {
                if case.name == "end_to_end_8x8" {
                    continue; // covered by the acceptance suite; slow
                }
                let report = check_case(&case, &mut rng, DEFAULT_TOLERANCE);
                assert!(
                    report.passed(),
                    "{} failed: {} >= {}",
                    report.name,
                    report.max_rel_err,
                    report.tolerance
                );
            }
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // Corrupted conv gradient fixture: numeric side from the true graph,
        // analytic side sign-flipped on the weight gradient.
        let case = make_cases(3).into_iter().find(|c| c.name == "conv2d_3x3_s1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (case.sample)(&mut rng);
        let mut tape = Tape::new();
        let (ids, loss) = (case.build)(&mut tape, &data);
        tape.backward(loss).unwrap();
        let mut analytic: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| tape.grad(id).unwrap().to_vec())
            .collect();
        for g in analytic[1].iter_mut() {
            *g = -*g;
        }
        let numeric = finite_diff_gradients(&data, &case.build);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err > DEFAULT_TOLERANCE, "corruption went unnoticed: {err}");
    }
}
