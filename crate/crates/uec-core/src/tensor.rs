//! Dense f32 tensors with reverse-mode differentiation on a linear tape.
//!
//! The op set covers exactly what the exposure-correction network and its
//! losses need: conv2d (1x1 / 3x3, stride 1 or 2), affine layers, ReLU,
//! sigmoid, global max/mean/std pooling, elementwise arithmetic, forward
//! spatial differences, [0,1] clipping and full reductions. Reductions
//! accumulate in f64 and store f32. There is no broadcasting beyond the
//! built-in bias adds; shapes must match exactly.

use crate::error::{Error, Result};

/// Epsilon inside the std-pooling square root; keeps the gradient finite on
/// constant channels (clipped over/under-exposed inputs produce those).
pub const STD_POOL_EPS: f64 = 1e-8;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// See [`Tape::fd_margins`].
#[derive(Debug, Clone, Copy)]
pub struct FdMargins {
    pub relu: f64,
    pub max_gap: f64,
    pub std: f64,
}

/// A dense row-major f32 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Affine {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    /// Per-channel (max, mean, std) over H*W, concatenated as
    /// [max_0..max_C, mean_0..mean_C, std_0..std_C].
    StatPool {
        input: TensorId,
        argmax: Vec<usize>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    /// scalar ([1]) times every element of input.
    ScalarMul {
        scalar: TensorId,
        input: TensorId,
    },
    /// mul * x + add with f32 constants. The add term is kept so the tape
    /// records the executed op fully, though backward only needs mul.
    AffineConst {
        input: TensorId,
        mul: f32,
        #[allow(dead_code)]
        add: f32,
    },
    Clip01 {
        input: TensorId,
    },
    /// Extract one element as a [1] tensor.
    Index {
        input: TensorId,
        index: usize,
    },
    /// Forward difference along the last axis, zero at the last column.
    DiffX {
        input: TensorId,
    },
    /// Forward difference along the middle axis, zero at the last row.
    DiffY {
        input: TensorId,
    },
    MeanAll {
        input: TensorId,
    },
    SumAll {
        input: TensorId,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Linear record of executed ops. Backward replays it in exact reverse
/// execution order and sums gradients into tensors consumed more than once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape/data mismatch"
        );
        self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        )
    }

    pub fn scalar_leaf(&mut self, value: f32) -> TensorId {
        self.leaf(vec![1], vec![value], false)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    /// Scalar readout at f64 precision: full reductions are re-accumulated
    /// from their f32 input instead of going through the stored f32 result.
    /// Finite-difference probes need this extra headroom.
    pub fn value_f64(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        match &self.nodes[id.0].op {
            Op::MeanAll { input } => {
                let t = &self.nodes[input.0].tensor;
                t.data.iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64
            }
            Op::SumAll { input } => {
                let t = &self.nodes[input.0].tensor;
                t.data.iter().map(|&v| v as f64).sum::<f64>()
            }
            _ => self.nodes[id.0].tensor.data[0] as f64,
        }
    }

    /// Margins from the nearest non-differentiable point, per category, for
    /// finite-difference safety screening: ReLU kinks on small (<= 64
    /// element) tensors, pooling max ties, and near-constant pooled
    /// channels. Large ReLU/clip tensors are excluded; each element's
    /// influence on a mean-reduced loss is negligible.
    pub fn fd_margins(&self) -> FdMargins {
        let mut margins = FdMargins {
            relu: f64::INFINITY,
            max_gap: f64::INFINITY,
            std: f64::INFINITY,
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    // Small tensors are the low-fan-in MLP activations whose
                    // kinks carry O(1) weight. A ReLU fed by a Sub is the
                    // monopoly-loss hinge: its per-pixel kinks are driven by
                    // one shared lambda pair, so they add up coherently and
                    // must be screened at any size.
                    let t = &self.nodes[input.0].tensor;
                    let hinge = matches!(self.nodes[input.0].op, Op::Sub { .. });
                    if t.numel() <= 64 || hinge {
                        for &v in &t.data {
                            margins.relu = margins.relu.min(v.abs() as f64);
                        }
                    }
                }
                Op::StatPool { input, std, .. } => {
                    let t = &self.nodes[input.0].tensor;
                    let c = std.len();
                    let hw = t.numel() / c;
                    for ch in 0..c {
                        let plane = &t.data[ch * hw..(ch + 1) * hw];
                        let mut top1 = f32::NEG_INFINITY;
                        let mut top2 = f32::NEG_INFINITY;
                        for &v in plane {
                            if v > top1 {
                                top2 = top1;
                                top1 = v;
                            } else if v > top2 {
                                top2 = v;
                            }
                        }
                        if hw > 1 {
                            margins.max_gap = margins.max_gap.min((top1 - top2) as f64);
                        }
                        margins.std = margins.std.min(std[ch]);
                    }
                }
                _ => {}
            }
        }
        margins
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// 2D cross-correlation: input [C_in,H,W], weight [C_out,C_in,k,k],
    /// bias [C_out]. k in {1,3}, stride in {1,2}, padding in {0, k/2}.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 3 {
            return Err(shape_err("conv2d", "input rank", "3", ishape.len()));
        }
        if wshape.len() != 4 {
            return Err(shape_err("conv2d", "weight rank", "4", wshape.len()));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, k) = (wshape[0], wshape[2]);
        if wshape[1] != c_in {
            return Err(shape_err("conv2d", "weight input channels", &c_in.to_string(), wshape[1]));
        }
        if wshape[3] != k {
            return Err(shape_err("conv2d", "kernel squareness", &k.to_string(), wshape[3]));
        }
        if bshape != [c_out] {
            return Err(shape_err("conv2d", "bias length", &c_out.to_string(), bshape.iter().product::<usize>()));
        }
        if !(k == 1 || k == 3) {
            return Err(shape_err("conv2d", "kernel size", "1 or 3", k));
        }
        if !(stride == 1 || stride == 2) {
            return Err(shape_err("conv2d", "stride", "1 or 2", stride));
        }
        if !(padding == 0 || padding == k / 2) {
            return Err(shape_err("conv2d", "padding", "0 or k/2", padding));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err("conv2d", "spatial extent", &format!(">= {}", k), h.min(w)));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;

        let out = conv2d_raw(
            &self.nodes[input.0].tensor.data,
            (c_in, h, w),
            &self.nodes[weight.0].tensor.data,
            (c_out, k),
            &self.nodes[bias.0].tensor.data,
            stride,
            padding,
        );
        Ok(self.push(
            Tensor::new(vec![c_out, oh, ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let out: Vec<f32> = t.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, out), Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let out: Vec<f32> = t.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, out), Op::Sigmoid { input })
    }

    /// weight [M,N] * x [N] + bias [M].
    pub fn affine(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let n = self.nodes[input.0].tensor.numel();
        let wshape = self.shape(weight).to_vec();
        if self.shape(input).len() != 1 || wshape.len() != 2 {
            return Err(shape_err("affine", "ranks", "x:1 w:2", self.shape(input).len()));
        }
        let (m, wn) = (wshape[0], wshape[1]);
        if wn != n {
            return Err(shape_err("affine", "weight columns", &n.to_string(), wn));
        }
        if self.nodes[bias.0].tensor.numel() != m {
            return Err(shape_err("affine", "bias length", &m.to_string(), self.nodes[bias.0].tensor.numel()));
        }
        let out = affine_raw(
            &self.nodes[input.0].tensor.data,
            &self.nodes[weight.0].tensor.data,
            &self.nodes[bias.0].tensor.data,
            m,
            n,
        );
        Ok(self.push(
            Tensor::new(vec![m], out),
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Global per-channel statistics of a [C,H,W] tensor: [3C] output laid
    /// out as maxes, means, population stds (sqrt(E[x^2]-E[x]^2+eps)). Max
    /// gradient routes to the first row-major argmax element.
    pub fn global_stat_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("global_stat_pool", "input rank", "3", shape.len()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err("global_stat_pool", "spatial extent", ">= 1", 0));
        }
        let (out, argmax, means, stds) =
            stat_pool_raw(&self.nodes[input.0].tensor.data, c, hw);
        Ok(self.push(
            Tensor::new(vec![3 * c], out),
            Op::StatPool {
                input,
                argmax,
                mean: means,
                std: stds,
            },
        ))
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let out = self.zip("add", lhs, rhs, |a, b| a + b)?;
        Ok(self.push(out, Op::Add { lhs, rhs }))
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let out = self.zip("sub", lhs, rhs, |a, b| a - b)?;
        Ok(self.push(out, Op::Sub { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let out = self.zip("mul", lhs, rhs, |a, b| a * b)?;
        Ok(self.push(out, Op::Mul { lhs, rhs }))
    }

    fn zip(
        &self,
        op: &'static str,
        lhs: TensorId,
        rhs: TensorId,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let a = &self.nodes[lhs.0].tensor;
        let b = &self.nodes[rhs.0].tensor;
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op,
                what: "operand shapes",
                expected: format!("{:?}", a.shape),
                got: format!("{:?}", b.shape),
            });
        }
        let data: Vec<f32> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(a.shape.clone(), data))
    }

    pub fn scalar_mul(&mut self, scalar: TensorId, input: TensorId) -> Result<TensorId> {
        if self.nodes[scalar.0].tensor.numel() != 1 {
            return Err(shape_err("scalar_mul", "scalar numel", "1", self.nodes[scalar.0].tensor.numel()));
        }
        let s = self.nodes[scalar.0].tensor.data[0];
        let t = &self.nodes[input.0].tensor;
        let data: Vec<f32> = t.data.iter().map(|&v| s * v).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::ScalarMul { scalar, input });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn affine_const(&mut self, input: TensorId, mul: f32, add: f32) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let data: Vec<f32> = t.data.iter().map(|&v| mul * v + add).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::AffineConst { input, mul, add })
    }

    pub fn clip01(&mut self, input: TensorId) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let data: Vec<f32> = t.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::Clip01 { input })
    }

    pub fn index(&mut self, input: TensorId, index: usize) -> Result<TensorId> {
        let t = &self.nodes[input.0].tensor;
        if index >= t.numel() {
            return Err(shape_err("index", "index", &format!("< {}", t.numel()), index));
        }
        let v = t.data[index];
        Ok(self.push(Tensor::new(vec![1], vec![v]), Op::Index { input, index }))
    }

    pub fn diff_x(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("diff_x", "input rank", "3", shape.len()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[input.0].tensor.data;
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                for xx in 0..w.saturating_sub(1) {
                    out[row + xx] = x[row + xx + 1] - x[row + xx];
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out), Op::DiffX { input }))
    }

    pub fn diff_y(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("diff_y", "input rank", "3", shape.len()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[input.0].tensor.data;
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h.saturating_sub(1) {
                let row = (ch * h + y) * w;
                for xx in 0..w {
                    out[row + xx] = x[row + w + xx] - x[row + xx];
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out), Op::DiffY { input }))
    }

    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let sum: f64 = t.data.iter().map(|&v| v as f64).sum();
        let v = (sum / t.numel() as f64) as f32;
        self.push(Tensor::new(vec![1], vec![v]), Op::MeanAll { input })
    }

    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let t = &self.nodes[input.0].tensor;
        let sum: f64 = t.data.iter().map(|&v| v as f64).sum();
        self.push(Tensor::new(vec![1], vec![sum as f32]), Op::SumAll { input })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every tensor reachable from the
    /// loss ends up with dLoss/dTensor in its grad buffer.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].tensor.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.tensor.grad = Some(vec![0.0f32; node.tensor.numel()]);
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let gout = match &self.nodes[i].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (c_in, h, w) = {
                        let s = self.shape(input);
                        (s[0], s[1], s[2])
                    };
                    let (c_out, k) = {
                        let s = self.shape(weight);
                        (s[0], s[2])
                    };
                    let (oh, ow) = {
                        let s = &self.nodes[i].tensor.shape;
                        (s[1], s[2])
                    };
                    let x = self.nodes[input.0].tensor.data.clone();
                    let wt = self.nodes[weight.0].tensor.data.clone();
                    let mut dx = vec![0.0f32; c_in * h * w];
                    let mut dw = vec![0.0f32; c_out * c_in * k * k];
                    let mut db = vec![0.0f32; c_out];
                    for o in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gout[(o * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                db[o] += g;
                                for c in 0..c_in {
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = (c * h + iy as usize) * w + ix as usize;
                                            let wi = ((o * c_in + c) * k + ky) * k + kx;
                                            dx[xi] += g * wt[wi];
                                            dw[wi] += g * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                    accumulate(&mut self.nodes[weight.0].tensor.grad, &dw);
                    accumulate(&mut self.nodes[bias.0].tensor.grad, &db);
                }
                Op::Relu { input } => {
                    let dg: Vec<f32> = self.nodes[input.0]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dg);
                }
                Op::Sigmoid { input } => {
                    let dg: Vec<f32> = self.nodes[i]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dg);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let n = self.nodes[input.0].tensor.numel();
                    let m = self.nodes[i].tensor.numel();
                    let x = self.nodes[input.0].tensor.data.clone();
                    let w = self.nodes[weight.0].tensor.data.clone();
                    let mut dx = vec![0.0f32; n];
                    let mut dw = vec![0.0f32; m * n];
                    for r in 0..m {
                        let g = gout[r];
                        if g == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            dx[j] += g * w[r * n + j];
                            dw[r * n + j] += g * x[j];
                        }
                    }
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                    accumulate(&mut self.nodes[weight.0].tensor.grad, &dw);
                    accumulate(&mut self.nodes[bias.0].tensor.grad, &gout);
                }
                Op::StatPool {
                    input,
                    argmax,
                    mean,
                    std,
                } => {
                    let (c, h, w) = {
                        let s = self.shape(input);
                        (s[0], s[1], s[2])
                    };
                    let hw = h * w;
                    let x = self.nodes[input.0].tensor.data.clone();
                    let mut dx = vec![0.0f32; c * hw];
                    for ch in 0..c {
                        let g_max = gout[ch];
                        let g_mean = gout[c + ch];
                        let g_std = gout[2 * c + ch];
                        dx[ch * hw + argmax[ch]] += g_max;
                        let per_mean = g_mean / hw as f32;
                        let std_scale = g_std as f64 / (hw as f64 * std[ch]);
                        for p in 0..hw {
                            dx[ch * hw + p] += per_mean
                                + (std_scale * (x[ch * hw + p] as f64 - mean[ch])) as f32;
                        }
                    }
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut self.nodes[lhs.0].tensor.grad, &gout);
                    accumulate(&mut self.nodes[rhs.0].tensor.grad, &gout);
                }
                Op::Sub { lhs, rhs } => {
                    accumulate(&mut self.nodes[lhs.0].tensor.grad, &gout);
                    let neg: Vec<f32> = gout.iter().map(|&g| -g).collect();
                    accumulate(&mut self.nodes[rhs.0].tensor.grad, &neg);
                }
                Op::Mul { lhs, rhs } => {
                    let da: Vec<f32> = self.nodes[rhs.0]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&b, &g)| g * b)
                        .collect();
                    let db: Vec<f32> = self.nodes[lhs.0]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&a, &g)| g * a)
                        .collect();
                    accumulate(&mut self.nodes[lhs.0].tensor.grad, &da);
                    accumulate(&mut self.nodes[rhs.0].tensor.grad, &db);
                }
                Op::ScalarMul { scalar, input } => {
                    let s = self.nodes[scalar.0].tensor.data[0];
                    let dx: Vec<f32> = gout.iter().map(|&g| s * g).collect();
                    let ds: f64 = self.nodes[input.0]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&x, &g)| x as f64 * g as f64)
                        .sum();
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                    accumulate(&mut self.nodes[scalar.0].tensor.grad, &[ds as f32]);
                }
                Op::AffineConst { input, mul, .. } => {
                    let dx: Vec<f32> = gout.iter().map(|&g| mul * g).collect();
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::Clip01 { input } => {
                    let dx: Vec<f32> = self.nodes[input.0]
                        .tensor
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&x, &g)| if (0.0..=1.0).contains(&x) { g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::Index { input, index } => {
                    if let Some(grad) = &mut self.nodes[input.0].tensor.grad {
                        grad[index] += gout[0];
                    }
                }
                Op::DiffX { input } => {
                    let (c, h, w) = {
                        let s = self.shape(input);
                        (s[0], s[1], s[2])
                    };
                    let mut dx = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            let row = (ch * h + y) * w;
                            for xx in 0..w.saturating_sub(1) {
                                let g = gout[row + xx];
                                dx[row + xx + 1] += g;
                                dx[row + xx] -= g;
                            }
                        }
                    }
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::DiffY { input } => {
                    let (c, h, w) = {
                        let s = self.shape(input);
                        (s[0], s[1], s[2])
                    };
                    let mut dx = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for y in 0..h.saturating_sub(1) {
                            let row = (ch * h + y) * w;
                            for xx in 0..w {
                                let g = gout[row + xx];
                                dx[row + w + xx] += g;
                                dx[row + xx] -= g;
                            }
                        }
                    }
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::MeanAll { input } => {
                    let n = self.nodes[input.0].tensor.numel();
                    let g = gout[0] / n as f32;
                    let dx = vec![g; n];
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
                Op::SumAll { input } => {
                    let n = self.nodes[input.0].tensor.numel();
                    let dx = vec![gout[0]; n];
                    accumulate(&mut self.nodes[input.0].tensor.grad, &dx);
                }
            }
        }
        Ok(())
    }
}

// ── Shared forward kernels ──────────────────────────────────────────
//
// The frozen-parameter inference path in `model` reuses these so that tape
// forward and inference forward are bit-identical.

pub(crate) fn conv2d_raw(
    x: &[f32],
    (c_in, h, w): (usize, usize, usize),
    wt: &[f32],
    (c_out, k): (usize, usize),
    b: &[f32],
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; c_out * oh * ow];
    // In-bounds tap ranges hoisted out of the inner loops; the surviving tap
    // sequence (ascending c, ky, kx) is unchanged, so results are
    // bit-identical to the naive skip-per-tap loop.
    for o in 0..c_out {
        for oy in 0..oh {
            let ys = oy * stride;
            let ky_lo = padding.saturating_sub(ys);
            let ky_hi = k.min(h + padding - ys);
            for ox in 0..ow {
                let xs = ox * stride;
                let kx_lo = padding.saturating_sub(xs);
                let kx_hi = k.min(w + padding - xs);
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in ky_lo..ky_hi {
                        let iy = ys + ky - padding;
                        let xrow = (c * h + iy) * w;
                        let wrow = ((o * c_in + c) * k + ky) * k;
                        for kx in kx_lo..kx_hi {
                            acc += x[xrow + xs + kx - padding] * wt[wrow + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn affine_raw(x: &[f32], w: &[f32], b: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m];
    for i in 0..m {
        let mut acc = b[i];
        for j in 0..n {
            acc += w[i * n + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn stat_pool_raw(
    x: &[f32],
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0f32; 3 * c];
    let mut argmax = vec![0usize; c];
    let mut means = vec![0.0f64; c];
    let mut stds = vec![0.0f64; c];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let mut best = f32::NEG_INFINITY;
        let mut best_i = 0usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for (i, &v) in plane.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
            let vd = v as f64;
            sum += vd;
            sumsq += vd * vd;
        }
        let mean = sum / hw as f64;
        let std = (sumsq / hw as f64 - mean * mean + STD_POOL_EPS).sqrt();
        out[ch] = best;
        out[c + ch] = mean as f32;
        out[2 * c + ch] = std as f32;
        argmax[ch] = best_i;
        means[ch] = mean;
        stds[ch] = std;
    }
    (out, argmax, means, stds)
}

pub(crate) fn sigmoid_raw(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(target: &mut Option<Vec<f32>>, src: &[f32]) {
    if let Some(t) = target {
        for (a, b) in t.iter_mut().zip(src.iter()) {
            *a += b;
        }
    }
}

fn shape_err(op: &'static str, what: &'static str, expected: &str, got: usize) -> Error {
    Error::ShapeMismatch {
        op,
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
