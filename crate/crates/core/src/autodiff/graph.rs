//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose inputs
//! are earlier nodes, so node order is already a topological order and
//! `backward` simply walks the tape in reverse.

use crate::autodiff::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    FullyConnected,
    Conv2d,
    UpsampleNearest,
    LeakyRelu,
    Sigmoid,
    BatchNorm,
    MseLoss,
    L2Normalize,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Reshape,
    ConcatChannels,
    UntiedBias,
    RowAngle,
    CosineSoftmaxLoss,
}

const BN_EPS: f64 = 1e-5;
/// Minimum norm accepted by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.out_plane();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let ohw = self.out_plane();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Channel layout shared by batch norm: element `(b, c, s)` lives at
/// `(b * channels + c) * spatial + s`.
#[derive(Debug, Clone, Copy)]
struct ChannelLayout {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        match shape {
            [b, f] => Ok(ChannelLayout {
                batch: *b,
                channels: *f,
                spatial: 1,
            }),
            [b, c, h, w] => Ok(ChannelLayout {
                batch: *b,
                channels: *c,
                spatial: h * w,
            }),
            _ => Err(Error::dim(format!(
                "batch_norm expects [batch, features] or [batch, c, h, w], got {shape:?}"
            ))),
        }
    }

    fn count(&self) -> usize {
        self.batch * self.spatial
    }

    fn for_each_channel<F: FnMut(usize, usize)>(&self, mut f: F) {
        // f(channel, flat index)
        for b in 0..self.batch {
            for c in 0..self.channels {
                let base = (b * self.channels + c) * self.spatial;
                for s in 0..self.spatial {
                    f(c, base + s);
                }
            }
        }
    }
}

/// Running statistics for batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.9,
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalise with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    FullyConnected {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Upsample {
        x: Var,
        factor: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Mse {
        a: Var,
        b: Var,
    },
    L2Normalize {
        x: Var,
        dim: usize,
        norms: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        batch: usize,
        ca: usize,
        cb: usize,
        spatial: usize,
    },
    UntiedBias {
        x: Var,
        b: Var,
    },
    RowAngle {
        a: Var,
        b: Var,
        dim: usize,
        cos: Vec<f64>,
    },
    CosineSoftmax {
        cos: Var,
        labels: Vec<usize>,
        classes: usize,
        scale: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample { .. } => OpKind::UpsampleNearest,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Mse { .. } => OpKind::MseLoss,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::UntiedBias { .. } => OpKind::UntiedBias,
            Op::RowAngle { .. } => OpKind::RowAngle,
            Op::CosineSoftmax { .. } => OpKind::CosineSoftmaxLoss,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::FullyConnected { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Upsample { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::L2Normalize { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x } => vec![x],
            Op::CosineSoftmax { cos, .. } => vec![cos],
            Op::Mse { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatChannels { a, b, .. }
            | Op::RowAngle { a, b, .. } => vec![a, b],
            Op::UntiedBias { x, b } => vec![x, b],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph with persistent gradient accumulators.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn rows_and_dim(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, n] => Ok((*r, *n)),
        _ => Err(Error::dim(format!("expected a vector or matrix, got {shape:?}"))),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            op.kind()
        );
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_with(Op::Leaf, value, true)
    }

    /// Frozen leaf: never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros for nodes that never received any.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `y = W x (+ b)`. `x` may be `[n_in]` or a batch `[batch, n_in]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, n_in) = rows_and_dim(self.shape(x))?;
        let [n_out, w_in] = *self.shape(w) else {
            return Err(Error::dim(format!(
                "weight must be [n_out, n_in], got {:?}",
                self.shape(w)
            )));
        };
        if w_in != n_in {
            return Err(Error::dim(format!(
                "input width {n_in} does not match weight width {w_in}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::dim(format!("bias must be [{n_out}], got {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; batch * n_out];
        gemm(
            batch,
            n_in,
            n_out,
            self.data(x),
            false,
            self.data(w),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n_out) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let shape = if self.shape(x).len() == 1 {
            vec![n_out]
        } else {
            vec![batch, n_out]
        };
        Ok(self.push(
            Op::FullyConnected {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// 2-D convolution with zero padding. `x` is `[c, h, w]` or
    /// `[batch, c, h, w]`; `k` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        let (batch, c_in, h, w) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be 3-D or 4-D, got {xs:?}"))),
        };
        let [c_out, kc, kh, kw] = *self.shape(k) else {
            return Err(Error::dim(format!(
                "conv2d kernel must be 4-D, got {:?}",
                self.shape(k)
            )));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let patch = geom.patch();
        let ohw = geom.out_plane();
        let keep_cols = self.nodes[k.0].requires_grad;
        let mut cols_all = vec![0.0; batch * patch * ohw];
        let mut out = vec![0.0; batch * c_out * ohw];
        {
            let xd = self.data(x);
            let kd = self.data(k);
            for b in 0..batch {
                let cols = &mut cols_all[b * patch * ohw..(b + 1) * patch * ohw];
                geom.im2col(&xd[b * c_in * h * w..(b + 1) * c_in * h * w], cols);
                gemm(
                    c_out,
                    patch,
                    ohw,
                    kd,
                    false,
                    cols,
                    false,
                    0.0,
                    &mut out[b * c_out * ohw..(b + 1) * c_out * ohw],
                );
            }
        }
        let shape = if xs.len() == 3 {
            vec![c_out, geom.oh, geom.ow]
        } else {
            vec![batch, c_out, geom.oh, geom.ow]
        };
        Ok(self.push(
            Op::Conv2d {
                x,
                k,
                geom,
                cols: keep_cols.then_some(cols_all),
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::arg("upsample factor must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim(format!("upsample needs [.., h, w], got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (fh, fw) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * fh * fw];
        let xd = self.data(x);
        for p in 0..planes {
            for y in 0..fh {
                let src = &xd[(p * h + y / factor) * w..(p * h + y / factor + 1) * w];
                let dst = &mut out[(p * fh + y) * fw..(p * fh + y + 1) * fw];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / factor];
                }
            }
        }
        let mut shape = xs.clone();
        let n = shape.len();
        shape[n - 2] = fh;
        shape[n - 1] = fw;
        Ok(self.push(
            Op::Upsample {
                x,
                factor,
                planes,
                h,
                w,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// `x` if `x > 0`, else `slope * x`. The subgradient at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::LeakyRelu { x, slope }, Tensor::from_parts(shape, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, Tensor::from_parts(shape, out))
    }

    /// Batch normalisation over `[batch, features]` or per channel over
    /// `[batch, c, h, w]`, followed by the learned scale `gamma` and shift
    /// `beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let layout = ChannelLayout::of(self.shape(x))?;
        let nc = layout.channels;
        if self.shape(gamma) != [nc] || self.shape(beta) != [nc] {
            return Err(Error::dim(format!(
                "batch_norm scale/shift must be [{nc}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.data(x);
        let (mean, inv_std, train) = match mode {
            BatchNormMode::Train(stats) => {
                if layout.batch < 2 {
                    return Err(Error::arg("train-mode batch_norm needs a batch of at least 2"));
                }
                if stats.mean.len() != nc || stats.var.len() != nc {
                    return Err(Error::dim("running stats do not match feature count"));
                }
                let n = layout.count() as f64;
                let mut mean = vec![0.0; nc];
                layout.for_each_channel(|c, i| mean[c] += xd[i]);
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; nc];
                layout.for_each_channel(|c, i| {
                    let d = xd[i] - mean[c];
                    var[c] += d * d;
                });
                var.iter_mut().for_each(|v| *v /= n);
                let m = stats.momentum;
                for c in 0..nc {
                    stats.mean[c] = m * stats.mean[c] + (1.0 - m) * mean[c];
                    stats.var[c] = m * stats.var[c] + (1.0 - m) * var[c] * n / (n - 1.0);
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv_std, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != nc || stats.var.len() != nc {
                    return Err(Error::dim("running stats do not match feature count"));
                }
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let mut xhat = vec![0.0; xd.len()];
        layout.for_each_channel(|c, i| xhat[i] = (xd[i] - mean[c]) * inv_std[c]);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        layout.for_each_channel(|c, i| out[i] = g[c] * xhat[i] + bt[c]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let n = self.data(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(s / n)))
    }

    /// Row-wise `x / ||x||` for `[n]` or `[rows, n]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, dim) = rows_and_dim(self.shape(x))?;
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= NORM_EPS {
                return Err(Error::DegenerateInput(format!(
                    "cannot normalise a vector of norm {n:e}"
                )));
            }
            for (o, v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::L2Normalize { x, dim, norms }, Tensor::from_parts(shape, out)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, Tensor::from_parts(shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, factor }, Tensor::from_parts(shape, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean { x }, Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Concatenates `[batch, ca, h, w]` and `[batch, cb, h, w]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, ca, ha, wa], &[bb, cb, hb, wb]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim(format!("concat needs 4-D inputs, got {sa:?}, {sb:?}")));
        };
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::dim(format!("concat shape mismatch {sa:?} vs {sb:?}")));
        }
        let spatial = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * spatial);
        for i in 0..ba {
            out.extend_from_slice(&self.data(a)[i * ca * spatial..(i + 1) * ca * spatial]);
            out.extend_from_slice(&self.data(b)[i * cb * spatial..(i + 1) * cb * spatial]);
        }
        Ok(self.push(
            Op::ConcatChannels {
                a,
                b,
                batch: ba,
                ca,
                cb,
                spatial,
            },
            Tensor::from_parts(vec![ba, ca + cb, ha, wa], out),
        ))
    }

    /// Adds a bias with one entry per output element, shared over the
    /// leading batch axis: `x` is `[batch, ..rest]`, `b` is `[..rest]`.
    pub fn untied_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || &xs[1..] != self.shape(b) {
            return Err(Error::dim(format!(
                "untied bias {:?} does not match input {xs:?}",
                self.shape(b)
            )));
        }
        let per = self.data(b).len();
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(x)
            .chunks(per)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let shape = xs.to_vec();
        Ok(self.push(Op::UntiedBias { x, b }, Tensor::from_parts(shape, out)))
    }

    /// Row-wise angle `acos(clamp(a·b, -1, 1))` between unit vectors.
    /// Returns `[rows]` for matrices and `[1]` for vectors.
    pub fn row_angle(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_angle")?;
        let (rows, dim) = rows_and_dim(self.shape(a))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let cos: Vec<f64> = (0..rows)
            .map(|r| {
                let s: f64 = ad[r * dim..(r + 1) * dim]
                    .iter()
                    .zip(&bd[r * dim..(r + 1) * dim])
                    .map(|(x, y)| x * y)
                    .sum();
                s.clamp(-1.0, 1.0)
            })
            .collect();
        let out = cos.iter().map(|c| c.acos()).collect();
        Ok(self.push(Op::RowAngle { a, b, dim, cos }, Tensor::from_parts(vec![rows], out)))
    }

    /// Normalised-softmax identity loss on cosines `[batch, classes]`:
    /// logits `scale * (cos - margin * onehot)`, mean cross-entropy.
    pub fn cosine_softmax_loss(&mut self, cos: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var> {
        let [batch, classes] = *self.shape(cos) else {
            return Err(Error::dim("cosine_softmax_loss expects [batch, classes]"));
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
            return Err(Error::arg("labels do not match the cosine matrix"));
        }
        let cd = self.data(cos);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &cd[i * classes..(i + 1) * classes];
            let logits: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, c)| scale * (c - if j == y { margin } else { 0.0 }))
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                probs[i * classes + j] = (l - mx).exp() / z;
            }
            loss += mx + z.ln() - logits[y];
        }
        Ok(self.push(
            Op::CosineSoftmax {
                cos,
                labels: labels.to_vec(),
                classes,
                scale,
                probs,
            },
            Tensor::scalar(loss / batch as f64),
        ))
    }

    /// Reverse pass from a scalar node. Gradients are added to the graph's
    /// accumulators, so two calls without `zero_grad` double them.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::arg(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        pass[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(upstream) = pass[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &upstream, &mut pass);
            // Keep the pass gradient for accumulation below.
            pass[i] = Some(upstream);
        }
        for (i, g) in pass.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, dy: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::FullyConnected {
                x,
                w,
                b,
                batch,
                n_in,
                n_out,
            } => {
                let (batch, n_in, n_out) = (*batch, *n_in, *n_out);
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * n_in];
                    gemm(batch, n_out, n_in, dy, false, self.data(*w), false, 0.0, &mut dx);
                    add_into(&mut pass[x.0], &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; n_out * n_in];
                    gemm(n_out, batch, n_in, dy, true, self.data(*x), false, 0.0, &mut dw);
                    add_into(&mut pass[w.0], &dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; n_out];
                    for row in dy.chunks(n_out) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    add_into(&mut pass[b.0], &db);
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let g = *geom;
                let (patch, ohw) = (g.patch(), g.out_plane());
                let in_size = g.c_in * g.h * g.w;
                if self.wants(*k) {
                    let cols = cols.as_ref().expect("cols kept for trainable kernel");
                    let mut dk = vec![0.0; g.c_out * patch];
                    for b in 0..g.batch {
                        gemm(
                            g.c_out,
                            ohw,
                            patch,
                            &dy[b * g.c_out * ohw..(b + 1) * g.c_out * ohw],
                            false,
                            &cols[b * patch * ohw..(b + 1) * patch * ohw],
                            true,
                            1.0,
                            &mut dk,
                        );
                    }
                    add_into(&mut pass[k.0], &dk);
                }
                if self.wants(*x) {
                    let kd = self.data(*k);
                    let mut dx = vec![0.0; g.batch * in_size];
                    let mut dcols = vec![0.0; patch * ohw];
                    for b in 0..g.batch {
                        gemm(
                            patch,
                            g.c_out,
                            ohw,
                            kd,
                            true,
                            &dy[b * g.c_out * ohw..(b + 1) * g.c_out * ohw],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        g.col2im_add(&dcols, &mut dx[b * in_size..(b + 1) * in_size]);
                    }
                    add_into(&mut pass[x.0], &dx);
                }
            }
            Op::Upsample {
                x,
                factor,
                planes,
                h,
                w,
            } => {
                let (f, h, w) = (*factor, *h, *w);
                let (fh, fw) = (h * f, w * f);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..*planes {
                    for yy in 0..fh {
                        let src = &dy[(p * fh + yy) * fw..(p * fh + yy + 1) * fw];
                        let dst = &mut dx[(p * h + yy / f) * w..(p * h + yy / f + 1) * w];
                        for (xo, g) in src.iter().enumerate() {
                            dst[xo / f] += g;
                        }
                    }
                }
                add_into(&mut pass[x.0], &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, g)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                add_into(&mut pass[x.0], &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = y.iter().zip(dy).map(|(s, g)| g * s * (1.0 - s)).collect();
                add_into(&mut pass[x.0], &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let nc = layout.channels;
                let gd = self.data(*gamma);
                let mut sum_dy = vec![0.0; nc];
                let mut sum_dy_xhat = vec![0.0; nc];
                layout.for_each_channel(|c, i| {
                    sum_dy[c] += dy[i];
                    sum_dy_xhat[c] += dy[i] * xhat[i];
                });
                if self.wants(*gamma) {
                    add_into(&mut pass[gamma.0], &sum_dy_xhat);
                }
                if self.wants(*beta) {
                    add_into(&mut pass[beta.0], &sum_dy);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    if *train {
                        let n = layout.count() as f64;
                        layout.for_each_channel(|c, i| {
                            dx[i] = gd[c] * inv_std[c] / n * (n * dy[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                        });
                    } else {
                        layout.for_each_channel(|c, i| dx[i] = dy[i] * gd[c] * inv_std[c]);
                    }
                    add_into(&mut pass[x.0], &dx);
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let s = 2.0 * dy[0] / ad.len() as f64;
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| s * (x - y)).collect();
                if self.wants(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    add_into(&mut pass[b.0], &db);
                }
                if self.wants(*a) {
                    add_into(&mut pass[a.0], &da);
                }
            }
            Op::L2Normalize { x, dim, norms } => {
                let dim = *dim;
                let mut dx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &dy[r * dim..(r + 1) * dim];
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dim {
                        dx[r * dim + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                add_into(&mut pass[x.0], &dx);
            }
            Op::Add { a, b } => {
                add_into(&mut pass[a.0], dy);
                add_into(&mut pass[b.0], dy);
            }
            Op::Sub { a, b } => {
                add_into(&mut pass[a.0], dy);
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                add_into(&mut pass[b.0], &neg);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let da: Vec<f64> = bd.iter().zip(dy).map(|(v, g)| v * g).collect();
                let db: Vec<f64> = ad.iter().zip(dy).map(|(v, g)| v * g).collect();
                add_into(&mut pass[a.0], &da);
                add_into(&mut pass[b.0], &db);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                add_into(&mut pass[x.0], &dx);
            }
            Op::Sum { x } => {
                let dx = vec![dy[0]; self.data(*x).len()];
                add_into(&mut pass[x.0], &dx);
            }
            Op::Mean { x } => {
                let n = self.data(*x).len();
                let dx = vec![dy[0] / n as f64; n];
                add_into(&mut pass[x.0], &dx);
            }
            Op::Reshape { x } => add_into(&mut pass[x.0], dy),
            Op::ConcatChannels {
                a,
                b,
                batch,
                ca,
                cb,
                spatial,
            } => {
                let (la, lb) = (ca * spatial, cb * spatial);
                let mut da = Vec::with_capacity(batch * la);
                let mut db = Vec::with_capacity(batch * lb);
                for chunk in dy.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                add_into(&mut pass[a.0], &da);
                add_into(&mut pass[b.0], &db);
            }
            Op::UntiedBias { x, b } => {
                add_into(&mut pass[x.0], dy);
                if self.wants(*b) {
                    let per = self.data(*b).len();
                    let mut db = vec![0.0; per];
                    for row in dy.chunks(per) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    add_into(&mut pass[b.0], &db);
                }
            }
            Op::RowAngle { a, b, dim, cos } => {
                let dim = *dim;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for (r, c) in cos.iter().enumerate() {
                    let s2 = 1.0 - c * c;
                    // d acos / dc diverges at |c| = 1; the angle has a cusp there.
                    if s2 <= 1e-24 {
                        continue;
                    }
                    let coef = -dy[r] / s2.sqrt();
                    for j in 0..dim {
                        da[r * dim + j] = coef * bd[r * dim + j];
                        db[r * dim + j] = coef * ad[r * dim + j];
                    }
                }
                add_into(&mut pass[a.0], &da);
                add_into(&mut pass[b.0], &db);
            }
            Op::CosineSoftmax {
                cos,
                labels,
                classes,
                scale,
                probs,
            } => {
                let batch = labels.len();
                let s = dy[0] * scale / batch as f64;
                let mut dc: Vec<f64> = probs.iter().map(|p| s * p).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dc[i * classes + l] -= s;
                }
                add_into(&mut pass[cos.0], &dc);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the logistic function, clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}
