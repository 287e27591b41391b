use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which operand, if any, is a one-element tensor broadcast over the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column `ox·stride + j − padding` is in bounds.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(j).div_ceil(self.stride).min(self.wo);
        let hi = if self.w + self.padding > j {
            ((self.w + self.padding - j - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        let (s, p) = (self.stride, self.padding);
        for c in 0..self.c {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.ho {
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let y = oy * s + i;
                        if y < p || y - p >= self.h {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &xc[(y - p) * self.w..(y - p + 1) * self.w];
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        if lo < hi {
                            let x0 = lo * s + j - p;
                            if s == 1 {
                                out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for (v, &xv) in out_row[lo..hi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                                    *v = xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        let (s, p) = (self.stride, self.padding);
        for c in 0..self.c {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(j);
                    if lo >= hi {
                        continue;
                    }
                    let x0 = lo * s + j - p;
                    for oy in 0..self.ho {
                        let y = oy * s + i;
                        if y < p || y - p >= self.h {
                            continue;
                        }
                        let dst = &mut dxc[(y - p) * self.w..(y - p + 1) * self.w];
                        let g = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if s == 1 {
                            for (d, v) in dst[x0..x0 + hi - lo].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in dst[x0..].iter_mut().step_by(s).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: Broadcast,
    },
    Relu(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
        cols: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
        c: usize,
        plane: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
    HalfSquaredDistance {
        x: Var,
        residual: Vec<f64>,
        scale: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Wengert list of executed operations.
///
/// Every op appends one node; [`Tape::backward`] walks the nodes in reverse
/// and accumulates gradients into grad-tracked leaves only.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects a rank-4 tensor, got shape {:?}",
            t.shape()
        ))),
    }
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

    /// Record an input. Tracked leaves receive gradients on `backward`.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        let grad = tracked.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: tracked,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked values
    /// and intermediates.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match kind {
            Elementwise::Add => self.binary(Binary::Add, a, Self::need_rhs(b)?),
            Elementwise::Sub => self.binary(Binary::Sub, a, Self::need_rhs(b)?),
            Elementwise::Mul => self.binary(Binary::Mul, a, Self::need_rhs(b)?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Scale(s) => Ok(self.scale(a, s)),
        }
    }

    fn need_rhs(b: Option<Var>) -> Result<Var> {
        b.ok_or_else(|| Error::InvalidArgument("binary op needs a second operand".to_string()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape() == bv.shape() {
            Broadcast::None
        } else if av.len() == 1 {
            Broadcast::Left
        } else if bv.len() == 1 {
            Broadcast::Right
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match broadcast {
            Broadcast::None => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Left => {
                let s = av.data()[0];
                (bv.shape().to_vec(), bv.data().iter().map(|&y| f(s, y)).collect())
            }
            Broadcast::Right => {
                let s = bv.data()[0];
                (av.shape().to_vec(), av.data().iter().map(|&x| f(x, s)).collect())
            }
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b, broadcast }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Which inputs of every recorded ReLU are positive, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().map(|&x| x > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let total: f64 = av.data().iter().sum();
        let mean = total / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(mean), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Adds `bias[D]` to every row of `x[N×D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = match (xv.shape(), bv.shape()) {
            (&[_, d], &[d2]) if d == d2 => d,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    left: xv.shape().to_vec(),
                    right: bv.shape().to_vec(),
                })
            }
        };
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { x, bias, cols }, rg))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".to_string()));
        }
        let [n, c, h, w] = dims4("conv2d", self.value(input))?;
        let [f, kc, kh, kw] = dims4("conv2d", self.value(kernel))?;
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.value(input).shape().to_vec(),
                right: self.value(kernel).shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![f],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::InvalidArgument(format!(
                "conv2d output extent < 1: input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let patch = geom.patch();
        let plane = geom.out_plane();
        let mut cols = vec![0.0; patch * plane];
        let mut out = vec![0.0; n * f * plane];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for s in 0..n {
                geom.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
                gemm(
                    f,
                    patch,
                    plane,
                    k,
                    false,
                    &cols,
                    false,
                    &mut out[s * f * plane..(s + 1) * f * plane],
                    0.0,
                );
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (fi, &bf) in bv.iter().enumerate() {
                        let off = (s * f + fi) * plane;
                        out[off..off + plane].iter_mut().for_each(|v| *v += bf);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Pooling over `N×C×H×W`; `GlobalAvg` ignores window/stride and returns `N×C`.
    pub fn pool2d(&mut self, kind: PoolKind, input: Var, window: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("pool2d", self.value(input))?;
        let rg = self.rg(input);
        if kind == PoolKind::GlobalAvg {
            let plane = h * w;
            if plane == 0 {
                return Err(Error::InvalidArgument("global pool over empty map".to_string()));
            }
            let x = self.value(input).data();
            let data = x
                .chunks(plane)
                .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                .collect();
            let value = Tensor::new(vec![n, c], data)?;
            return Ok(self.push(value, Op::GlobalAvgPool { input, plane }, rg));
        }
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".to_string()));
        }
        if window > h || window > w {
            return Err(Error::InvalidArgument(format!(
                "pool window {window} larger than input {h}x{w}"
            )));
        }
        let geom = PoolGeom {
            n,
            c,
            h,
            w,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * geom.ho * geom.wo);
        let mut argmax = Vec::new();
        for map in 0..n * c {
            let base = map * h * w;
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + oy * stride * w + ox * stride;
                    let mut total = 0.0;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            let v = x[idx];
                            total += v;
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        _ => out.push(total / (window * window) as f64),
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, geom.ho, geom.wo], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            _ => Op::AvgPool { input, geom },
        };
        Ok(self.push(value, op, rg))
    }

    /// Per-channel batch normalization over `N×C×H×W`.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// the running buffers (unbiased variance); eval mode reads the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        if cfg.eps <= 0.0 {
            return Err(Error::InvalidArgument("batchnorm eps must be positive".to_string()));
        }
        let [n, c, h, w] = dims4("batchnorm2d", self.value(input))?;
        for t in [self.value(gamma), self.value(beta)] {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d",
                    left: vec![c],
                    right: t.shape().to_vec(),
                });
            }
        }
        for t in [&*running_mean, &*running_var] {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d running stats",
                    left: vec![c],
                    right: t.shape().to_vec(),
                });
            }
        }
        let plane = h * w;
        let m = n * plane;
        if m == 0 {
            return Err(Error::InvalidArgument("batchnorm over an empty batch".to_string()));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        s += x[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        ss += x[off..off + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = ss / m as f64;
                    let unbiased = if m > 1 { ss / (m - 1) as f64 } else { var };
                    let rm = &mut running_mean.data_mut()[ch];
                    *rm = (1.0 - cfg.momentum) * *rm + cfg.momentum * mean;
                    let rv = &mut running_var.data_mut()[ch];
                    *rv = (1.0 - cfg.momentum) * *rv + cfg.momentum * unbiased;
                    (mean, var)
                }
                Mode::Eval => (running_mean.data()[ch], running_var.data()[ch]),
            };
            let is = 1.0 / (var + cfg.eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    let xh = (x[p] - mean) * is;
                    xhat[p] = xh;
                    out[p] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                n,
                c,
                plane,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = match *lv.shape() {
            [n, c] => (n, c),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "cross-entropy expects N×C logits, got {:?}",
                    lv.shape()
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy labels",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cross-entropy over an empty batch".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let probs = softmax_rows(lv.data(), classes);
        let mut loss = 0.0;
        for (row, &y) in lv.data().chunks(classes).zip(labels) {
            loss += neg_log_softmax(row, y);
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                classes,
            },
            rg,
        ))
    }

    /// `½·Σ‖xᵢ − tᵢ‖²` against constant targets, divided by the row count for
    /// [`Reduction::Mean`]. No gradient reaches `targets`.
    pub fn half_squared_distance(&mut self, x: Var, targets: &Tensor, reduction: Reduction) -> Result<Var> {
        let xv = self.value(x);
        check_same("half_squared_distance", xv, targets)?;
        let rows = xv.shape().first().copied().unwrap_or(1).max(1);
        let residual: Vec<f64> = xv.data().iter().zip(targets.data()).map(|(a, b)| a - b).collect();
        let scale = match reduction {
            Reduction::Mean => 1.0 / rows as f64,
            Reduction::Sum => 1.0,
        };
        let total = 0.5 * residual.iter().map(|r| r * r).sum::<f64>() * scale;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::HalfSquaredDistance { x, residual, scale }, rg))
    }

    /// Reverse pass from a one-element `root`.
    ///
    /// Intermediate gradients are rebuilt on every call; only tracked leaves
    /// accumulate, so calling twice without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("root {} is not on the tape", root.0)));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` when `v` needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (da_sign, db_sign) = match kind {
                    Binary::Sub => (1.0, -1.0),
                    _ => (1.0, 1.0),
                };
                let is_mul = matches!(kind, Binary::Mul);
                // partial of the output element `j` with respect to each operand
                let pa = |j: usize| -> f64 {
                    if is_mul {
                        if *broadcast == Broadcast::Right {
                            bv[0]
                        } else {
                            bv[j]
                        }
                    } else {
                        da_sign
                    }
                };
                let pb = |j: usize| -> f64 {
                    if is_mul {
                        if *broadcast == Broadcast::Left {
                            av[0]
                        } else {
                            av[j]
                        }
                    } else {
                        db_sign
                    }
                };
                acc(*a, &mut |buf| {
                    if *broadcast == Broadcast::Left {
                        buf[0] += g.iter().enumerate().map(|(j, gv)| gv * pa(j)).sum::<f64>();
                    } else {
                        for (j, (d, gv)) in buf.iter_mut().zip(g).enumerate() {
                            *d += gv * pa(j);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    if *broadcast == Broadcast::Right {
                        buf[0] += g.iter().enumerate().map(|(j, gv)| gv * pb(j)).sum::<f64>();
                    } else {
                        for (j, (d, gv)) in buf.iter_mut().zip(g).enumerate() {
                            *d += gv * pb(j);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let out = nodes[i].value.data();
                acc(*a, &mut |buf| {
                    for ((d, gv), o) in buf.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += s * gv;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(a) => acc(*a, &mut |buf| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bv, true, buf, 1.0));
                acc(*b, &mut |buf| gemm(k, m, n, av, true, g, false, buf, 1.0));
            }
            Op::AddBias { x, bias, cols } => {
                acc(*x, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc(*bias, &mut |buf| {
                    for row in g.chunks(*cols) {
                        for (d, gv) in buf.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let patch = geom.patch();
                let plane = geom.out_plane();
                let f = geom.f;
                if let Some(b) = bias {
                    acc(*b, &mut |buf| {
                        for s in 0..geom.n {
                            for (fi, d) in buf.iter_mut().enumerate() {
                                let off = (s * f + fi) * plane;
                                *d += g[off..off + plane].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let in_len = geom.c * geom.h * geom.w;
                let xv = nodes[input.0].value.data();
                acc(*kernel, &mut |buf| {
                    // patches are rebuilt per sample instead of kept from the forward pass
                    let mut cols = vec![0.0; patch * plane];
                    for s in 0..geom.n {
                        geom.im2col(&xv[s * in_len..(s + 1) * in_len], &mut cols);
                        gemm(
                            f,
                            plane,
                            patch,
                            &g[s * f * plane..(s + 1) * f * plane],
                            false,
                            &cols,
                            true,
                            buf,
                            1.0,
                        );
                    }
                });
                let kv = nodes[kernel.0].value.data();
                acc(*input, &mut |buf| {
                    let mut dcols = vec![0.0; patch * plane];
                    for s in 0..geom.n {
                        gemm(
                            patch,
                            f,
                            plane,
                            kv,
                            true,
                            &g[s * f * plane..(s + 1) * f * plane],
                            false,
                            &mut dcols,
                            0.0,
                        );
                        geom.col2im(&dcols, &mut buf[s * in_len..(s + 1) * in_len]);
                    }
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |buf| {
                for (&idx, gv) in argmax.iter().zip(g) {
                    buf[idx] += gv;
                }
            }),
            Op::AvgPool { input, geom } => acc(*input, &mut |buf| {
                let share = 1.0 / (geom.window * geom.window) as f64;
                let mut o = 0;
                for map in 0..geom.n * geom.c {
                    let base = map * geom.h * geom.w;
                    for oy in 0..geom.ho {
                        for ox in 0..geom.wo {
                            let gv = g[o] * share;
                            o += 1;
                            for di in 0..geom.window {
                                let row = base + (oy * geom.stride + di) * geom.w + ox * geom.stride;
                                buf[row..row + geom.window].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                    }
                }
            }),
            Op::GlobalAvgPool { input, plane } => acc(*input, &mut |buf| {
                let share = 1.0 / *plane as f64;
                for (chunk, gv) in buf.chunks_mut(*plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gv * share);
                }
            }),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                n,
                c,
                plane,
            } => {
                let (n, c, plane) = (*n, *c, *plane);
                let m = (n * plane) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for p in off..off + plane {
                            sum_g[ch] += g[p];
                            sum_gx[ch] += g[p] * xhat[p];
                        }
                    }
                }
                acc(*gamma, &mut |buf| {
                    for (d, v) in buf.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                });
                acc(*beta, &mut |buf| {
                    for (d, v) in buf.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                });
                let gam = nodes[gamma.0].value.data();
                acc(*input, &mut |buf| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            match mode {
                                Mode::Train => {
                                    for p in off..off + plane {
                                        buf[p] += k / m * (m * g[p] - sum_g[ch] - xhat[p] * sum_gx[ch]);
                                    }
                                }
                                Mode::Eval => {
                                    for p in off..off + plane {
                                        buf[p] += k * g[p];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                classes,
            } => {
                let n = labels.len() as f64;
                acc(*logits, &mut |buf| {
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &mut buf[r * classes..(r + 1) * classes];
                        let p = &probs[r * classes..(r + 1) * classes];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            *d += g[0] * (p[j] - onehot) / n;
                        }
                    }
                });
            }
            Op::HalfSquaredDistance { x, residual, scale } => acc(*x, &mut |buf| {
                for (d, r) in buf.iter_mut().zip(residual) {
                    *d += g[0] * scale * r;
                }
            }),
        }
    }
}

/// `−log softmax(row)[y]`, written as `(max − row[y]) + ln(1 + Σ_{j≠argmax} e^{row[j]−max})`
/// so confident rows keep full relative precision.
fn neg_log_softmax(row: &[f64], y: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (max - row[y]) + rest.ln_1p()
}

/// Row-wise softmax of a flattened `N×classes` buffer.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}
