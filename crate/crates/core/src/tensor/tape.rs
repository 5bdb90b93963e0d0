use super::gemm::gemm;
use super::rng::DropoutStream;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: usize, keep: Vec<bool>, scale: f64 },
    Conv2d { x: usize, w: usize, cols: Vec<f64>, geom: ConvGeom },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    SelectLast { x: usize, idx: Vec<usize> },
    IndexRows { x: usize, rows: Vec<usize> },
    Sum(usize),
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64> },
    L1 { a: usize, b: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so every node comes after its
/// parents and a single reverse sweep visits each one once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permuted_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    // map[out_linear] = in_linear
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        seg.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: usize) -> bool {
        self.nodes[v].tracked
    }

    fn unary(&mut self, x: Var, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let tracked = self.tracked(x.0);
        let t = Tensor::new(shape, data).expect("unary output shape");
        self.push(t, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        let t = Tensor::new(shape, data).expect("binary output shape");
        self.push(t, op, tracked)
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.binary(a, b, shape, data, op))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.unary(x, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x.0, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let f = |v: f64| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        };
        self.map(x, f, Op::Sigmoid(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x.0))
    }

    /// Adds `bias[D]` to every slice along the last axis of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap();
        if tb.numel() != d || tb.rank() != 1 {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, tb.data());
        }
        let shape = tx.shape().to_vec();
        Ok(self.binary(x, bias, shape, data, Op::AddBias(x.0, bias.0)))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.binary(a, b, vec![m, n], out, Op::Bmm { a: a.0, b: b.0, batch: 1, m, k, n, trans_b: false }))
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]`, or with `b[B×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || {
            Error::dim(
                "bmm",
                format!("cannot multiply {:?} by {:?} (trans_b={trans_b})", ta.shape(), tb.shape()),
            )
        };
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bk, n) = if trans_b { (tb.shape()[2], tb.shape()[1]) } else { (tb.shape()[1], tb.shape()[2]) };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.binary(a, b, vec![batch, m, n], out, Op::Bmm { a: a.0, b: b.0, batch, m, k, n, trans_b }))
    }

    /// `x[..., in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / inner;
        let x2 = self.reshape(x, &[rows, inner])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// Softmax over the last axis, using max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.unary(x, shape, data, Op::Softmax(x.0))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("gain {:?}/bias {:?} vs input {:?}", tg.shape(), tb.shape(), tx.shape()),
            ));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(x.0) || self.tracked(gamma.0) || self.tracked(beta.0);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, tracked))
    }

    /// Batch normalization of `x[B×C×H×W]` per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into `stats`
    /// with the given momentum (unbiased variance for the running estimate).
    /// Eval mode normalizes with `stats` and leaves it untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() != 4 {
            return Err(Error::dim("batch_norm", format!("expected B×C×H×W input, got {:?}", tx.shape())));
        }
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if tg.numel() != c || tb.numel() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("{c} channels but gain {:?}, bias {:?}, stats {}", tg.shape(), tb.shape(), stats.mean.len()),
            ));
        }
        let hw = h * w;
        let count = b * hw;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::DegenerateVariance(count));
        }
        let xd = tx.data();
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mean = s / count as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    v += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .map(|x| (x - mean) * (x - mean))
                        .sum::<f64>();
                }
                let biased = v / count as f64;
                let unbiased = v / (count - 1) as f64;
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
                (mean, biased)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            means[ch] = mean;
            inv_std[ch] = 1.0 / (var + eps).sqrt();
        }
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (g, bt) = (tg.data()[ch], tb.data()[ch]);
                for i in base..base + hw {
                    let hv = (xd[i] - means[ch]) * inv_std[ch];
                    xhat[i] = hv;
                    out[i] = g * hv + bt;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(x.0) || self.tracked(gamma.0) || self.tracked(beta.0);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train }, tracked))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, stream: &mut DropoutStream, mode: Mode) -> Var {
        if mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let mut keep = vec![false; t.numel()];
        stream.mask(p, &mut keep);
        let scale = 1.0 / (1.0 - p);
        let data = t.data().iter().zip(&keep).map(|(&v, &k)| if k { v * scale } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.unary(x, shape, data, Op::Dropout { x: x.0, keep, scale })
    }

    /// 2-D convolution (cross-correlation) of `x[B×C×H×W]` with `w[F×C×k×k]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", tx.shape(), tw.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (batch, channels, height, width) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (filters, kernel) = (tw.shape()[0], tw.shape()[2]);
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?} (pad {pad})", tw.shape(), tx.shape()),
            ));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom { batch, channels, height, width, filters, kernel, stride, pad, out_h, out_w };
        let (pk, p) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; batch * pk * p];
        let mut out = vec![0.0; batch * filters * p];
        let in_sz = channels * height * width;
        for bi in 0..batch {
            let cb = &mut cols[bi * pk * p..(bi + 1) * pk * p];
            im2col(&tx.data()[bi * in_sz..(bi + 1) * in_sz], &geom, cb);
            gemm(filters, pk, p, tw.data(), false, cb, false, &mut out[bi * filters * p..(bi + 1) * filters * p], false);
        }
        Ok(self.binary(x, w, vec![batch, filters, out_h, out_w], out, Op::Conv2d { x: x.0, w: w.0, cols, geom }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", t.shape())));
        }
        if t.shape() == shape {
            return Ok(x);
        }
        let data = t.data().to_vec();
        Ok(self.unary(x, shape.to_vec(), data, Op::Reshape(x.0)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("{axes:?} is not a permutation of {:?}", t.shape())));
        }
        let map = permuted_index_map(t.shape(), axes);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let shape = axes.iter().map(|&a| t.shape()[a]).collect();
        Ok(self.unary(x, shape, data, Op::Permute { x: x.0, axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::dim("transpose", "need at least two axes"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        let base = first.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || s.iter().enumerate().any(|(d, &v)| d != axis && v != base[d]) {
                return Err(Error::dim("concat", format!("{:?} vs {:?} along axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|p| self.tracked(p.0));
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }, tracked))
    }

    /// Gathers entries along the last axis: `out[..., j] = x[..., idx[j]]`.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if idx.is_empty() || idx.iter().any(|&i| i >= d) {
            return Err(Error::dim("select_last", format!("indices {idx:?} out of range for {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(t.numel() / d * idx.len());
        for row in t.data().chunks(d) {
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        Ok(self.unary(x, shape, data, Op::SelectLast { x: x.0, idx: idx.to_vec() }))
    }

    /// Gathers rows of a 2-D tensor.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::dim("index_rows", format!("rows {rows:?} invalid for {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        Ok(self.unary(x, vec![rows.len(), d], data, Op::IndexRows { x: x.0, rows: rows.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, vec![1], vec![s], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σᵢ weights[i] · (−log softmax(logits[i])[targets[i]])` for `logits[R×K]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || targets.len() != t.shape()[0] || weights.len() != t.shape()[0] {
            return Err(Error::dim(
                "cross_entropy_with_logits",
                format!("logits {:?} with {} targets / {} weights", t.shape(), targets.len(), weights.len()),
            ));
        }
        let k = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::dim("cross_entropy_with_logits", format!("class {bad} out of range for {k} logits")));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[targets[r]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let op = Op::CrossEntropy { logits: logits.0, probs, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.unary(logits, vec![1], vec![total], op))
    }

    /// `Σ |a − b|`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l1_loss", ta, tb)?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        Ok(self.binary(a, b, vec![1], vec![s], Op::L1 { a: a.0, b: b.0 }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// `requires_grad` leaf in its ancestry; repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract("backward", format!("loss must be scalar, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.value.requires_grad) {
                match &mut node.value.grad {
                    Some(existing) => add_into(existing, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let out = nodes[i].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].tracked {
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
                f(slot);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..d.len()).for_each(|e| d[e] += g[e] * vb[e]));
                acc(*b, &mut |d| (0..d.len()).for_each(|e| d[e] += g[e] * va[e]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| (0..d.len()).for_each(|e| d[e] += g[e] / vb[e]));
                acc(*b, &mut |d| (0..d.len()).for_each(|e| d[e] -= g[e] * va[e] / (vb[e] * vb[e])));
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(nodes[i].op, Op::Maximum(..));
                let (va, vb) = (val(*a), val(*b));
                let pick_a = |e: usize| if is_max { va[e] >= vb[e] } else { va[e] <= vb[e] };
                acc(*a, &mut |d| (0..d.len()).filter(|&e| pick_a(e)).for_each(|e| d[e] += g[e]));
                acc(*b, &mut |d| (0..d.len()).filter(|&e| !pick_a(e)).for_each(|e| d[e] += g[e]));
            }
            Op::Scale(x, f) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = nodes[*b].value.numel();
                acc(*b, &mut |d| g.chunks(n).for_each(|row| add_into(d, row)));
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                for bi in 0..*batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &va[bi * m * k..(bi + 1) * m * k];
                    let bb = &vb[bi * k * n..(bi + 1) * k * n];
                    acc(*a, &mut |d| {
                        let da = &mut d[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm(m, n, k, gc, false, bb, false, da, true);
                        } else {
                            gemm(m, n, k, gc, false, bb, true, da, true);
                        }
                    });
                    acc(*b, &mut |d| {
                        let db = &mut d[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gc, true, ab, false, db, true);
                        } else {
                            gemm(k, m, n, ab, true, gc, false, db, true);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| (0..d.len()).filter(|&e| vx[e] > 0.0).for_each(|e| d[e] += g[e]));
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| (0..d.len()).for_each(|e| d[e] += g[e] * out[e] * (1.0 - out[e]))),
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|e| {
                        if vx[e] > 0.0 {
                            d[e] += g[e]
                        } else if vx[e] < 0.0 {
                            d[e] -= g[e]
                        }
                    })
                });
            }
            Op::Softmax(x) => {
                let dim = *nodes[i].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(dim).zip(out.chunks(dim)).zip(g.chunks(dim)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..dim {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let dim = nodes[*gamma].value.numel();
                let gv = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        (0..dim).for_each(|j| d[j] += gr[j] * hr[j]);
                    }
                });
                acc(*beta, &mut |d| g.chunks(dim).for_each(|gr| add_into(d, gr)));
                acc(*x, &mut |d| {
                    let nd = dim as f64;
                    for r in 0..inv_std.len() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            d[r * dim + j] += inv_std[r] / nd * (nd * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = nodes[*x].value.shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gv = val(*gamma);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for e in base..base + hw {
                            dg[ch] += g[e] * xhat[e];
                            db[ch] += g[e];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &dg));
                acc(*beta, &mut |d| add_into(d, &db));
                acc(*x, &mut |d| {
                    let n = (b * hw) as f64;
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for e in base..base + hw {
                                d[e] += if *train {
                                    gv[ch] * inv_std[ch] / n * (n * g[e] - db[ch] - xhat[e] * dg[ch])
                                } else {
                                    gv[ch] * inv_std[ch] * g[e]
                                };
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                acc(*x, &mut |d| (0..d.len()).filter(|&e| keep[e]).for_each(|e| d[e] += g[e] * scale));
            }
            Op::Conv2d { x, w, cols, geom } => {
                let (pk, p, f) = (geom.patch(), geom.positions(), geom.filters);
                let wv = val(*w);
                acc(*w, &mut |d| {
                    for bi in 0..geom.batch {
                        let gb = &g[bi * f * p..(bi + 1) * f * p];
                        gemm(f, p, pk, gb, false, &cols[bi * pk * p..(bi + 1) * pk * p], true, d, true);
                    }
                });
                let in_sz = geom.channels * geom.height * geom.width;
                acc(*x, &mut |d| {
                    let mut dcols = vec![0.0; pk * p];
                    for bi in 0..geom.batch {
                        let gb = &g[bi * f * p..(bi + 1) * f * p];
                        gemm(pk, f, p, wv, true, gb, false, &mut dcols, false);
                        col2im(&dcols, geom, &mut d[bi * in_sz..(bi + 1) * in_sz]);
                    }
                });
            }
            Op::Permute { x, axes } => {
                let map = permuted_index_map(nodes[*x].value.shape(), axes);
                acc(*x, &mut |d| map.iter().zip(g).for_each(|(&src, gv)| d[src] += gv));
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p].value.shape()[*axis] * inner;
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SelectLast { x, idx } => {
                let dim = *nodes[*x].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(dim).zip(g.chunks(idx.len())) {
                        idx.iter().zip(gr).for_each(|(&j, gv)| dr[j] += gv);
                    }
                });
            }
            Op::IndexRows { x, rows } => {
                let dim = nodes[*x].value.shape()[1];
                acc(*x, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * dim..(r + 1) * dim], &g[k * dim..(k + 1) * dim]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy { logits, probs, targets, weights } => {
                let k = nodes[*logits].value.shape()[1];
                acc(*logits, &mut |d| {
                    for (r, (dr, pr)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        let s = g[0] * weights[r];
                        for j in 0..k {
                            dr[j] += s * pr[j];
                        }
                        dr[targets[r]] -= s;
                    }
                });
            }
            Op::L1 { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let sign = |e: usize| {
                    let diff = va[e] - vb[e];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |d| (0..d.len()).for_each(|e| d[e] += g[0] * sign(e)));
                acc(*b, &mut |d| (0..d.len()).for_each(|e| d[e] -= g[0] * sign(e)));
            }
        }
    }
}
