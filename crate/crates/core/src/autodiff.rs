//! Reverse-mode automatic differentiation over a per-step compute graph.
//!
//! A [`Graph`] records every operation applied since its creation. Nodes are
//! appended in forward order, so walking the node list backwards visits them
//! in reverse topological order. Gradients accumulate (`+=`) when a tensor
//! feeds several consumers; the caller starts a fresh graph for every
//! training step and zeroes nothing.
//!
//! Values are checked finite after every forward op and after backward;
//! NaN or Inf anywhere is an error, never a silent poison.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{check_finite, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Train applies dropout masks and batch statistics; Infer is deterministic
/// and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    SumAll { x: TensorId },
    Relu { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    Reshape { x: TensorId },
    ConcatLast { a: TensorId, b: TensorId, ca: usize, cb: usize },
    Matmul { a: TensorId, b: TensorId },
    Dense { x: TensorId, w: TensorId, b: TensorId },
    Conv2d {
        x: TensorId,
        k: TensorId,
        b: TensorId,
        /// Input in padded coordinates when padding was Same; None for Valid.
        padded: Option<Vec<f64>>,
        pad_top: usize,
        pad_left: usize,
    },
    Deconv2d { x: TensorId, k: TensorId, b: TensorId, stride: usize },
    MaxPool2 { x: TensorId, argmax: Vec<usize> },
    Dropout { x: TensorId, multipliers: Vec<f64> },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train_stats: bool,
    },
    CrossEntropy { logits: TensorId, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits a shape into (batch, height, width, channels), treating rank-3
/// tensors as a batch of one.
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2])),
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        _ => Err(Error::dim(op, format!("expected rank 3 or 4, got {shape:?}"))),
    }
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// aᵀ·g for a (m,k), g (m,n) -> (k,n).
fn mat_mul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &gv) in orow.iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
    out
}

/// g·bᵀ for g (m,n), b (k,n) -> (m,k).
fn mat_mul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, ov) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *ov = s;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        value.check_finite("leaf")?;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            is_leaf: true,
            grad: None,
        });
        Ok(id)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<TensorId> {
        value.check_finite(name)?;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_leaf: false,
            grad: None,
        });
        Ok(id)
    }

    // ── elementwise and reductions ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rq = self.requires(a) || self.requires(b);
        self.push(value, Op::Add { a, b }, rq, "add")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rq = self.requires(a) || self.requires(b);
        self.push(value, Op::Mul { a, b }, rq, "mul")
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rq = self.requires(x);
        self.push(value, Op::Scale { x, c }, rq, "scale")
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let rq = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rq, "sum_all")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rq = self.requires(x);
        self.push(value, Op::Relu { x }, rq, "relu")
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..k {
                    max = max.max(xd[base + a * inner]);
                }
                let mut denom = 0.0;
                for a in 0..k {
                    let e = (xd[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    denom += e;
                }
                for a in 0..k {
                    out[base + a * inner] /= denom;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(x);
        self.push(value, Op::Softmax { x, axis }, rq, "softmax")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let rq = self.requires(x);
        self.push(value, Op::Reshape { x }, rq, "reshape")
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let ca = sa[sa.len() - 1];
        let cb = sb[sb.len() - 1];
        let rows = self.data(a).len() / ca;
        let mut out = vec![0.0; rows * (ca + cb)];
        {
            let da = self.data(a);
            let db = self.data(b);
            for r in 0..rows {
                out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&da[r * ca..(r + 1) * ca]);
                out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&db[r * cb..(r + 1) * cb]);
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(a) || self.requires(b);
        self.push(value, Op::ConcatLast { a, b, ca, cb }, rq, "concat_last")
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mat_mul(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rq = self.requires(a) || self.requires(b);
        self.push(value, Op::Matmul { a, b }, rq, "matmul")
    }

    /// Fully connected layer: x (N,F) or (F), w (F,M), b (M).
    pub fn dense(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let (rows, f) = match sx.len() {
            1 => (1, sx[0]),
            2 => (sx[0], sx[1]),
            _ => return Err(Error::dim("dense", format!("input rank {sx:?}"))),
        };
        if sw.len() != 2 || sw[0] != f || sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::dim("dense", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let m = sw[1];
        let mut data = mat_mul(self.data(x), self.data(w), rows, f, m);
        let bias = self.data(b);
        for row in data.chunks_exact_mut(m) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let shape = if sx.len() == 1 { vec![m] } else { vec![rows, m] };
        let value = Tensor::new(shape, data)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, Op::Dense { x, w, b }, rq, "dense")
    }

    // ── image ops ───────────────────────────────────────────────────────

    /// Stride-1 cross-correlation. Kernel layout (kh, kw, Cin, Cout),
    /// bias (Cout). Input rank 3 (H,W,C) or 4 (N,H,W,C).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        b: TensorId,
        padding: Padding,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let (n, h, w, cin) = image_dims(&sx, "conv2d")?;
        if sk.len() != 4 || sk[2] != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {sk:?} against input {sx:?}"),
            ));
        }
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} against kernel {sk:?}", self.shape(b)),
            ));
        }
        let (pad_top, pad_left, padded) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                (0, 0, None)
            }
            Padding::Same => {
                let pt = (kh - 1) / 2;
                let pl = (kw - 1) / 2;
                let padded = kernels::pad_spatial(
                    self.data(x),
                    n,
                    h,
                    w,
                    cin,
                    pt,
                    kh - 1 - pt,
                    pl,
                    kw - 1 - pl,
                );
                (pt, pl, Some(padded))
            }
        };
        let (hp, wp) = if padded.is_some() {
            (h + kh - 1, w + kw - 1)
        } else {
            (h, w)
        };
        let input = padded.as_deref().unwrap_or_else(|| self.data(x));
        let out =
            kernels::conv_forward(input, n, hp, wp, cin, self.data(k), kh, kw, cout, self.data(b));
        let (ho, wo) = (hp - kh + 1, wp - kw + 1);
        let shape = if sx.len() == 3 {
            vec![ho, wo, cout]
        } else {
            vec![n, ho, wo, cout]
        };
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(x) || self.requires(k) || self.requires(b);
        self.push(
            value,
            Op::Conv2d { x, k, b, padded, pad_top, pad_left },
            rq,
            "conv2d",
        )
    }

    /// Transposed convolution. Kernel layout (kh, kw, Cout, Cin), bias (Cout).
    /// Supported configurations: 2x2 kernel with stride 2 (block upsampling),
    /// or kh x 1 kernel with stride 1 (boundary deconvolution). Output
    /// spatial size is (H-1)*stride + kh.
    pub fn deconv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        b: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let (n, h, w, cin) = image_dims(&sx, "deconv2d")?;
        if sk.len() != 4 || sk[3] != cin {
            return Err(Error::dim(
                "deconv2d",
                format!("kernel {sk:?} against input {sx:?}"),
            ));
        }
        let (kh, kw, cout) = (sk[0], sk[1], sk[2]);
        let block_upsample = kh == 2 && kw == 2 && stride == 2;
        let boundary = kw == 1 && stride == 1;
        if !block_upsample && !boundary {
            return Err(Error::Config(format!(
                "unsupported deconv2d configuration: kernel {kh}x{kw}, stride {stride}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "deconv2d",
                format!("bias {:?} against kernel {sk:?}", self.shape(b)),
            ));
        }
        let out = kernels::deconv_forward(
            self.data(x),
            n,
            h,
            w,
            cin,
            self.data(k),
            kh,
            kw,
            cout,
            self.data(b),
            stride,
        );
        let (ho, wo) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let shape = if sx.len() == 3 {
            vec![ho, wo, cout]
        } else {
            vec![n, ho, wo, cout]
        };
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(x) || self.requires(k) || self.requires(b);
        self.push(value, Op::Deconv2d { x, k, b, stride }, rq, "deconv2d")
    }

    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let (n, h, w, c) = image_dims(&sx, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "maxpool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.data(x), n, h, w, c);
        let shape = if sx.len() == 3 {
            vec![h / 2, w / 2, c]
        } else {
            vec![n, h / 2, w / 2, c]
        };
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(x);
        self.push(value, Op::MaxPool2 { x, argmax }, rq, "maxpool2")
    }

    /// Inverted dropout. In Infer mode, or with rate 0, this is exactly the
    /// identity: the input id is returned and no node is created.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        if phase == Phase::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let multipliers: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&multipliers)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rq = self.requires(x);
        self.push(value, Op::Dropout { x, multipliers }, rq, "dropout")
    }

    /// Batch normalization over all non-channel axes (channel = last axis).
    /// Train mode normalizes with batch statistics and folds them into the
    /// running buffers: running = momentum*running + (1-momentum)*batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        phase: Phase,
        momentum: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::dim("batchnorm", "rank 0 input".to_string()))?;
        let m = self.data(x).len() / c;
        if m == 0 {
            return Err(Error::dim("batchnorm", "zero-size batch".to_string()));
        }
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::dim(
                "batchnorm",
                format!("per-channel params must have length {c}"),
            ));
        }
        let (mean, var) = match phase {
            Phase::Train => {
                let xd = self.data(x);
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for (mv, &v) in mean.iter_mut().zip(row) {
                        *mv += v;
                    }
                }
                for mv in mean.iter_mut() {
                    *mv /= m as f64;
                }
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for (ch, vv) in var.iter_mut().enumerate() {
                        let d = row[ch] - mean[ch];
                        *vv += d * d;
                    }
                }
                for vv in var.iter_mut() {
                    *vv /= m as f64;
                }
                for (ch, (rm, rv)) in running_mean
                    .iter_mut()
                    .zip(running_var.iter_mut())
                    .enumerate()
                {
                    *rm = momentum * *rm + (1.0 - momentum) * mean[ch];
                    *rv = momentum * *rv + (1.0 - momentum) * var[ch];
                }
                (mean, var)
            }
            Phase::Infer => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let xd = self.data(x);
        let mut x_hat = vec![0.0; xd.len()];
        for (xrow, hrow) in xd.chunks_exact(c).zip(x_hat.chunks_exact_mut(c)) {
            for (ch, (hv, &xv)) in hrow.iter_mut().zip(xrow).enumerate() {
                *hv = (xv - mean[ch]) * inv_std[ch];
            }
        }
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        for (orow, hrow) in out.chunks_exact_mut(c).zip(x_hat.chunks_exact(c)) {
            for (ch, (ov, &hv)) in orow.iter_mut().zip(hrow).enumerate() {
                *ov = gd[ch] * hv + bd[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train_stats: phase == Phase::Train,
            },
            rq,
            "batchnorm",
        )
    }

    /// Mean categorical cross-entropy between logits and one-hot targets,
    /// fused with log-softmax over the last axis. Works for image-level
    /// (N,K) and per-pixel (N,H,W,K) labels alike: every leading position is
    /// one site and the loss is the mean over all sites.
    pub fn cross_entropy(&mut self, logits: TensorId, target: &Tensor) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} vs target {:?}", target.shape()),
            ));
        }
        let k = *shape.last().unwrap();
        let sites = target.numel() / k;
        let td = target.data();
        for (row_idx, trow) in td.chunks_exact(k).enumerate() {
            let mut sum = 0.0;
            for &t in trow {
                if t != 0.0 && t != 1.0 {
                    return Err(Error::Validation(format!(
                        "target row {row_idx} is not one-hot (entry {t})"
                    )));
                }
                sum += t;
            }
            if sum != 1.0 {
                return Err(Error::Validation(format!(
                    "target row {row_idx} is not one-hot (sum {sum})"
                )));
            }
        }
        let zd = self.data(logits);
        let mut loss = 0.0;
        for (zrow, trow) in zd.chunks_exact(k).zip(td.chunks_exact(k)) {
            let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zrow.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (&z, &t) in zrow.iter().zip(trow) {
                if t == 1.0 {
                    loss += lse - z;
                }
            }
        }
        loss /= sites as f64;
        let rq = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target: target.clone() },
            rq,
            "cross_entropy",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contribution) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, id: TensorId, contribution: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contribution) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Runs reverse accumulation from a scalar loss, visiting nodes in exact
    /// reverse order of their creation. Consumes the recorded tape: call it
    /// once per forward pass. Afterwards every requires_grad leaf has a
    /// populated (possibly zero) gradient buffer.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.step_backward(&op, &g)?;
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.is_leaf && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                check_finite(g, &format!("gradient of node {i}"))?;
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate_owned(a, da);
                }
                if self.requires(b) {
                    let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(gv, av)| gv * av).collect();
                    self.accumulate_owned(b, db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.accumulate_owned(*x, dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.data(*x).len()];
                self.accumulate_owned(*x, dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate_owned(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                // Output value of softmax is needed; recompute row norm from
                // the input is avoidable because the output node still holds
                // its value: it is the node whose op we are processing, but we
                // only have the op here. Recompute from the input instead.
                let shape = self.shape(x).to_vec();
                let k = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let xd = self.data(x);
                let mut dx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * k * inner + ii;
                        let mut max = f64::NEG_INFINITY;
                        for a in 0..k {
                            max = max.max(xd[base + a * inner]);
                        }
                        let mut denom = 0.0;
                        let mut s = vec![0.0; k];
                        for a in 0..k {
                            let e = (xd[base + a * inner] - max).exp();
                            s[a] = e;
                            denom += e;
                        }
                        for sv in s.iter_mut() {
                            *sv /= denom;
                        }
                        let mut dot = 0.0;
                        for a in 0..k {
                            dot += g[base + a * inner] * s[a];
                        }
                        for a in 0..k {
                            let idx = base + a * inner;
                            dx[idx] = s[a] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate_owned(x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g);
            }
            Op::ConcatLast { a, b, ca, cb } => {
                let (a, b, ca, cb) = (*a, *b, *ca, *cb);
                let rows = g.len() / (ca + cb);
                if self.requires(a) {
                    let mut da = vec![0.0; rows * ca];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accumulate_owned(a, da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accumulate_owned(b, db);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires(a) {
                    let da = mat_mul_a_bt(g, self.data(b), m, n, k);
                    self.accumulate_owned(a, da);
                }
                if self.requires(b) {
                    let db = mat_mul_at_b(self.data(a), g, m, k, n);
                    self.accumulate_owned(b, db);
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let sx = self.shape(x).to_vec();
                let (rows, f) = if sx.len() == 1 { (1, sx[0]) } else { (sx[0], sx[1]) };
                let m = self.shape(w)[1];
                if self.requires(x) {
                    let dx = mat_mul_a_bt(g, self.data(w), rows, m, f);
                    self.accumulate_owned(x, dx);
                }
                if self.requires(w) {
                    let dw = mat_mul_at_b(self.data(x), g, rows, f, m);
                    self.accumulate_owned(w, dw);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; m];
                    for grow in g.chunks_exact(m) {
                        for (dv, &gv) in db.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                    self.accumulate_owned(b, db);
                }
            }
            Op::Conv2d { x, k, b, padded, pad_top, pad_left } => {
                let (x, k, b) = (*x, *k, *b);
                let (pad_top, pad_left) = (*pad_top, *pad_left);
                let sk = self.shape(k).to_vec();
                let (kh, kw, cin, cout) = (sk[0], sk[1], sk[2], sk[3]);
                let (n, h, w, _) = image_dims(self.shape(x), "conv2d")?;
                let (hp, wp) = if padded.is_some() {
                    (h + kh - 1, w + kw - 1)
                } else {
                    (h, w)
                };
                let (ho, wo) = (hp - kh + 1, wp - kw + 1);
                if self.requires(k) || self.requires(b) {
                    let input: &[f64] = padded.as_deref().unwrap_or_else(|| self.data(x));
                    let (dk, db) =
                        kernels::conv_backward_kernel(g, input, n, hp, wp, cin, kh, kw, cout);
                    self.accumulate_owned(k, dk);
                    self.accumulate_owned(b, db);
                }
                if self.requires(x) {
                    let dxp = kernels::conv_backward_data(
                        g,
                        n,
                        ho,
                        wo,
                        cout,
                        self.data(k),
                        kh,
                        kw,
                        cin,
                        hp,
                        wp,
                    );
                    let dx = if hp == h && wp == w {
                        dxp
                    } else {
                        kernels::crop_spatial(&dxp, n, hp, wp, cin, pad_top, pad_left, h, w)
                    };
                    self.accumulate_owned(x, dx);
                }
            }
            Op::Deconv2d { x, k, b, stride } => {
                let (x, k, b, stride) = (*x, *k, *b, *stride);
                let sk = self.shape(k).to_vec();
                let (kh, kw, cout, cin) = (sk[0], sk[1], sk[2], sk[3]);
                let (n, h, w, _) = image_dims(self.shape(x), "deconv2d")?;
                if self.requires(x) {
                    let dx = kernels::deconv_backward_data(
                        g,
                        n,
                        h,
                        w,
                        cin,
                        self.data(k),
                        kh,
                        kw,
                        cout,
                        stride,
                    );
                    self.accumulate_owned(x, dx);
                }
                if self.requires(k) || self.requires(b) {
                    let (dk, db) = kernels::deconv_backward_kernel(
                        g,
                        self.data(x),
                        n,
                        h,
                        w,
                        cin,
                        kh,
                        kw,
                        cout,
                        stride,
                    );
                    self.accumulate_owned(k, dk);
                    self.accumulate_owned(b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut dx = vec![0.0; self.data(x).len()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    dx[src] += g[out_idx];
                }
                self.accumulate_owned(x, dx);
            }
            Op::Dropout { x, multipliers } => {
                let dx: Vec<f64> = g.iter().zip(multipliers).map(|(gv, mv)| gv * mv).collect();
                self.accumulate_owned(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train_stats } => {
                let (x, gamma, beta, train_stats) = (*x, *gamma, *beta, *train_stats);
                let c = inv_std.len();
                let m = x_hat.len() / c;
                let mut dbeta = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                for (grow, hrow) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
                    for ch in 0..c {
                        dbeta[ch] += grow[ch];
                        dgamma[ch] += grow[ch] * hrow[ch];
                    }
                }
                if self.requires(x) {
                    let gd = self.data(gamma);
                    let mut dx = vec![0.0; x_hat.len()];
                    if train_stats {
                        let mf = m as f64;
                        for ((dxrow, grow), hrow) in dx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(x_hat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                dxrow[ch] = gd[ch] * inv_std[ch] / mf
                                    * (mf * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]);
                            }
                        }
                    } else {
                        for (dxrow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                dxrow[ch] = gd[ch] * inv_std[ch] * grow[ch];
                            }
                        }
                    }
                    self.accumulate_owned(x, dx);
                }
                self.accumulate_owned(gamma, dgamma);
                self.accumulate_owned(beta, dbeta);
            }
            Op::CrossEntropy { logits, target } => {
                let logits = *logits;
                let zd = self.data(logits);
                let k = *self.shape(logits).last().unwrap();
                let sites = zd.len() / k;
                let gl = g[0] / sites as f64;
                let mut dz = vec![0.0; zd.len()];
                for ((zrow, trow), dzrow) in zd
                    .chunks_exact(k)
                    .zip(target.data().chunks_exact(k))
                    .zip(dz.chunks_exact_mut(k))
                {
                    let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = zrow.iter().map(|z| (z - max).exp()).sum();
                    for ((dv, &z), &t) in dzrow.iter_mut().zip(zrow).zip(trow) {
                        let p = (z - max).exp() / denom;
                        *dv = gl * (p - t);
                    }
                }
                self.accumulate_owned(logits, dz);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let eye = g
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false)
            .unwrap();
        let x = g
            .leaf(Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.0, 5.0]).unwrap(), false)
            .unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_hand_checked() {
        let mut g = Graph::new();
        let a = g
            .leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let b = g
            .leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(), false)
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = g.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_and_softmax_basics() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), false)
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let z = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false).unwrap();
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut r = rng(11);
        let t = random_tensor(vec![7, 9, 2], &mut r);
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false).unwrap();
        let s = g.softmax(x, 2).unwrap();
        for row in g.value(s).data().chunks_exact(2) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        }
        // Adding a constant to all logits at a site leaves the output alone.
        let shifted: Vec<f64> = t.data().iter().map(|v| v + 13.25).collect();
        let mut g2 = Graph::new();
        let x2 = g2
            .leaf(Tensor::new(vec![7, 9, 2], shifted).unwrap(), false)
            .unwrap();
        let s2 = g2.softmax(x2, 2).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g2.value(s2).data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r1 = rng(5);
        let mut r2 = rng(5);
        let run = |r: &mut ChaCha8Rng| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(random_tensor(vec![4, 6, 2], r), false).unwrap();
            let k = g.leaf(random_tensor(vec![3, 3, 2, 3], r), false).unwrap();
            let b = g.leaf(Tensor::zeros(vec![3]), false).unwrap();
            let c = g.conv2d(x, k, b, Padding::Same).unwrap();
            let c = g.relu(c).unwrap();
            g.value(c).data().to_vec()
        };
        let a = run(&mut r1);
        let b = run(&mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn backward_of_sum_equals_accumulated_per_output_backwards() {
        let mut r = rng(23);
        let xt = random_tensor(vec![2, 3], &mut r);
        let wt = random_tensor(vec![3, 2], &mut r);
        let bt = random_tensor(vec![2], &mut r);

        // Single backward through the summed output.
        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true).unwrap();
        let w = g.leaf(wt.clone(), false).unwrap();
        let b = g.leaf(bt.clone(), false).unwrap();
        let y = g.dense(x, w, b).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let combined = g.grad(x).unwrap().to_vec();

        // Accumulate per-output backward passes (select each output with a
        // one-hot weight and sum the resulting gradients).
        let mut acc = vec![0.0; combined.len()];
        for out_idx in 0..4 {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone(), true).unwrap();
            let w = g.leaf(wt.clone(), false).unwrap();
            let b = g.leaf(bt.clone(), false).unwrap();
            let y = g.dense(x, w, b).unwrap();
            let mut sel = vec![0.0; 4];
            sel[out_idx] = 1.0;
            let sel = g.leaf(Tensor::new(vec![2, 2], sel).unwrap(), false).unwrap();
            let picked = g.mul(y, sel).unwrap();
            let loss = g.sum_all(picked).unwrap();
            g.backward(loss).unwrap();
            for (a, v) in acc.iter_mut().zip(g.grad(x).unwrap()) {
                *a += v;
            }
        }
        for (a, c) in acc.iter().zip(&combined) {
            assert!((a - c).abs() <= 1e-12, "{a} vs {c}");
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut r = rng(3);
        let t = random_tensor(vec![20], &mut r);
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false).unwrap();
        // rate 0 in train mode: identity
        let y = g.dropout(x, 0.0, Phase::Train, &mut r).unwrap();
        assert_eq!(y, x);
        // infer mode: identity regardless of rate
        let z = g.dropout(x, 0.5, Phase::Infer, &mut r).unwrap();
        assert_eq!(z, x);
        // bad rate rejected
        assert!(g.dropout(x, 1.0, Phase::Train, &mut r).is_err());
    }

    #[test]
    fn dropout_statistics_match_rate() {
        let mut r = rng(77);
        let n = 100_000;
        let t = Tensor::filled(vec![n], 1.0);
        let mut g = Graph::new();
        let x = g.leaf(t, false).unwrap();
        let y = g.dropout(x, 0.5, Phase::Train, &mut r).unwrap();
        let out = g.value(y).data();
        let survivors: Vec<f64> = out.iter().copied().filter(|v| *v != 0.0).collect();
        let frac = survivors.len() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.01, "survivor fraction {frac}");
        let mean: f64 = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert!((mean - 2.0).abs() <= 0.05, "survivor mean scale {mean}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln2_and_perfect_is_tiny() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap(), false).unwrap();
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = g.cross_entropy(z, &t).unwrap();
        assert!((g.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() <= 1e-6);

        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![1, 2], vec![-20.0, 20.0]).unwrap(), false).unwrap();
        let loss = g.cross_entropy(z, &t).unwrap();
        let bound = 1e-6 + (1.0 - 1e-7f64).ln().abs();
        assert!(g.value(loss).item().unwrap() <= bound);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(vec![1, 2]), false).unwrap();
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(g.cross_entropy(z, &bad), Err(Error::Validation(_))));
        let bad2 = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(g.cross_entropy(z, &bad2), Err(Error::Validation(_))));
    }

    #[test]
    fn maxpool_constant_routes_to_first_window_position() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![2, 2, 1], 4.0), true).unwrap();
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 4, 1]), false).unwrap();
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let mut r = rng(9);
        let t = random_tensor(vec![4, 5, 2], &mut r);
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false).unwrap();
        // 1x1 kernel carrying the identity across 2 channels
        let k = g
            .leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false)
            .unwrap();
        let b = g.leaf(Tensor::zeros(vec![2]), false).unwrap();
        let y = g.conv2d(x, k, b, Padding::Valid).unwrap();
        assert_eq!(g.value(y).data(), t.data());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 3, 1]), false).unwrap();
        let k = g.leaf(Tensor::zeros(vec![4, 1, 1, 1]), false).unwrap();
        let b = g.leaf(Tensor::zeros(vec![1]), false).unwrap();
        assert!(g.conv2d(x, k, b, Padding::Valid).is_err());
    }

    #[test]
    fn deconv_rejects_unsupported_configuration() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 3, 1]), false).unwrap();
        let k = g.leaf(Tensor::zeros(vec![3, 3, 1, 1]), false).unwrap();
        let b = g.leaf(Tensor::zeros(vec![1]), false).unwrap();
        assert!(matches!(
            g.deconv2d(x, k, b, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batchnorm_normalizes_then_applies_affine() {
        let mut r = rng(31);
        let t = random_tensor(vec![8, 4, 3], &mut r);
        let mut g = Graph::new();
        let x = g.leaf(t, false).unwrap();
        let gamma = g.leaf(Tensor::filled(vec![3], 1.0), false).unwrap();
        let beta = g.leaf(Tensor::zeros(vec![3]), false).unwrap();
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = g
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, Phase::Train, 0.9)
            .unwrap();
        let out = g.value(y).data();
        let m = out.len() / 3;
        for ch in 0..3 {
            let vals: Vec<f64> = out.iter().skip(ch).step_by(3).copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / m as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            assert!(mean.abs() <= 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {ch} var {var}");
        }

        // gamma=2, beta=3 on already-normalized input: mean 3, std 2.
        let normalized = Tensor::new(vec![m, 3], out.to_vec()).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.leaf(normalized, false).unwrap();
        let gamma2 = g2.leaf(Tensor::filled(vec![3], 2.0), false).unwrap();
        let beta2 = g2.leaf(Tensor::filled(vec![3], 3.0), false).unwrap();
        let mut rm2 = vec![0.0; 3];
        let mut rv2 = vec![1.0; 3];
        let y2 = g2
            .batchnorm(x2, gamma2, beta2, &mut rm2, &mut rv2, Phase::Train, 0.9)
            .unwrap();
        let out2 = g2.value(y2).data();
        for ch in 0..3 {
            let vals: Vec<f64> = out2.iter().skip(ch).step_by(3).copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / m as f64;
            let std: f64 =
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64).sqrt();
            assert!((mean - 3.0).abs() <= 1e-6);
            assert!((std - 2.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2], vec![f64::NAN, 1.0]).unwrap();
        assert!(g.leaf(t, false).is_err());
    }
}
