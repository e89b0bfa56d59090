//! A small reverse-mode tape for the detector's forward/backward pass.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse.
//! Only the operations the detector needs are provided. Feature maps are
//! single images laid out `[C, H, W]`; row batches are `[N, D]`.

use crate::error::{Error, Result};
use crate::losses::PointLoss;
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a value recorded on a [`Graph`]. The data lives in the graph;
/// its gradient is populated by [`Graph::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiffValue(usize);

impl DiffValue {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug)]
struct Bilinear {
    idx: [u32; 4],
    w: [f64; 4],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: DiffValue,
        w: DiffValue,
        b: DiffValue,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Relu(DiffValue),
    MaxPool2 {
        x: DiffValue,
        argmax: Vec<u32>,
    },
    Sigmoid(DiffValue),
    GlobalAvgPool(DiffValue),
    Linear {
        x: DiffValue,
        w: DiffValue,
        b: DiffValue,
    },
    Concat {
        parts: Vec<DiffValue>,
    },
    RepeatRows(DiffValue),
    Reshape(DiffValue),
    RoiAlign {
        x: DiffValue,
        // per box, per channel-independent bin: sample positions
        samples: Vec<Bilinear>,
    },
    Reverse {
        x: DiffValue,
        eta: f64,
    },
    Stop,
    Scale {
        x: DiffValue,
        c: f64,
    },
    Add(DiffValue, DiffValue),
    Mul(DiffValue, DiffValue),
    Sum(DiffValue),
    SoftmaxCe {
        logits: DiffValue,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: DiffValue,
        targets: Vec<T>,
        weights: Vec<T>,
        norm: f64,
    },
    LogitBce {
        logits: DiffValue,
        labels: Vec<Option<bool>>,
    },
    PointLoss {
        p: DiffValue,
        losses: Vec<PointLoss>,
        weight: f64,
        norm: f64,
    },
    LogitPointLoss {
        z: DiffValue,
        losses: Vec<PointLoss>,
        weight: f64,
        norm: f64,
    },
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Shape(msg.into()))
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::ZERO; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Rows and columns of a value viewed as a row batch (`[D]` is one row).
fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => shape_err(format!("expected [N, D] or [D], got {shape:?}")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> DiffValue {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        DiffValue(self.nodes.len() - 1)
    }

    fn rg(&self, x: DiffValue) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> DiffValue {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is collected (parameters, test inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> DiffValue {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, x: DiffValue) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn scalar(&self, x: DiffValue) -> f64 {
        self.nodes[x.0].value.data[0].f64()
    }

    /// Gradient of the last `backward` root w.r.t. `x`; `None` when no
    /// gradient reached it.
    pub fn grad(&self, x: DiffValue) -> Option<&[T]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn requires_grad(&self, x: DiffValue) -> bool {
        self.rg(x)
    }

    // ---- feature-map operations -------------------------------------------------

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: DiffValue, w: DiffValue, b: DiffValue, stride: usize, pad: usize) -> Result<DiffValue> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape.clone();
        let [o, wc, kh, kw] = ws[..] else {
            return shape_err(format!("conv weight must be [O, C, k, k], got {ws:?}"));
        };
        if wc != c || kh != kw {
            return shape_err(format!("conv weight {ws:?} vs input channels {c}"));
        }
        if self.value(b).shape != [o] {
            return shape_err(format!("conv bias {:?} vs {o} outputs", self.value(b).shape));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return shape_err(format!("conv input {h}x{wd} too small for kernel {k}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(&self.value(x).data, c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![T::ZERO; o * ho * wo];
        for (oi, row) in out.chunks_mut(ho * wo).enumerate() {
            row.fill(self.value(b).data[oi]);
        }
        gemm(false, false, o, ho * wo, c * k * k, T::ONE, &self.value(w).data, &cols, T::ONE, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[o, ho, wo], out)?,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                kernel: k,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: DiffValue) -> DiffValue {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > T::ZERO { a } else { T::ZERO }).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: DiffValue) -> DiffValue {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| T::ONE / (T::ONE + (-a).exp())).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: DiffValue) -> Result<DiffValue> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return shape_err(format!("cannot pool a {h}x{w} map"));
        }
        let data = &self.value(x).data;
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ci * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, ho, wo], out)?, rg, Op::MaxPool2 { x, argmax }))
    }

    /// `[C, H, W] -> [C]`
    pub fn global_avg_pool(&mut self, x: DiffValue) -> Result<DiffValue> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self.value(x).data.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c], out)?, rg, Op::GlobalAvgPool(x)))
    }

    /// Bilinear ROI alignment: one sample at the centre of each of the
    /// `size x size` bins of every box. Boxes are in input-image pixels and
    /// are mapped onto the map with `scale`. Output `[M, C * size * size]`.
    pub fn roi_align(&mut self, x: DiffValue, boxes: &[[f64; 4]], scale: f64, size: usize) -> Result<DiffValue> {
        let (c, h, w) = self.value(x).chw()?;
        let mut samples = Vec::with_capacity(boxes.len() * size * size);
        for b in boxes {
            if !(b[2] > b[0] && b[3] > b[1]) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidBox(*b));
            }
            let x1 = b[0] * scale - 0.5;
            let y1 = b[1] * scale - 0.5;
            let bw = (b[2] - b[0]) * scale / size as f64;
            let bh = (b[3] - b[1]) * scale / size as f64;
            for i in 0..size {
                for j in 0..size {
                    let sy = (y1 + (i as f64 + 0.5) * bh).clamp(0.0, (h - 1) as f64);
                    let sx = (x1 + (j as f64 + 0.5) * bw).clamp(0.0, (w - 1) as f64);
                    let y0 = (sy.floor() as usize).min(h - 1);
                    let x0 = (sx.floor() as usize).min(w - 1);
                    let y1i = (y0 + 1).min(h - 1);
                    let x1i = (x0 + 1).min(w - 1);
                    let fy = sy - y0 as f64;
                    let fx = sx - x0 as f64;
                    samples.push(Bilinear {
                        idx: [
                            (y0 * w + x0) as u32,
                            (y0 * w + x1i) as u32,
                            (y1i * w + x0) as u32,
                            (y1i * w + x1i) as u32,
                        ],
                        w: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
                    });
                }
            }
        }
        let bins = size * size;
        let data = &self.value(x).data;
        let mut out = vec![T::ZERO; boxes.len() * c * bins];
        for (m, row) in out.chunks_mut(c * bins.max(1)).enumerate().take(boxes.len()) {
            for ci in 0..c {
                let plane = &data[ci * h * w..(ci + 1) * h * w];
                for s in 0..bins {
                    let smp = &samples[m * bins + s];
                    let mut acc = 0.0;
                    for q in 0..4 {
                        acc += smp.w[q] * plane[smp.idx[q] as usize].f64();
                    }
                    row[ci * bins + s] = T::of(acc);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[boxes.len(), c * bins], out)?, rg, Op::RoiAlign { x, samples }))
    }

    // ---- row-batch operations ---------------------------------------------------

    /// `x [N, I] (or [I]) * w^T [I, O] + b -> [N, O]`
    pub fn linear(&mut self, x: DiffValue, w: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (n, i) = rows_cols(&self.value(x).shape)?;
        let ws = self.value(w).shape.clone();
        let [o, wi] = ws[..] else {
            return shape_err(format!("linear weight must be [O, I], got {ws:?}"));
        };
        if wi != i || self.value(b).shape != [o] {
            return shape_err(format!("linear {ws:?} / bias {:?} vs input width {i}", self.value(b).shape));
        }
        let mut out = vec![T::ZERO; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(&self.value(b).data);
        }
        gemm(false, true, n, o, i, T::ONE, &self.value(x).data, &self.value(w).data, T::ONE, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[n, o], out)?, rg, Op::Linear { x, w, b }))
    }

    /// Column-wise concatenation of row batches with equal row counts.
    /// All-`[D]` inputs give a `[sum D]` output.
    pub fn concat(&mut self, parts: &[DiffValue]) -> Result<DiffValue> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| rows_cols(&self.value(*p).shape)).collect::<Result<_>>()?;
        let n = dims[0].0;
        if dims.iter().any(|d| d.0 != n) {
            return shape_err(format!("concat row counts differ: {dims:?}"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &(_, d)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(*p).data[r * d..(r + 1) * d]);
            }
        }
        let flat = parts.iter().all(|p| self.value(*p).shape.len() == 1);
        let shape = if flat { vec![total] } else { vec![n, total] };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_vec(&shape, out)?, rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// `[D] -> [n, D]`
    pub fn repeat_rows(&mut self, x: DiffValue, n: usize) -> Result<DiffValue> {
        let v = self.value(x);
        if v.shape.len() != 1 {
            return shape_err(format!("repeat_rows expects [D], got {:?}", v.shape));
        }
        let d = v.shape[0];
        let data: Vec<T> = (0..n).flat_map(|_| v.data.iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[n, d], data)?, rg, Op::RepeatRows(x)))
    }

    pub fn reshape(&mut self, x: DiffValue, shape: &[usize]) -> Result<DiffValue> {
        let data = self.value(x).data.clone();
        let t = Tensor::from_vec(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    // ---- routing ---------------------------------------------------------------

    /// Identity forward; multiplies the gradient by `-eta` on the way back.
    /// Use [`crate::gradroute::gradient_reverse`] for the checked entry point.
    pub(crate) fn reverse(&mut self, x: DiffValue, eta: f64) -> DiffValue {
        let v = self.value(x).clone();
        let rg = self.rg(x);
        self.push(v, rg, Op::Reverse { x, eta })
    }

    /// Identity forward; nothing flows back.
    pub(crate) fn stop(&mut self, x: DiffValue) -> DiffValue {
        let v = self.value(x).clone();
        self.push(v, false, Op::Stop)
    }

    // ---- arithmetic ------------------------------------------------------------

    pub fn scale(&mut self, x: DiffValue, c: f64) -> DiffValue {
        let v = &self.value(x);
        let ct = T::of(c);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * ct).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return shape_err(format!("add {:?} + {:?}", va.shape, vb.shape));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&p, &q)| p + q).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return shape_err(format!("mul {:?} * {:?}", va.shape, vb.shape));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&p, &q)| p * q).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: DiffValue) -> DiffValue {
        let s = self.value(x).data.iter().map(|v| v.f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Sum(x))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[DiffValue]) -> Result<DiffValue> {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return shape_err("add_all of nothing");
        };
        let mut acc = first;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    // ---- losses ------------------------------------------------------------------

    /// Mean softmax cross-entropy over the rows of `[N, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: DiffValue, labels: &[usize]) -> Result<DiffValue> {
        let (n, c) = rows_cols(&self.value(logits).shape)?;
        if labels.len() != n || n == 0 {
            return shape_err(format!("{} labels for {n} rows", labels.len()));
        }
        let data = &self.value(logits).data;
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index { index: label, len: c });
            }
            let row = &data[r * c..(r + 1) * c];
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            loss -= (e[label] / z).max(f64::MIN_POSITIVE).ln();
            probs.extend(e.iter().map(|v| T::of(v / z)));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of(loss / n as f64)),
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_i weights_i * smooth_l1(pred_i - target_i) / norm` elementwise,
    /// with the unit transition point.
    pub fn smooth_l1(&mut self, pred: DiffValue, targets: &[f64], weights: &[f64], norm: f64) -> Result<DiffValue> {
        let data = &self.value(pred).data;
        if targets.len() != data.len() || weights.len() != data.len() || norm <= 0.0 {
            return shape_err("smooth_l1 targets/weights do not match predictions");
        }
        let mut loss = 0.0;
        for ((v, t), w) in data.iter().zip(targets).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let d = (v.f64() - t).abs();
            loss += w * if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::of(loss / norm)),
            rg,
            Op::SmoothL1 {
                pred,
                targets: targets.iter().map(|&v| T::of(v)).collect(),
                weights: weights.iter().map(|&v| T::of(v)).collect(),
                norm,
            },
        ))
    }

    /// Mean binary cross-entropy on logits over the labelled entries.
    pub fn logit_bce(&mut self, logits: DiffValue, labels: &[Option<bool>]) -> Result<DiffValue> {
        let data = &self.value(logits).data;
        if labels.len() != data.len() {
            return shape_err("logit_bce labels do not match logits");
        }
        let count = labels.iter().filter(|l| l.is_some()).count();
        let mut loss = 0.0;
        for (v, l) in data.iter().zip(labels) {
            if let Some(pos) = l {
                let z = v.f64();
                // log(1 + e^{-|z|}) + max(z, 0) - z * y
                let y = if *pos { 1.0 } else { 0.0 };
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let rg = self.rg(logits);
        let val = if count == 0 { 0.0 } else { loss / count as f64 };
        Ok(self.push(
            Tensor::scalar(T::of(val)),
            rg,
            Op::LogitBce {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `weight * sum_i loss_i(p_i) / norm` over a probability tensor.
    pub fn point_loss(&mut self, p: DiffValue, losses: Vec<PointLoss>, weight: f64, norm: f64) -> Result<DiffValue> {
        let data = &self.value(p).data;
        if losses.len() != data.len() || norm <= 0.0 {
            return shape_err(format!("{} point losses for {} probabilities", losses.len(), data.len()));
        }
        let s: f64 = data.iter().zip(&losses).map(|(v, l)| l.value(v.f64())).sum();
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(T::of(weight * s / norm)),
            rg,
            Op::PointLoss { p, losses, weight, norm },
        ))
    }

    /// Same as [`Graph::point_loss`] applied to `sigmoid(z)`, fused so the
    /// gradient is taken in logit space.
    pub fn logit_point_loss(&mut self, z: DiffValue, losses: Vec<PointLoss>, weight: f64, norm: f64) -> Result<DiffValue> {
        let data = &self.value(z).data;
        if losses.len() != data.len() || norm <= 0.0 {
            return shape_err(format!("{} point losses for {} logits", losses.len(), data.len()));
        }
        let s: f64 = data.iter().zip(&losses).map(|(v, l)| l.value_logit(v.f64())).sum();
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(T::of(weight * s / norm)),
            rg,
            Op::LogitPointLoss { z, losses, weight, norm },
        ))
    }

    // ---- backward -------------------------------------------------------------------

    /// Reverse pass from `root`, seeding its gradient with ones. Gradients from
    /// any previous pass are cleared first.
    pub fn backward(&mut self, root: DiffValue) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        let len = self.nodes[root.0].value.numel();
        self.nodes[root.0].grad = Some(vec![T::ONE; len]);
        for i in (0..=root.0).rev() {
            let (prev, cur) = self.nodes.split_at_mut(i);
            let node = &cur[0];
            let Some(g) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backward_node(prev, node, g);
        }
    }
}

/// Gradient buffer of `id`, created on first use; `None` when the node does
/// not take gradients.
fn slot<T: Real>(prev: &mut [Node<T>], id: DiffValue) -> Option<&mut Vec<T>> {
    let n = &mut prev[id.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(n.grad.get_or_insert_with(|| vec![T::ZERO; len]))
}

fn backward_node<T: Real>(prev: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            kernel,
            stride,
            pad,
            cols,
        } => {
            let (o, ho, wo) = node.value.chw().expect("conv output is a map");
            let hw = ho * wo;
            let (c, h, wd) = prev[x.0].value.chw().expect("conv input is a map");
            let ck = c * kernel * kernel;
            if let Some(gw) = slot(prev, *w) {
                gemm(false, true, o, ck, hw, T::ONE, g, cols, T::ONE, gw);
            }
            if let Some(gb) = slot(prev, *b) {
                for (oi, v) in gb.iter_mut().enumerate() {
                    *v += g[oi * hw..(oi + 1) * hw].iter().copied().sum::<T>();
                }
            }
            if prev[x.0].requires_grad {
                let mut dcols = vec![T::ZERO; ck * hw];
                gemm(true, false, ck, hw, o, T::ONE, &prev[w.0].value.data, g, T::ZERO, &mut dcols);
                let gx = slot(prev, *x).unwrap();
                col2im_add(&dcols, gx, c, h, wd, *kernel, *stride, *pad, ho, wo);
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(prev, *x) {
                for ((d, &y), &gi) in gx.iter_mut().zip(&node.value.data).zip(g) {
                    if y > T::ZERO {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(prev, *x) {
                for ((d, &s), &gi) in gx.iter_mut().zip(&node.value.data).zip(g) {
                    *d += gi * s * (T::ONE - s);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = slot(prev, *x) {
                for (&i, &gi) in argmax.iter().zip(g) {
                    gx[i as usize] += gi;
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let (_, h, w) = prev[x.0].value.chw().expect("pool input is a map");
            let inv = T::of(1.0 / (h * w) as f64);
            if let Some(gx) = slot(prev, *x) {
                for (plane, &gi) in gx.chunks_mut(h * w).zip(g) {
                    for v in plane {
                        *v += gi * inv;
                    }
                }
            }
        }
        Op::RoiAlign { x, samples } => {
            let (c, h, w) = prev[x.0].value.chw().expect("roi input is a map");
            let m = node.value.shape[0];
            if m == 0 {
                return;
            }
            let bins = samples.len() / m;
            if let Some(gx) = slot(prev, *x) {
                for (mi, row) in g.chunks(c * bins).enumerate() {
                    for ci in 0..c {
                        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                        for s in 0..bins {
                            let gi = row[ci * bins + s].f64();
                            let smp = &samples[mi * bins + s];
                            for q in 0..4 {
                                plane[smp.idx[q] as usize] += T::of(smp.w[q] * gi);
                            }
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n, i) = rows_cols(&prev[x.0].value.shape).expect("linear input");
            let o = prev[w.0].value.shape[0];
            if prev[w.0].requires_grad {
                let xv = prev_value_data(prev, *x);
                let gw = slot(prev, *w).unwrap();
                gemm(true, false, o, i, n, T::ONE, g, &xv, T::ONE, gw);
            }
            if let Some(gb) = slot(prev, *b) {
                for row in g.chunks(o) {
                    for (d, &v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            if prev[x.0].requires_grad {
                let mut dx = vec![T::ZERO; n * i];
                gemm(false, false, n, i, o, T::ONE, g, &prev[w.0].value.data, T::ZERO, &mut dx);
                add_into(slot(prev, *x).unwrap(), &dx);
            }
        }
        Op::Concat { parts } => {
            let total = *node.value.shape.last().unwrap();
            let n = g.len() / total.max(1);
            let mut off = 0;
            for p in parts {
                let d = *prev[p.0].value.shape.last().unwrap();
                if let Some(gp) = slot(prev, *p) {
                    for r in 0..n {
                        for j in 0..d {
                            gp[r * d + j] += g[r * total + off + j];
                        }
                    }
                }
                off += d;
            }
        }
        Op::RepeatRows(x) => {
            if let Some(gx) = slot(prev, *x) {
                let d = gx.len();
                for row in g.chunks(d) {
                    add_into(gx, row);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(prev, *x) {
                add_into(gx, g);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(prev, *x) {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Reverse { x, eta } => {
            if let Some(gx) = slot(prev, *x) {
                let s = T::of(-eta);
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += s * gi;
                }
            }
        }
        Op::Stop => {}
        Op::Scale { x, c } => {
            if let Some(gx) = slot(prev, *x) {
                let s = T::of(*c);
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += s * gi;
                }
            }
        }
        Op::Add(a, b) => {
            for id in [a, b] {
                if let Some(gx) = slot(prev, *id) {
                    add_into(gx, g);
                }
            }
        }
        Op::Mul(a, b) => {
            let va = prev[a.0].value.data.clone();
            let vb = prev[b.0].value.data.clone();
            if let Some(ga) = slot(prev, *a) {
                for ((d, &q), &gi) in ga.iter_mut().zip(&vb).zip(g) {
                    *d += q * gi;
                }
            }
            if let Some(gb) = slot(prev, *b) {
                for ((d, &p), &gi) in gb.iter_mut().zip(&va).zip(g) {
                    *d += p * gi;
                }
            }
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let n = labels.len();
            let c = probs.len() / n;
            let s = g[0] * T::of(1.0 / n as f64);
            if let Some(gl) = slot(prev, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == label { T::ONE } else { T::ZERO };
                        gl[r * c + j] += s * (probs[r * c + j] - y);
                    }
                }
            }
        }
        Op::SmoothL1 {
            pred,
            targets,
            weights,
            norm,
        } => {
            let vals = prev[pred.0].value.data.clone();
            let s = g[0].f64() / norm;
            if let Some(gp) = slot(prev, *pred) {
                for (i, &wi) in weights.iter().enumerate() {
                    if wi == T::ZERO {
                        continue;
                    }
                    let d = vals[i].f64() - targets[i].f64();
                    let dd = if d.abs() < 1.0 { d } else { d.signum() };
                    gp[i] += T::of(s * wi.f64() * dd);
                }
            }
        }
        Op::LogitBce { logits, labels } => {
            let count = labels.iter().filter(|l| l.is_some()).count();
            if count == 0 {
                return;
            }
            let vals = prev[logits.0].value.data.clone();
            let s = g[0].f64() / count as f64;
            if let Some(gl) = slot(prev, *logits) {
                for ((d, v), l) in gl.iter_mut().zip(&vals).zip(labels) {
                    if let Some(pos) = l {
                        let p = 1.0 / (1.0 + (-v.f64()).exp());
                        let y = if *pos { 1.0 } else { 0.0 };
                        *d += T::of(s * (p - y));
                    }
                }
            }
        }
        Op::PointLoss { p, losses, weight, norm } => {
            let vals = prev[p.0].value.data.clone();
            let s = g[0].f64() * weight / norm;
            if let Some(gp) = slot(prev, *p) {
                for ((d, v), l) in gp.iter_mut().zip(&vals).zip(losses) {
                    *d += T::of(s * l.derivative(v.f64()));
                }
            }
        }
        Op::LogitPointLoss { z, losses, weight, norm } => {
            let vals = prev[z.0].value.data.clone();
            let s = g[0].f64() * weight / norm;
            if let Some(gz) = slot(prev, *z) {
                for ((d, v), l) in gz.iter_mut().zip(&vals).zip(losses) {
                    *d += T::of(s * l.derivative_logit(v.f64()));
                }
            }
        }
    }
}

fn prev_value_data<T: Real>(prev: &[Node<T>], id: DiffValue) -> Vec<T> {
    prev[id.0].value.data.clone()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
