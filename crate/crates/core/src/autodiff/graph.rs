//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` is a single reverse sweep.

use crate::autodiff::kernels::{self, Dims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization statistics mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics from a training-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: Dims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelsToSequence(Var),
    HeadScores {
        h: Var,
        u: Var,
        heads: usize,
        scale: f64,
    },
    HeadWeightedSum {
        w: Var,
        h: Var,
        heads: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    AmSoftmax {
        cos: Var,
        labels: Vec<usize>,
        scale: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf; gradients are tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf with gradient tracking.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[..., F] + bias[F]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let f = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [f] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % f])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {base:?}")));
        }
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} on {shape:?}")));
        }
        let data = softmax_raw(self.value(x).data(), &shape, axis);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Training-mode batch normalization over `x: [batch, features]`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, f) = self.check_bn_shapes(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::invalid(
                "batchnorm in training mode needs a batch of at least 2",
            ));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for j in 0..f {
            let m = (0..n).map(|i| xs[i * f + j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (xs[i * f + j] - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            var[j] = v;
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect(),
        };
        let v = self.bn_apply(x, gamma, beta, &mean, &var, eps, NormMode::Train)?;
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, f) = self.check_bn_shapes(x, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape("batchnorm", "running statistics length"));
        }
        self.bn_apply(x, gamma, beta, running_mean, running_var, eps, NormMode::Eval)
    }

    fn check_bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("expected [batch, features], got {s:?}")));
        }
        let f = s[1];
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batchnorm", "affine parameter length"));
        }
        Ok((s[0], f))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let f = shape[1];
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.value(x).data();
        let xhat: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % f]) * inv_std[i % f])
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| g[i % f] * v + b[i % f])
            .collect();
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            rg,
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x` is `[C, H, W]` or
    /// `[N, C, H, W]`; `w` is `[O, C, 3, 3]`; `b` is `[O]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, wd, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => return Err(Error::shape("conv2d", format!("input must be CHW or NCHW, got {xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv2d", format!("kernel must be [O, C, 3, 3], got {ws:?}")));
        }
        if ws[1] != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {}", ws[1]),
            ));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", "bias length must equal output channels"));
        }
        let dims = Dims {
            batch,
            in_channels: c,
            out_channels: ws[0],
            height: h,
            width: wd,
        };
        let out = kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            dims,
        );
        let shape = if batched {
            vec![batch, ws[0], h, wd]
        } else {
            vec![ws[0], h, wd]
        };
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("maxpool2x2", format!("need spatial axes, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "maxpool2x2",
                format!("spatial extent {h}x{w} is smaller than the 2x2 window"),
            ));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), planes, h, w);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// `[N, C, T, F] -> [N, T, C*F]`, channel index varying slowest.
    pub fn channels_to_sequence(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, t, f] = s[..] else {
            return Err(Error::shape("channels_to_sequence", format!("expected NCTF, got {s:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * t * c * f];
        for b in 0..n {
            for ch in 0..c {
                for step in 0..t {
                    let from = ((b * c + ch) * t + step) * f;
                    let to = (b * t + step) * c * f + ch * f;
                    out[to..to + f].copy_from_slice(&src[from..from + f]);
                }
            }
        }
        let tensor = Tensor::new(&[n, t, c * f], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(tensor, Op::ChannelsToSequence(x), rg))
    }

    /// Per-head alignment logits: `h: [N, T, heads*d]`, `u: [heads*d]` to
    /// `[N, T, heads]`, where entry `(n, t, j)` is `scale * <h[n,t,j], u[j]>`.
    pub fn head_scores(&mut self, h: Var, u: Var, heads: usize, scale: f64) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        let [n, t, dim] = hs[..] else {
            return Err(Error::shape("head_scores", format!("expected [N, T, D], got {hs:?}")));
        };
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "head_scores",
                format!("{heads} heads do not divide hidden size {dim}"),
            ));
        }
        if self.shape(u) != [dim] {
            return Err(Error::shape(
                "head_scores",
                format!("attention vector {:?} for hidden size {dim}", self.shape(u)),
            ));
        }
        let d = dim / heads;
        let hv = self.value(h).data();
        let uv = self.value(u).data();
        let mut out = vec![0.0; n * t * heads];
        for row in 0..n * t {
            let hrow = &hv[row * dim..(row + 1) * dim];
            for j in 0..heads {
                let s: f64 = hrow[j * d..(j + 1) * d]
                    .iter()
                    .zip(&uv[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                out[row * heads + j] = scale * s;
            }
        }
        let tensor = Tensor::new(&[n, t, heads], out)?;
        let rg = self.rg(&[h, u]);
        Ok(self.push(tensor, Op::HeadScores { h, u, heads, scale }, rg))
    }

    /// Weighted sum over time per head: `w: [N, T, heads]`,
    /// `h: [N, T, heads*d]` to `[N, heads*d]`.
    pub fn head_weighted_sum(&mut self, w: Var, h: Var, heads: usize) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        let [n, t, dim] = hs[..] else {
            return Err(Error::shape("head_weighted_sum", format!("expected [N, T, D], got {hs:?}")));
        };
        if heads == 0 || dim % heads != 0 || self.shape(w) != [n, t, heads] {
            return Err(Error::shape(
                "head_weighted_sum",
                format!("weights {:?} for sequence {hs:?} with {heads} heads", self.shape(w)),
            ));
        }
        let d = dim / heads;
        let hv = self.value(h).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * dim];
        for b in 0..n {
            let dst = &mut out[b * dim..(b + 1) * dim];
            for step in 0..t {
                let row = b * t + step;
                let hrow = &hv[row * dim..(row + 1) * dim];
                for j in 0..heads {
                    let wt = wv[row * heads + j];
                    for k in j * d..(j + 1) * d {
                        dst[k] += wt * hrow[k];
                    }
                }
            }
        }
        let tensor = Tensor::new(&[n, dim], out)?;
        let rg = self.rg(&[w, h]);
        Ok(self.push(tensor, Op::HeadWeightedSum { w, h, heads }, rg))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("l2_normalize", format!("axis {axis} on {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let nrm = (0..len).map(|k| src[idx(k)].powi(2)).sum::<f64>().sqrt().max(eps);
                norms[o * inner + i] = nrm;
                for k in 0..len {
                    out[idx(k)] = src[idx(k)] / nrm;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Mean additive-margin softmax loss over `cos: [batch, classes]`.
    pub fn am_softmax_loss(&mut self, cos: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        let [n, c] = s[..] else {
            return Err(Error::shape("am_softmax_loss", format!("expected [batch, classes], got {s:?}")));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "am_softmax_loss",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let cv = self.value(cos).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let logits: Vec<f64> = (0..c)
                .map(|j| {
                    let m = if j == y { margin } else { 0.0 };
                    scale * (cv[i * c + j] - m)
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let log_z = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (logits[j] - log_z).exp();
            }
            total += log_z - logits[y];
        }
        let t = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[cos]);
        Ok(self.push(
            t,
            Op::AmSoftmax {
                cos,
                labels: labels.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G B^T, dB = A^T G
                let bt = transpose(bv, k, n);
                acc(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose(av, m, k);
                acc(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                let f = self.shape(*bias)[0];
                let mut db = vec![0.0; f];
                for (i, v) in g.iter().enumerate() {
                    db[i % f] += v;
                }
                acc(*x, g.to_vec());
                acc(*bias, db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|v| v * k).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, g.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc(*p, part);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let s = node.value.shape();
                let (n, f) = (s[0], s[1]);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..n * f {
                    dgamma[i % f] += g[i] * xhat[i];
                    dbeta[i % f] += g[i];
                }
                let mut dx = vec![0.0; n * f];
                match mode {
                    NormMode::Eval => {
                        for i in 0..n * f {
                            dx[i] = g[i] * gm[i % f] * inv_std[i % f];
                        }
                    }
                    NormMode::Train => {
                        let nf = n as f64;
                        for j in 0..f {
                            // dxhat = g * gamma; sums over the batch
                            let sum_dxhat = dbeta[j] * gm[j];
                            let sum_dxhat_xhat = dgamma[j] * gm[j];
                            for i in 0..n {
                                let k = i * f + j;
                                let dxhat = g[k] * gm[j];
                                dx[k] = inv_std[j] / nf
                                    * (nf * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Conv2d { x, w, b, dims } => {
                if self.nodes[x.0].requires_grad {
                    acc(*x, kernels::conv3x3_backward_input(g, self.value(*w).data(), *dims));
                }
                if self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad {
                    let (dw, db) = kernels::conv3x3_backward_params(g, self.value(*x).data(), *dims);
                    acc(*w, dw);
                    acc(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::ChannelsToSequence(x) => {
                let s = self.shape(*x);
                let (n, c, t, f) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for step in 0..t {
                            let to = ((b * c + ch) * t + step) * f;
                            let from = (b * t + step) * c * f + ch * f;
                            dx[to..to + f].copy_from_slice(&g[from..from + f]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::HeadScores { h, u, heads, scale } => {
                let hs = self.shape(*h);
                let (rows, dim) = (hs[0] * hs[1], hs[2]);
                let d = dim / heads;
                let hv = self.value(*h).data();
                let uv = self.value(*u).data();
                let mut dh = vec![0.0; hv.len()];
                let mut du = vec![0.0; dim];
                for row in 0..rows {
                    for j in 0..*heads {
                        let gs = g[row * heads + j] * scale;
                        for k in j * d..(j + 1) * d {
                            dh[row * dim + k] = gs * uv[k];
                            du[k] += gs * hv[row * dim + k];
                        }
                    }
                }
                acc(*h, dh);
                acc(*u, du);
            }
            Op::HeadWeightedSum { w, h, heads } => {
                let hs = self.shape(*h);
                let (n, t, dim) = (hs[0], hs[1], hs[2]);
                let d = dim / heads;
                let hv = self.value(*h).data();
                let wv = self.value(*w).data();
                let mut dw = vec![0.0; wv.len()];
                let mut dh = vec![0.0; hv.len()];
                for b in 0..n {
                    let gc = &g[b * dim..(b + 1) * dim];
                    for step in 0..t {
                        let row = b * t + step;
                        for j in 0..*heads {
                            let wt = wv[row * heads + j];
                            let mut s = 0.0;
                            for k in j * d..(j + 1) * d {
                                s += gc[k] * hv[row * dim + k];
                                dh[row * dim + k] = wt * gc[k];
                            }
                            dw[row * heads + j] = s;
                        }
                    }
                }
                acc(*w, dw);
                acc(*h, dh);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let nrm = norms[o * inner + i];
                        let raw_norm = (0..len).map(|k| xv[at(k)].powi(2)).sum::<f64>().sqrt();
                        if raw_norm >= nrm {
                            let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] = (g[at(k)] - y[at(k)] * dot) / nrm;
                            }
                        } else {
                            for k in 0..len {
                                dx[at(k)] = g[at(k)] / nrm;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::AmSoftmax {
                cos,
                labels,
                scale,
                probs,
            } => {
                let c = self.shape(*cos)[1];
                let n = labels.len() as f64;
                let mut dc = vec![0.0; probs.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &probs[i * c..(i + 1) * c];
                    // p_y - 1 as minus the other classes' mass, which stays
                    // nonzero when p_y rounds to 1
                    let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, p)| p).sum();
                    for j in 0..c {
                        let d = if j == y { -rest } else { row[j] };
                        dc[i * c + j] = g[0] * scale * d / n;
                    }
                }
                acc(*cos, dc);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - mx).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    out
}
