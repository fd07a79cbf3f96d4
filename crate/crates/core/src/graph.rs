//! Tape-based reverse-mode differentiation over channels-last tensors.
//!
//! Every network in the crate is expressed as a sequence of [`Graph`] ops; a
//! single backward sweep over the tape yields gradients for any node that
//! transitively depends on a leaf created with `requires_grad = true`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, k: usize },
    AddBias { x: Var, b: Var },
    MatMul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Concat { xs: Vec<Var> },
    SliceLast { x: Var, start: usize },
    Rows { x: Var, start: usize },
    StackRows { xs: Vec<Var> },
    GlobalAvgPool { x: Var },
    SumPerSample { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    MaskMul { x: Var, mask: Vec<T> },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad as isize;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad as isize;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, &s) in dx[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Same-padded, stride-1 convolution. `x`: `[N,H,W,Ci]`, `w`: `[k,k,Ci,Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[0].is_multiple_of(2) || ws[2] != xs[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, co) = (ws[0], ws[3]);
        let kk = k * k * ci;
        let mut out = Tensor::zeros(&[n, h, wd, co]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let hw = h * wd;
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); hw * kk] };
        for b in 0..n {
            let xb = &xv[b * hw * ci..(b + 1) * hw * ci];
            let a: &[T] = if k == 1 {
                xb
            } else {
                im2col(xb, h, wd, ci, k, &mut cols);
                &cols
            };
            let ob = &mut out.data_mut()[b * hw * co..(b + 1) * hw * co];
            T::gemm(hw, kk, co, T::one(), a, kk as isize, 1, wv, co as isize, 1, T::zero(), ob, co as isize, 1);
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, k }, rg))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).len() != c {
            return Err(Error::Shape(format!(
                "bias of length {} for {c} channels",
                self.value(b).len()
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &bb) in chunk.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    /// `[N,K] x [K,M] -> [N,M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::Shape(format!("matmul {as_:?} x {bs:?}")));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let mut out = Tensor::zeros(&[n, m]);
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::zero(),
            out.data_mut(),
            m as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!("max_pool2 on {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best_i = ((b * h + 2 * y) * w + 2 * xx) * c + ch;
                        let mut best = xv[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, oh, ow, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let c = s[s.len() - 1];
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of {c} channels")));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceLast { x, start }, rg))
    }

    /// Slices `len` entries along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rows { x, start }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::stack_rows(&parts)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::StackRows { xs: xs.to_vec() }, rg))
    }

    /// `[N,H,W,C] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool on {s:?}")));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::one() / T::of(hw as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let src = &xv[(b * hw + p) * c..(b * hw + p + 1) * c];
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let out = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let n = s[0];
        let per = self.value(x).len() / n.max(1);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Tensor::from_vec(&[n], out).expect("length matches leading dim");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumPerSample { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskMul { x, mask }, rg))
    }

    /// Batch normalisation with statistics over every axis but the last.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("batch norm affine length".into()));
        }
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (s, &v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= mf);
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            for ch in 0..c {
                xhat.push((row[ch] - mean[ch]) * inv_std[ch]);
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gv[i % c] * h + bv[i % c])
            .collect();
        let out = Tensor::from_vec(self.value(x).shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            rg,
        ))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batch norm eval lengths".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gv[ch] * (v - running_mean[ch]) * inv_std[ch] + bv[ch]
            })
            .collect();
        let out = Tensor::from_vec(self.value(x).shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over a `[B,K]` logit batch, stabilised by
    /// max subtraction. Produces a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!("label outside {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (row, &l) in self.value(logits).data().chunks(k).zip(labels) {
            loss += log_sum_exp(row) - row[l];
        }
        loss /= T::of(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() || target.is_empty() {
            return Err(Error::Shape("mse target length".into()));
        }
        let n = T::of(target.len() as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed {:?} for root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }

    /// Backward sweep from a scalar root.
    pub fn backward_scalar(&self, root: Var) -> Result<Grads<T>> {
        let shape = self.value(root).shape().to_vec();
        self.backward(root, Tensor::full(&shape, T::one()))
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, k } => {
                let xs = self.value(*x).shape();
                let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.value(*w).shape()[3];
                let k = *k;
                let kk = k * k * ci;
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); if k == 1 { 0 } else { hw * kk }];
                let mut dcols = vec![T::zero(); if needs(x) { hw * kk } else { 0 }];
                let wshape = self.value(*w).shape().to_vec();
                let xshape = xs.to_vec();
                for b in 0..n {
                    let gb = &g[b * hw * co..(b + 1) * hw * co];
                    let xb = &xv[b * hw * ci..(b + 1) * hw * ci];
                    if needs(w) {
                        let a: &[T] = if k == 1 {
                            xb
                        } else {
                            im2col(xb, h, wd, ci, k, &mut cols);
                            &cols
                        };
                        add_into(&mut grads[w.0], &wshape, |dw| {
                            T::gemm(kk, hw, co, T::one(), a, 1, kk as isize, gb, co as isize, 1, T::one(), dw, co as isize, 1);
                        });
                    }
                    if needs(x) {
                        T::gemm(hw, co, kk, T::one(), gb, co as isize, 1, wv, 1, co as isize, T::zero(), &mut dcols, kk as isize, 1);
                        add_into(&mut grads[x.0], &xshape, |dx| {
                            let dxb = &mut dx[b * hw * ci..(b + 1) * hw * ci];
                            if k == 1 {
                                for (d, &s) in dxb.iter_mut().zip(&dcols) {
                                    *d += s;
                                }
                            } else {
                                col2im_add(&dcols, h, wd, ci, k, dxb);
                            }
                        });
                    }
                }
            }
            Op::AddBias { x, b } => {
                if needs(x) {
                    add_into(&mut grads[x.0], gout.shape(), |dx| {
                        for (d, &s) in dx.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if needs(b) {
                    let c = self.value(*b).len();
                    let bshape = self.value(*b).shape().to_vec();
                    add_into(&mut grads[b.0], &bshape, |db| {
                        for row in g.chunks(c) {
                            for (d, &s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let as_ = self.value(*a).shape().to_vec();
                let bs = self.value(*b).shape().to_vec();
                let (n, k, m) = (as_[0], as_[1], bs[1]);
                if needs(a) {
                    let bv = self.value(*b).data();
                    add_into(&mut grads[a.0], &as_, |da| {
                        T::gemm(n, m, k, T::one(), g, m as isize, 1, bv, 1, m as isize, T::one(), da, k as isize, 1);
                    });
                }
                if needs(b) {
                    let av = self.value(*a).data();
                    add_into(&mut grads[b.0], &bs, |db| {
                        T::gemm(k, n, m, T::one(), av, 1, k as isize, g, m as isize, 1, T::one(), db, m as isize, 1);
                    });
                }
            }
            Op::Relu { x } => {
                let out = self.nodes[i].value.data();
                add_into(&mut grads[x.0], gout.shape(), |dx| {
                    for ((d, &s), &o) in dx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let out = self.nodes[i].value.data();
                add_into(&mut grads[x.0], gout.shape(), |dx| {
                    for ((d, &s), &o) in dx.iter_mut().zip(g).zip(out) {
                        *d += s * o * (T::one() - o);
                    }
                });
            }
            Op::Tanh { x } => {
                let out = self.nodes[i].value.data();
                add_into(&mut grads[x.0], gout.shape(), |dx| {
                    for ((d, &s), &o) in dx.iter_mut().zip(g).zip(out) {
                        *d += s * (T::one() - o * o);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                let xshape = self.value(*x).shape().to_vec();
                add_into(&mut grads[x.0], &xshape, |dx| {
                    for (&src, &s) in argmax.iter().zip(g) {
                        dx[src] += s;
                    }
                });
            }
            Op::Concat { xs } => {
                let total = gout.last_dim();
                let rows = gout.len() / total.max(1);
                let mut offset = 0;
                for v in xs {
                    let wd = self.value(*v).last_dim();
                    if needs(v) {
                        let vshape = self.value(*v).shape().to_vec();
                        add_into(&mut grads[v.0], &vshape, |dv| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + wd];
                                for (d, &s) in dv[r * wd..(r + 1) * wd].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += wd;
                }
            }
            Op::SliceLast { x, start } => {
                let c = self.value(*x).last_dim();
                let len = gout.last_dim();
                let xshape = self.value(*x).shape().to_vec();
                add_into(&mut grads[x.0], &xshape, |dx| {
                    for (r, row) in g.chunks(len).enumerate() {
                        for (d, &s) in dx[r * c + start..r * c + start + len].iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Rows { x, start } => {
                let xshape = self.value(*x).shape().to_vec();
                let stride = self.value(*x).len() / xshape[0].max(1);
                add_into(&mut grads[x.0], &xshape, |dx| {
                    for (d, &s) in dx[start * stride..start * stride + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::StackRows { xs } => {
                let mut offset = 0;
                for v in xs {
                    let len = self.value(*v).len();
                    if needs(v) {
                        let vshape = self.value(*v).shape().to_vec();
                        add_into(&mut grads[v.0], &vshape, |dv| {
                            for (d, &s) in dv.iter_mut().zip(&g[offset..offset + len]) {
                                *d += s;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape().to_vec();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::one() / T::of(hw as f64);
                add_into(&mut grads[x.0], &s, |dx| {
                    for b in 0..n {
                        for p in 0..hw {
                            let dst = &mut dx[(b * hw + p) * c..(b * hw + p + 1) * c];
                            for (d, &gv) in dst.iter_mut().zip(&g[b * c..(b + 1) * c]) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::SumPerSample { x } => {
                let s = self.value(*x).shape().to_vec();
                let per = self.value(*x).len() / s[0].max(1);
                add_into(&mut grads[x.0], &s, |dx| {
                    for (chunk, &gv) in dx.chunks_mut(per.max(1)).zip(g) {
                        for d in chunk {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(&mut grads[v.0], gout.shape(), |dv| {
                            for (d, &s) in dv.iter_mut().zip(g) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if needs(v) {
                        let ov = self.value(*other).data();
                        add_into(&mut grads[v.0], gout.shape(), |dv| {
                            for ((d, &s), &o) in dv.iter_mut().zip(g).zip(ov) {
                                *d += s * o;
                            }
                        });
                    }
                }
            }
            Op::Scale { x, s } => {
                add_into(&mut grads[x.0], gout.shape(), |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                add_into(&mut grads[x.0], gout.shape(), |dx| {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = inv_std.len();
                let m = T::of((g.len() / c) as f64);
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (idx, (&gg, &xh)) in g.iter().zip(xhat).enumerate() {
                    sum_g[idx % c] += gg;
                    sum_gx[idx % c] += gg * xh;
                }
                if needs(gamma) {
                    add_into(&mut grads[gamma.0], &[c], |d| {
                        for (dd, &s) in d.iter_mut().zip(&sum_gx) {
                            *dd += s;
                        }
                    });
                }
                if needs(beta) {
                    add_into(&mut grads[beta.0], &[c], |d| {
                        for (dd, &s) in d.iter_mut().zip(&sum_g) {
                            *dd += s;
                        }
                    });
                }
                if needs(x) {
                    add_into(&mut grads[x.0], gout.shape(), |dx| {
                        for (idx, (d, (&gg, &xh))) in dx.iter_mut().zip(g.iter().zip(xhat)).enumerate() {
                            let ch = idx % c;
                            // d xhat = g * gamma; sums over the batch of d xhat
                            // are gamma * sum_g and gamma * sum_gx.
                            *d += gv[ch] * inv_std[ch] / m * (m * gg - sum_g[ch] - xh * sum_gx[ch]);
                        }
                    });
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                if needs(gamma) {
                    add_into(&mut grads[gamma.0], &[c], |d| {
                        for (idx, (&gg, &v)) in g.iter().zip(xv).enumerate() {
                            let ch = idx % c;
                            d[ch] += gg * (v - mean[ch]) * inv_std[ch];
                        }
                    });
                }
                if needs(beta) {
                    add_into(&mut grads[beta.0], &[c], |d| {
                        for (idx, &gg) in g.iter().enumerate() {
                            d[idx % c] += gg;
                        }
                    });
                }
                if needs(x) {
                    add_into(&mut grads[x.0], gout.shape(), |dx| {
                        for (idx, (d, &gg)) in dx.iter_mut().zip(g).enumerate() {
                            let ch = idx % c;
                            *d += gg * gv[ch] * inv_std[ch];
                        }
                    });
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let lshape = self.value(*logits).shape().to_vec();
                add_into(&mut grads[logits.0], &lshape, |dl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dl[r * k + j] += (probs[r * k + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let scale = g[0] * T::of(2.0) / T::of(target.len() as f64);
                let pv = self.value(*pred).data();
                let pshape = self.value(*pred).shape().to_vec();
                add_into(&mut grads[pred.0], &pshape, |dp| {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                        *d += (p - t) * scale;
                    }
                });
            }
            Op::Reshape { x } => {
                let xshape = self.value(*x).shape().to_vec();
                add_into(&mut grads[x.0], &xshape, |dx| {
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
        }
    }
}

/// Numerically stable `ln Σ exp(row)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Row-wise softmax of a flat `[rows, k]` buffer.
pub fn softmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
