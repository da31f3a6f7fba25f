//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order; [`Graph::backward`] replays
//! the tape in reverse, visiting each node once.

use crate::element::{matmul, Element};
use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel {
        mask: Var,
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Resize {
        x: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Pad {
        x: Var,
        top: usize,
        left: usize,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
        temperature: T,
    },
    Kl {
        p: Var,
        q: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        weights: Option<Vec<T>>,
        temperature: T,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every channel of `x: [N, C, H, W]` by `mask: [N, 1, H, W]`.
    pub fn mul_channel(&mut self, mask: Var, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (mn, mc, mh, mw) = self.value(mask).dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel",
                lhs: self.value(mask).shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let hw = h * w;
        let (m, xv) = (self.value(mask).data(), self.value(x).data());
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for k in 0..c {
                let base = (i * c + k) * hw;
                for p in 0..hw {
                    out[base + p] = xv[base + p] * m[i * hw + p];
                }
            }
        }
        let rg = self.any_grad(&[mask, x]);
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(out, Op::MulChannel { mask, x }, rg))
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return invalid("conv2d", "kernel larger than padded input or zero stride");
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// 2-D convolution of `x: [N, Cin, H, W]` with `w: [Cout, Cin, k, k]` and bias `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, pad)?;
        if self.value(b).len() != g.cout {
            return invalid("conv2d", "bias length differs from output channels");
        }
        let rg = self.any_grad(&[x, w, b]);
        let (out, cols) = kernels::conv2d_forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rg,
        );
        let out = Tensor::new([g.n, g.cout, g.oh, g.ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Group normalisation with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return invalid("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return invalid("group_norm", "affine parameters must have one entry per channel");
        }
        let m = (c / groups) * h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        let mt = T::cast(m as f64);
        for i in 0..n {
            for g in 0..groups {
                let start = (i * c + g * (c / groups)) * h * w;
                let seg = &xv[start..start + m];
                let mean = seg.iter().copied().sum::<T>() / mt;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mt;
                let is = T::one() / (var + T::cast(eps)).sqrt();
                inv_std[i * groups + g] = is;
                for j in 0..m {
                    let ch = g * (c / groups) + j / (h * w);
                    let xh = (seg[j] - mean) * is;
                    xhat[start + j] = xh;
                    out[start + j] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = Tensor::new([n, c, h, w], out)?;
        if !rg {
            xhat.clear();
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Bilinear resampling of the two trailing axes (align-corners = false).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return invalid("resize", "output size must be positive");
        }
        let out = kernels::resize_forward(self.value(x).data(), n * c, (h, w), (oh, ow));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, c, oh, ow], out)?, Op::Resize { x }, rg))
    }

    /// Spatial window `[top, top + h) x [left, left + w)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.value(x).dims4()?;
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return invalid("crop", format!("window {top}+{h} x {left}+{w} outside {ih}x{iw}"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = p * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&xv[row..row + w]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, c, h, w], out)?, Op::Crop { x, top, left }, rg))
    }

    /// Zero-pads `x` into an `oh x ow` canvas with its origin at `(top, left)`.
    pub fn pad(&mut self, x: Var, oh: usize, ow: usize, top: usize, left: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if top + h > oh || left + w > ow {
            return invalid("pad", format!("{h}x{w} at ({top},{left}) exceeds {oh}x{ow}"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let dst = p * oh * ow + (top + y) * ow + left;
                out[dst..dst + w].copy_from_slice(&xv[p * h * w + y * w..p * h * w + (y + 1) * w]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, c, oh, ow], out)?, Op::Pad { x, top, left }, rg))
    }

    /// Entries `[start, start + len)` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if len == 0 || start + len > shape[0] {
            return invalid("slice_batch", format!("{start}+{len} outside batch {}", shape[0]));
        }
        let per = self.value(x).len() / shape[0];
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceBatch { x, start }, rg))
    }

    /// Channel-axis softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if temperature <= T::zero() {
            return invalid("softmax", "temperature must be positive");
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::softmax_channels(self.value(x).data(), (n, c, h * w), temperature);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new([n, c, h, w], out)?, Op::Softmax { x, temperature }, rg))
    }

    /// Per-pixel `KL(p || q)` over the channel axis, returned as `[N, 1, H, W]`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_divergence")?;
        let (n, c, h, w) = self.value(p).dims4()?;
        if self.value(p).data().iter().chain(self.value(q).data()).any(|&v| v < T::zero()) {
            return invalid("kl_divergence", "negative probability entry");
        }
        let out = kernels::kl_forward(self.value(p).data(), self.value(q).data(), (n, c, h * w));
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(Tensor::new([n, 1, h, w], out)?, Op::Kl { p, q }, rg))
    }

    /// Mean over non-ignored pixels of `weight * -ln softmax(logits / temperature)[label]`.
    ///
    /// `labels` and `weights` are `N*H*W` long in row-major pixel order.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: Option<&[T]>,
        temperature: T,
    ) -> Result<Var> {
        if temperature <= T::zero() {
            return invalid("cross_entropy", "temperature must be positive");
        }
        let (n, c, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw || weights.is_some_and(|wt| wt.len() != n * hw) {
            return invalid("cross_entropy", "labels/weights length differs from N*H*W");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let probs = kernels::softmax_channels(self.value(logits).data(), (n, c, hw), temperature);
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..n {
            for p in 0..hw {
                let l = labels[i * hw + p];
                if l == IGNORE_LABEL {
                    continue;
                }
                count += 1;
                let pr = probs[(i * c + l as usize) * hw + p];
                let wt = weights.map_or(T::one(), |wt| wt[i * hw + p]);
                total = total - wt * pr.max(T::min_positive_value()).ln();
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::cast(count as f64)
        };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[T]>::to_vec),
                temperature,
                probs: if rg { probs } else { Vec::new() },
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::cast(v.len() as f64));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let shape = self.nodes[idx].value.shape().to_vec();
                let slot = &mut self.leaf_grads[idx];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                });
            }
            Op::MulChannel { mask, x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let (mv, xv) = (self.value(*mask).data(), self.value(*x).data());
                acc(*x, &mut |d| {
                    for i in 0..n {
                        for k in 0..c {
                            let base = (i * c + k) * hw;
                            for p in 0..hw {
                                d[base + p] = d[base + p] + g[base + p] * mv[i * hw + p];
                            }
                        }
                    }
                });
                acc(*mask, &mut |d| {
                    for i in 0..n {
                        for k in 0..c {
                            let base = (i * c + k) * hw;
                            for p in 0..hw {
                                d[i * hw + p] = d[i * hw + p] + g[base + p] * xv[base + p];
                            }
                        }
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *scale));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| matmul(m, n, k, g, false, bv, true, d, T::one()));
                acc(*b, &mut |d| matmul(k, m, n, av, true, g, false, d, T::one()));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let geom = self.conv_geom(*x, *w, *stride, *pad)?;
                let wv = self.value(*w).data();
                acc(*x, &mut |d| {
                    kernels::conv2d_backward(&geom, cols, wv, g, Some(d), None, None)
                });
                acc(*w, &mut |d| {
                    kernels::conv2d_backward(&geom, cols, wv, g, None, Some(d), None)
                });
                acc(*b, &mut |d| {
                    kernels::conv2d_backward(&geom, cols, wv, g, None, None, Some(d))
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let cg = c / groups;
                let m = cg * hw;
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let s: T = (0..hw).map(|p| g[base + p] * xhat[base + p]).sum();
                            d[ch] = d[ch] + s;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            d[ch] = d[ch] + g[base..base + hw].iter().copied().sum();
                        }
                    }
                });
                acc(*x, &mut |d| {
                    let mt = T::cast(m as f64);
                    for i in 0..n {
                        for grp in 0..*groups {
                            let start = (i * c + grp * cg) * hw;
                            let is = inv_std[i * groups + grp];
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for j in 0..m {
                                let ch = grp * cg + j / hw;
                                let dxh = g[start + j] * gv[ch];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xhat[start + j];
                            }
                            for j in 0..m {
                                let ch = grp * cg + j / hw;
                                let dxh = g[start + j] * gv[ch];
                                let v = is / mt * (mt * dxh - sum_dxh - xhat[start + j] * sum_dxh_xh);
                                d[start + j] = d[start + j] + v;
                            }
                        }
                    }
                });
            }
            Op::Resize { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                acc(*x, &mut |d| kernels::resize_backward(g, n * c, (h, w), (oh, ow), d));
            }
            Op::Crop { x, top, left } => {
                let (n, c, ih, iw) = self.value(*x).dims4()?;
                let (_, _, h, w) = node.value.dims4()?;
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for y in 0..h {
                            let row = p * ih * iw + (top + y) * iw + left;
                            add_into(&mut d[row..row + w], &g[p * h * w + y * w..p * h * w + (y + 1) * w]);
                        }
                    }
                });
            }
            Op::Pad { x, top, left } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for y in 0..h {
                            let src = p * oh * ow + (top + y) * ow + left;
                            add_into(&mut d[p * h * w + y * w..p * h * w + (y + 1) * w], &g[src..src + w]);
                        }
                    }
                });
            }
            Op::SliceBatch { x, start } => {
                let per = node.value.len() / node.value.shape()[0];
                acc(*x, &mut |d| add_into(&mut d[start * per..start * per + g.len()], g));
            }
            Op::Softmax { x, temperature } => {
                let (n, c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let y = node.value.data();
                let inv_t = T::one() / *temperature;
                acc(*x, &mut |d| {
                    for i in 0..n {
                        for p in 0..hw {
                            let dot: T = (0..c).map(|k| g[(i * c + k) * hw + p] * y[(i * c + k) * hw + p]).sum();
                            for k in 0..c {
                                let idx = (i * c + k) * hw + p;
                                d[idx] = d[idx] + inv_t * y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Kl { p, q } => {
                let (n, c, h, w) = self.value(*p).dims4()?;
                let hw = h * w;
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                let eps = T::cast(kernels::KL_EPS);
                acc(*p, &mut |d| {
                    for i in 0..n {
                        for k in 0..c {
                            for px in 0..hw {
                                let idx = (i * c + k) * hw + px;
                                if pv[idx] > T::zero() {
                                    let slope = if pv[idx] > eps { T::one() } else { T::zero() };
                                    let v = (pv[idx].max(eps) / qv[idx].max(eps)).ln() + slope;
                                    d[idx] = d[idx] + g[i * hw + px] * v;
                                }
                            }
                        }
                    }
                });
                acc(*q, &mut |d| {
                    for i in 0..n {
                        for k in 0..c {
                            for px in 0..hw {
                                let idx = (i * c + k) * hw + px;
                                if pv[idx] > T::zero() && qv[idx] > eps {
                                    d[idx] = d[idx] - g[i * hw + px] * pv[idx] / qv[idx];
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                temperature,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let (n, c, h, w) = self.value(*logits).dims4()?;
                let hw = h * w;
                let coef = g[0] / (T::cast(*count as f64) * *temperature);
                acc(*logits, &mut |d| {
                    for i in 0..n {
                        for p in 0..hw {
                            let l = labels[i * hw + p];
                            if l == IGNORE_LABEL {
                                continue;
                            }
                            let wt = weights.as_ref().map_or(T::one(), |wt| wt[i * hw + p]);
                            let s = coef * wt;
                            for k in 0..c {
                                let idx = (i * c + k) * hw + p;
                                let target = if k == l as usize { T::one() } else { T::zero() };
                                d[idx] = d[idx] + s * (probs[idx] - target);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Mean(x) => {
                let inv = g[0] / T::cast(self.value(*x).len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + inv));
            }
        }
        Ok(())
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
