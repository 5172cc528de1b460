//! A small tape-based reverse-mode autodiff engine over NCHW tensors.
//!
//! Nodes are appended to a [`Graph`] in evaluation order; [`Graph::backward`]
//! walks the tape in reverse. Convolutions are lowered to im2col + GEMM and
//! parallelised over the batch axis. Per-sample partial weight gradients are
//! reduced in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::{with_scratch, Scalar, Tensor, Window2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        /// Flat input index feeding each output, `usize::MAX` for padding.
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ChannelBias {
        x: NodeId,
        b: NodeId,
    },
    /// `x[n, c, h, w] * w[c, h, w]`, broadcast over the batch.
    BatchHadamard {
        x: NodeId,
        w: NodeId,
    },
    Concat(Vec<NodeId>),
    Narrow {
        x: NodeId,
        start: usize,
    },
    Crop(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a batch-norm node in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Evaluation tape.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    train: bool,
}

/// Gradients indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// `train` selects batch statistics (true) or running statistics in batch norm.
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Stride-1 convolution. `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> NodeId {
        let [n, ci, h, wd] = self.value(x).dims4();
        let [co, wci, k, k2] = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let win = Window2d {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride: 1,
            pad,
        };
        let (oh, ow) = (win.out_height(), win.out_width());
        let plane = oh * ow;
        let mut out = vec![T::zero(); n * co * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let in_size = ci * h * wd;
            out.par_chunks_mut(co * plane).enumerate().for_each(|(s, dst)| {
                with_scratch(win.col_rows() * plane, |cols: &mut [T]| {
                    win.im2col(&xv[s * in_size..(s + 1) * in_size], cols);
                    T::gemm(co, win.col_rows(), plane, wv, false, cols, false, dst, false);
                });
                if let Some(bv) = bv {
                    for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            });
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[n, co, oh, ow], out), Op::Conv2d { x, w, b, pad }, needs)
    }

    /// Transposed convolution. `w` is `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let [n, ci, h, wd] = self.value(x).dims4();
        let [wci, co, k, k2] = self.value(w).dims4();
        assert_eq!(ci, wci, "conv_transpose2d: channel mismatch");
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let win = Window2d {
            channels: co,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!((win.out_height(), win.out_width()), (h, wd));
        let in_plane = h * wd;
        let mut out = vec![T::zero(); n * co * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            out.par_chunks_mut(co * oh * ow).enumerate().for_each(|(s, dst)| {
                let xs = &xv[s * ci * in_plane..(s + 1) * ci * in_plane];
                with_scratch(win.col_rows() * in_plane, |cols: &mut [T]| {
                    T::gemm(win.col_rows(), ci, in_plane, wv, true, xs, false, cols, false);
                    win.col2im(cols, dst);
                });
                if let Some(bv) = bv {
                    for (c, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            });
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[n, co, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, stride, pad },
            needs,
        )
    }

    /// 2×2 max-pool with stride 2. Odd sizes are zero-padded on the bottom/right.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.value(x).dims4();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (y, xx) = (2 * i + di, 2 * j + dj);
                            let (v, idx) = if y < h && xx < w {
                                let idx = base + y * w + xx;
                                (xv[idx], idx)
                            } else {
                                (T::zero(), usize::MAX)
                            };
                            if v > best {
                                best = v;
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::MaxPool2 { x, argmax }, needs)
    }

    /// Per-channel batch normalisation.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update running estimates; otherwise `running` is used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&[T], &[T]),
        eps: f64,
    ) -> (NodeId, Option<BatchStats<T>>) {
        let [n, c, h, w] = self.value(x).dims4();
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = if self.train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for s in 0..n {
                    let off = (s * c + ch) * plane;
                    acc += xv[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = acc / count as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let off = (s * c + ch) * plane;
                    sq += xv[off..off + plane]
                        .iter()
                        .map(|v| (v.as_f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::of(m);
                var[ch] = T::of(sq / count as f64);
            }
            let unbiased = var
                .iter()
                .map(|&v| {
                    if count > 1 {
                        T::of(v.as_f64() * count as f64 / (count - 1) as f64)
                    } else {
                        v
                    }
                })
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let batch_stats = self.train;
        let id = self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        (id, stats)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// Adds `b[c]` to every element of channel `c` of `x[n, c, ...]`.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let c = shape[1];
        assert_eq!(self.value(b).len(), c, "channel_bias: bias length mismatch");
        let inner: usize = shape[2..].iter().product();
        let bv = self.value(b).data();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let add = bv[i % c];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(v, Op::ChannelBias { x, b }, needs)
    }

    /// Elementwise product with a per-sample-shared tensor `w[c, h, w]`.
    pub fn batch_hadamard(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let inner = self.value(w).len();
        assert_eq!(
            &self.value(x).shape()[1..],
            self.value(w).shape(),
            "batch_hadamard: shape mismatch"
        );
        let wv = self.value(w).data();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(inner) {
            for (e, &m) in chunk.iter_mut().zip(wv) {
                *e *= m;
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(v, Op::BatchHadamard { x, w }, needs)
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat: batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat: spatial mismatch");
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[s * len..(s + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), needs)
    }

    /// Channels `start .. start + len` of `x`.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert!(start + len <= shape[1], "narrow out of range");
        let inner: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        for s in 0..shape[0] {
            let off = (s * shape[1] + start) * inner;
            data.extend_from_slice(&xv[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&out_shape, data), Op::Narrow { x, start }, needs)
    }

    /// Keep the top-left `rows × cols` window of every plane.
    pub fn crop(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let [n, c, h, w] = self.value(x).dims4();
        assert!(rows <= h && cols <= w, "crop larger than input");
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * rows * cols);
        for plane in 0..n * c {
            for i in 0..rows {
                let off = plane * h * w + i * w;
                data.extend_from_slice(&xv[off..off + cols]);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, rows, cols], data), Op::Crop(x), needs)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: NodeId, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g, grads),
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                self.conv_transpose2d_backward(*x, *w, *b, *stride, *pad, g, grads)
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    if at != usize::MAX {
                        d[at] += gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = g.dims4();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gv = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += gv[i] * xhat[i];
                            dbeta[ch] += gv[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    // dxhat = g * gamma; sums of dxhat and dxhat*xhat are
                                    // gamma * dbeta and gamma * dgamma.
                                    gam[ch] * inv_std[ch] / T::of(m)
                                        * (T::of(m) * gv[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gv[i] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(g.shape(), dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Relu(x) => {
                let dx = g.zip_map(&node.value, |gv, y| if y > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |p, q| p * q));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |p, q| p * q));
                }
            }
            Op::ChannelBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = g.shape()[1];
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[c], db));
                }
            }
            Op::BatchHadamard { x, w } => {
                let wv = self.value(*w);
                let inner = wv.len();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(inner) {
                        for (e, &m) in chunk.iter_mut().zip(wv.data()) {
                            *e *= m;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = vec![T::zero(); inner];
                    for (gc, xc) in g.data().chunks(inner).zip(xv.chunks(inner)) {
                        for ((d, &gg), &xx) in dw.iter_mut().zip(gc).zip(xc) {
                            *d += gg * xx;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let inner: usize = g.shape()[2..].iter().product();
                let total = g.shape()[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = shape[1] * inner;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * len);
                        for s in 0..n {
                            let base = s * total + offset;
                            d.extend_from_slice(&g.data()[base..base + len]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&shape, d));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let inner: usize = shape[2..].iter().product();
                let len = g.shape()[1] * inner;
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for s in 0..shape[0] {
                    let dst = (s * shape[1] + start) * inner;
                    d[dst..dst + len].copy_from_slice(&g.data()[s * len..(s + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Crop(x) => {
                let [n, c, h, w] = self.value(*x).dims4();
                let [_, _, rows, cols] = g.dims4();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                for plane in 0..n * c {
                    for i in 0..rows {
                        let dst = plane * h * w + i * w;
                        let src = (plane * rows + i) * cols;
                        d[dst..dst + cols].copy_from_slice(&g.data()[src..src + cols]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, ci, h, wd] = xv.dims4();
        let [co, _, k, _] = wv.dims4();
        let win = Window2d {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride: 1,
            pad,
        };
        let plane = win.col_cols();
        let in_size = ci * h * wd;
        let rows = win.col_rows();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let gd = g.data();
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let gs = &gd[s * co * plane..(s + 1) * co * plane];
                let dw = need_w.then(|| {
                    let mut dw = vec![T::zero(); co * rows];
                    with_scratch(rows * plane, |cols: &mut [T]| {
                        win.im2col(&xv.data()[s * in_size..(s + 1) * in_size], cols);
                        T::gemm(co, plane, rows, gs, false, cols, true, &mut dw, false);
                    });
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dx = vec![T::zero(); in_size];
                    with_scratch(rows * plane, |dcols: &mut [T]| {
                        T::gemm(rows, co, plane, wv.data(), true, gs, false, dcols, false);
                        win.col2im(dcols, &mut dx);
                    });
                    dx
                });
                (dx, dw)
            })
            .collect();
        if need_w {
            let mut dw = Tensor::zeros(wv.shape());
            for (_, part) in &per_sample {
                for (a, &p) in dw.data_mut().iter_mut().zip(part.as_ref().unwrap()) {
                    *a += p;
                }
            }
            self.accumulate(grads, w, dw);
        }
        if need_x {
            let mut dx = Vec::with_capacity(n * in_size);
            for (part, _) in &per_sample {
                dx.extend_from_slice(part.as_ref().unwrap());
            }
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(g));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, ci, h, wd] = xv.dims4();
        let [_, co, oh, ow] = g.dims4();
        let k = wv.shape()[2];
        let win = Window2d {
            channels: co,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        let in_plane = h * wd;
        let rows = win.col_rows();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let gd = g.data();
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &xv.data()[s * ci * in_plane..(s + 1) * ci * in_plane];
                with_scratch(rows * in_plane, |dcols: &mut [T]| {
                    win.im2col(&gd[s * co * oh * ow..(s + 1) * co * oh * ow], dcols);
                    let dx = need_x.then(|| {
                        let mut dx = vec![T::zero(); ci * in_plane];
                        T::gemm(ci, rows, in_plane, wv.data(), false, dcols, false, &mut dx, false);
                        dx
                    });
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); ci * rows];
                        T::gemm(ci, in_plane, rows, xs, false, dcols, true, &mut dw, false);
                        dw
                    });
                    (dx, dw)
                })
            })
            .collect();
        if need_w {
            let mut dw = Tensor::zeros(wv.shape());
            for (_, part) in &per_sample {
                for (a, &p) in dw.data_mut().iter_mut().zip(part.as_ref().unwrap()) {
                    *a += p;
                }
            }
            self.accumulate(grads, w, dw);
        }
        if need_x {
            let mut dx = Vec::with_capacity(n * ci * in_plane);
            for (part, _) in &per_sample {
                dx.extend_from_slice(part.as_ref().unwrap());
            }
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(g));
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = g.dims4();
    let mut db = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(h * w).enumerate() {
        db[i % c] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[c], db)
}
