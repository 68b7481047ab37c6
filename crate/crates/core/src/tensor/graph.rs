//! Reverse-mode autodiff over tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! parents already live on the tape, so reverse index order is a reverse
//! topological order. Each node keeps its value, a persistent gradient
//! accumulator, and the op that produced it (which encodes the backward
//! rule). Gradients accumulate additively: running [`Graph::backward`] twice
//! without [`Graph::zero_grads`] doubles every gradient.

use super::conv::{self, ConvDims};
use super::{fmt_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Relu(Node),
    Scale(Node, S),
    Sum(Node),
    WeightedSum(Node, Tensor<S>),
    Conv2d {
        x: Node,
        w: Node,
        b: Option<Node>,
        dims: ConvDims,
    },
    ConcatChannels(Node, Node),
    BatchNorm {
        x: Node,
        gamma: Node,
        beta: Node,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    FoldPatches {
        parts: Vec<(Node, Vec<usize>)>,
        w: usize,
    },
    CrossEntropy {
        logits: Node,
        labels: Vec<u8>,
        ignore: u8,
        scored: usize,
    },
    Mse {
        pred: Node,
        target: Tensor<S>,
    },
}

struct NodeData<S: Scalar> {
    value: Tensor<S>,
    grad: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<NodeData<S>>,
    keyed: Vec<Option<Node>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            keyed: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Node {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(NodeData { value, grad, op });
        Node(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Node {
        self.push(value, Op::Leaf)
    }

    /// Leaf memoized by an external key (used for parameters, so one graph
    /// reuses a single leaf per parameter and fan-out gradients accumulate).
    pub fn leaf_keyed(&mut self, key: usize, value: &Tensor<S>) -> Node {
        if key < self.keyed.len() {
            if let Some(n) = self.keyed[key] {
                return n;
            }
        } else {
            self.keyed.resize(key + 1, None);
        }
        let n = self.push(value.clone(), Op::Leaf);
        self.keyed[key] = Some(n);
        n
    }

    pub fn keyed_node(&self, key: usize) -> Option<Node> {
        self.keyed.get(key).copied().flatten()
    }

    pub fn value(&self, n: Node) -> &Tensor<S> {
        &self.nodes[n.0].value
    }

    pub fn grad(&self, n: Node) -> &Tensor<S> {
        &self.nodes[n.0].grad
    }

    pub fn zero_grads(&mut self) {
        for nd in self.nodes.iter_mut() {
            nd.grad.fill(S::zero());
        }
    }

    /// Smallest |x| feeding any relu on the tape, or None when the graph has
    /// no relu. Finite-difference checks use this to reject evaluation
    /// points within a step of the relu kink.
    pub fn min_abs_relu_input(&self) -> Option<S> {
        let mut min: Option<S> = None;
        for nd in &self.nodes {
            if let Op::Relu(a) = nd.op {
                for &v in self.nodes[a.0].value.as_slice() {
                    let av = v.abs();
                    min = Some(match min {
                        Some(m) if m <= av => m,
                        _ => av,
                    });
                }
            }
        }
        min
    }

    fn binary_shapes(&self, a: Node, b: Node, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "{} operands differ: {} vs {}",
                what,
                fmt_shape(sa),
                fmt_shape(sb)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shapes(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shapes(a, b, "sub")?;
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_shapes(a, b, "mul")?;
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise max(x, 0); the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Node) -> Node {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Node, c: S) -> Node {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Node) -> Node {
        let mut s = S::zero();
        for &x in self.value(a).as_slice() {
            s += x;
        }
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Scalar dot product with a fixed tensor: sum(a * weights).
    pub fn weighted_sum(&mut self, a: Node, weights: &Tensor<S>) -> Result<Node> {
        if self.value(a).shape() != weights.shape() {
            return Err(Error::shape(format!(
                "weighted_sum operands differ: {} vs {}",
                fmt_shape(self.value(a).shape()),
                fmt_shape(weights.shape())
            )));
        }
        let mut s = S::zero();
        for (&x, &w) in self.value(a).as_slice().iter().zip(weights.as_slice()) {
            s += x * w;
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights.clone())))
    }

    /// 2D cross-correlation (no kernel flip). Weight is
    /// `C_out x C_in/groups x K x K`; bias, when present, has `C_out` entries.
    pub fn conv2d(
        &mut self,
        x: Node,
        w: Node,
        b: Option<Node>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Node> {
        let dims = ConvDims::resolve(
            self.value(x).dims4()?,
            self.value(w).dims4()?,
            stride,
            padding,
            groups,
        )?;
        if let Some(b) = b {
            if self.value(b).numel() != dims.c_out {
                return Err(Error::shape(format!(
                    "bias has {} entries, expected {}",
                    self.value(b).numel(),
                    dims.c_out
                )));
            }
        }
        let out = conv::forward(
            self.value(x).as_slice(),
            self.value(w).as_slice(),
            b.map(|b| self.value(b).as_slice()),
            &dims,
        );
        let v = Tensor::new(&[dims.n, dims.c_out, dims.oh, dims.ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, dims }))
    }

    /// Stacks the channels of `a` before the channels of `b`.
    pub fn concat_channels(&mut self, a: Node, b: Node) -> Result<Node> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(format!(
                "concat_channels batch/spatial mismatch: {} vs {}",
                fmt_shape(self.value(a).shape()),
                fmt_shape(self.value(b).shape())
            )));
        }
        let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
        let plane = ha * wa;
        for n in 0..na {
            let dst = &mut out.as_mut_slice()[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
            dst[..ca * plane]
                .copy_from_slice(&self.value(a).as_slice()[n * ca * plane..(n + 1) * ca * plane]);
            dst[ca * plane..]
                .copy_from_slice(&self.value(b).as_slice()[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(self.push(out, Op::ConcatChannels(a, b)))
    }

    /// Normalizes `x` per channel with the provided statistics, then applies
    /// the affine `gamma * x_hat + beta`. In train mode the statistics are the
    /// batch statistics of `x` and the backward rule differentiates through
    /// them; in eval mode they are constants.
    pub fn batch_norm_with_stats(
        &mut self,
        x: Node,
        gamma: Node,
        beta: Node,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    ) -> Result<Node> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if mean.len() != c || inv_std.len() != c || self.value(gamma).numel() != c
            || self.value(beta).numel() != c
        {
            return Err(Error::shape(format!(
                "batch norm channel mismatch: x has {} channels, stats {}/{}, gamma {}, beta {}",
                c,
                mean.len(),
                inv_std.len(),
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let plane = h * w;
        {
            let xs = self.value(x).as_slice();
            let gs = self.value(gamma).as_slice();
            let bs = self.value(beta).as_slice();
            let os = out.as_mut_slice();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let (m, s, g, bb) = (mean[ch], inv_std[ch], gs[ch], bs[ch]);
                    for i in 0..plane {
                        os[base + i] = (xs[base + i] - m) * s * g + bb;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    /// Scatters per-group patch stacks back onto the image grid and folds to
    /// `1 x 1 x h x w`. Each part is a `g_k x 1 x n x n` node plus the patch
    /// indices its samples occupy; indices must be disjoint across parts.
    pub fn fold_patches(
        &mut self,
        parts: Vec<(Node, Vec<usize>)>,
        h: usize,
        w: usize,
        n: usize,
    ) -> Result<Node> {
        if n == 0 || h % n != 0 || w % n != 0 {
            return Err(Error::invalid(format!(
                "fold target {}x{} not divisible by patch size {}",
                h, w, n
            )));
        }
        let (gh, gw) = (h / n, w / n);
        let p_total = gh * gw;
        let mut seen = vec![false; p_total];
        for (node, idx) in parts.iter() {
            let (g_k, c, ph, pw) = self.value(*node).dims4()?;
            if c != 1 || ph != n || pw != n {
                return Err(Error::shape(format!(
                    "patch group must be g_k x 1 x {} x {}, got {}",
                    n,
                    n,
                    fmt_shape(self.value(*node).shape())
                )));
            }
            if g_k != idx.len() {
                return Err(Error::invalid(format!(
                    "group has {} samples but {} indices",
                    g_k,
                    idx.len()
                )));
            }
            for &pid in idx {
                if pid >= p_total {
                    return Err(Error::invalid(format!(
                        "patch index {} out of range ({} patches)",
                        pid, p_total
                    )));
                }
                if seen[pid] {
                    return Err(Error::invalid(format!("patch index {} assigned twice", pid)));
                }
                seen[pid] = true;
            }
        }
        let mut out = Tensor::zeros(&[1, 1, h, w]);
        for (node, idx) in parts.iter() {
            let src = self.value(*node).as_slice().to_vec();
            for (slot, &pid) in idx.iter().enumerate() {
                let (gy, gx) = (pid / gw, pid % gw);
                for py in 0..n {
                    let s = (slot * n + py) * n;
                    let d = (gy * n + py) * w + gx * n;
                    out.as_mut_slice()[d..d + n].copy_from_slice(&src[s..s + n]);
                }
            }
        }
        Ok(self.push(out, Op::FoldPatches { parts, w }))
    }

    /// Mean over non-ignored pixels of -log softmax(logits)[label].
    /// Logits are `1 x K x H x W`; labels are `H*W` class ids with `ignore`
    /// excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Node, labels: &[u8], ignore: u8) -> Result<Node> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        if n != 1 {
            return Err(Error::shape("cross_entropy expects batch size 1"));
        }
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "labels have {} entries, logits cover {} pixels",
                labels.len(),
                h * w
            )));
        }
        let plane = h * w;
        let xs = self.value(logits).as_slice();
        let mut total = S::zero();
        let mut scored = 0usize;
        for p in 0..plane {
            let l = labels[p];
            if l == ignore {
                continue;
            }
            if l as usize >= k {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    l, k
                )));
            }
            let mut m = xs[p];
            for c in 1..k {
                let z = xs[c * plane + p];
                if z > m {
                    m = z;
                }
            }
            let mut lse = S::zero();
            for c in 0..k {
                lse += (xs[c * plane + p] - m).exp();
            }
            let lse = lse.ln();
            total += lse - (xs[l as usize * plane + p] - m);
            scored += 1;
        }
        if scored == 0 {
            return Err(Error::AllIgnored);
        }
        let v = total / S::from_f64(scored as f64);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                scored,
            },
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Node, target: &Tensor<S>) -> Result<Node> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse operands differ: {} vs {}",
                fmt_shape(self.value(pred).shape()),
                fmt_shape(target.shape())
            )));
        }
        let mut total = S::zero();
        for (&a, &b) in self.value(pred).as_slice().iter().zip(target.as_slice()) {
            let d = a - b;
            total += d * d;
        }
        let v = total / S::from_f64(self.value(pred).numel() as f64);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Every node reachable from the
    /// loss receives d(loss)/d(node) added into its persistent gradient.
    pub fn backward(&mut self, loss: Node) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got {}",
                fmt_shape(self.value(loss).shape())
            )));
        }
        let mut scratch: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g_out) = scratch[i].take() else {
                continue;
            };
            self.propagate(i, &g_out, &mut scratch);
            self.nodes[i].grad.add_assign(&g_out);
        }
        Ok(())
    }

    fn acc_into(
        scratch: &mut [Option<Tensor<S>>],
        shape: &[usize],
        node: Node,
        f: impl FnOnce(&mut [S]),
    ) {
        let t = scratch[node.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(t.as_mut_slice());
    }

    /// Moves a freshly computed full-size gradient into an empty scratch
    /// slot, or adds it elementwise when a contribution is already there.
    fn give_or_add(
        scratch: &mut [Option<Tensor<S>>],
        shape: &[usize],
        node: Node,
        data: Vec<S>,
    ) {
        match &mut scratch[node.0] {
            Some(t) => {
                for (d, &v) in t.as_mut_slice().iter_mut().zip(&data) {
                    *d += v;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, i: usize, g_out: &Tensor<S>, scratch: &mut [Option<Tensor<S>>]) {
        let g = g_out.as_slice();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(node, sign) in &[(*a, S::one()), (*b, S::one())] {
                    let shape = self.nodes[node.0].value.shape();
                    Self::acc_into(scratch, shape, node, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let shape = self.nodes[b.0].value.shape();
                Self::acc_into(scratch, shape, *b, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.as_slice(), self.nodes[b.0].value.as_slice());
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for ((d, &gv), &y) in dst.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                });
                Self::acc_into(scratch, shape, *b, |dst| {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.nodes[a.0].value.as_slice();
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(va) {
                        if x > S::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::WeightedSum(a, weights) => {
                let gv = g[0];
                let ws = weights.as_slice();
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for (d, &w) in dst.iter_mut().zip(ws) {
                        *d += gv * w;
                    }
                });
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = conv::backward(
                    self.nodes[x.0].value.as_slice(),
                    self.nodes[w.0].value.as_slice(),
                    g,
                    b.is_some(),
                    dims,
                );
                Self::give_or_add(scratch, self.nodes[x.0].value.shape(), *x, dx);
                Self::give_or_add(scratch, self.nodes[w.0].value.shape(), *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    Self::give_or_add(scratch, self.nodes[b.0].value.shape(), *b, db);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (na, ca, ha, wa) = self.nodes[a.0].value.dims4().expect("validated");
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = ha * wa;
                let ctot = ca + cb;
                let shape = self.nodes[a.0].value.shape();
                Self::acc_into(scratch, shape, *a, |dst| {
                    for n in 0..na {
                        let src = &g[n * ctot * plane..n * ctot * plane + ca * plane];
                        let d = &mut dst[n * ca * plane..(n + 1) * ca * plane];
                        for (dv, &gv) in d.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
                let shape = self.nodes[b.0].value.shape();
                Self::acc_into(scratch, shape, *b, |dst| {
                    for n in 0..na {
                        let src = &g[n * ctot * plane + ca * plane..(n + 1) * ctot * plane];
                        let d = &mut dst[n * cb * plane..(n + 1) * cb * plane];
                        for (dv, &gv) in d.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("validated");
                let plane = h * w;
                let m_per_c = n * plane;
                let xs = self.nodes[x.0].value.as_slice();
                let gs = self.nodes[gamma.0].value.as_slice();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); xs.len()];
                for ch in 0..c {
                    let (mu, s, gam) = (mean[ch], inv_std[ch], gs[ch]);
                    let mut sum_g = S::zero();
                    let mut sum_gx = S::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let gv = g[base + i];
                            let xh = (xs[base + i] - mu) * s;
                            sum_g += gv;
                            sum_gx += gv * xh;
                        }
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let m = S::from_f64(m_per_c as f64);
                    let (mean_g, mean_gx) = (sum_g / m, sum_gx / m);
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            let gv = g[base + i];
                            let d = if *train {
                                let xh = (xs[base + i] - mu) * s;
                                gam * s * (gv - mean_g - xh * mean_gx)
                            } else {
                                gam * s * gv
                            };
                            dx[base + i] = d;
                        }
                    }
                }
                Self::give_or_add(scratch, self.nodes[x.0].value.shape(), *x, dx);
                Self::give_or_add(scratch, self.nodes[gamma.0].value.shape(), *gamma, dgamma);
                Self::give_or_add(scratch, self.nodes[beta.0].value.shape(), *beta, dbeta);
            }
            Op::FoldPatches { parts, w } => {
                for (node, idx) in parts {
                    let (_, _, n_sz, _) = self.nodes[node.0].value.dims4().expect("validated");
                    let gw = *w / n_sz;
                    let shape = self.nodes[node.0].value.shape();
                    Self::acc_into(scratch, shape, *node, |dst| {
                        for (slot, &pid) in idx.iter().enumerate() {
                            let (gy, gx) = (pid / gw, pid % gw);
                            for py in 0..n_sz {
                                let d = (slot * n_sz + py) * n_sz;
                                let s = (gy * n_sz + py) * *w + gx * n_sz;
                                for j in 0..n_sz {
                                    dst[d + j] += g[s + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                scored,
            } => {
                let (_, k, h, w) = self.nodes[logits.0].value.dims4().expect("validated");
                let plane = h * w;
                let xs = self.nodes[logits.0].value.as_slice();
                let gv = g[0] / S::from_f64(*scored as f64);
                let shape = self.nodes[logits.0].value.shape();
                Self::acc_into(scratch, shape, *logits, |dst| {
                    for p in 0..plane {
                        let l = labels[p];
                        if l == *ignore {
                            continue;
                        }
                        let mut m = xs[p];
                        for c in 1..k {
                            let z = xs[c * plane + p];
                            if z > m {
                                m = z;
                            }
                        }
                        let mut denom = S::zero();
                        for c in 0..k {
                            denom += (xs[c * plane + p] - m).exp();
                        }
                        for c in 0..k {
                            let soft = (xs[c * plane + p] - m).exp() / denom;
                            let ind = if c == l as usize { S::one() } else { S::zero() };
                            dst[c * plane + p] += gv * (soft - ind);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let xs = self.nodes[pred.0].value.as_slice();
                let ts = target.as_slice();
                let scale = g[0] * S::from_f64(2.0 / xs.len() as f64);
                let shape = self.nodes[pred.0].value.shape();
                Self::acc_into(scratch, shape, *pred, |dst| {
                    for ((d, &p), &t) in dst.iter_mut().zip(xs).zip(ts) {
                        *d += scale * (p - t);
                    }
                });
            }
        }
    }
}
