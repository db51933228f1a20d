//! The recorded operation graph and its backward pass.

use rand::Rng;

use super::{Element, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    /// Valid cross-correlation, stride 1.
    Conv2d {
        x: Var,
        w: Var,
    },
    Relu {
        x: Var,
    },
    /// 2x2 stride-2 max pooling. Per-output argmax (flat input index,
    /// ties to the row-major earliest) recorded in forward and reused to
    /// route gradients in backward.
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Broadcast add of a 1-d bias over the channel (rank 4) or column
    /// (rank 2) dimension.
    AddBias {
        x: Var,
        b: Var,
    },
    Flatten {
        x: Var,
    },
    Dropout {
        x: Var,
        /// Per-element keep decisions recorded in forward, reused in
        /// backward. Empty in eval mode (identity).
        keep: Vec<bool>,
        scale: T,
    },
    Softmax {
        x: Var,
    },
    /// Mean over the batch of -log softmax(logits)[label].
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    /// Mean over rows of sum_c p ln(p/q); the first operand is treated as
    /// a constant target, gradients flow into `q` only.
    KlDiv {
        p: Var,
        q: Var,
    },
    /// Sum over rows of log softmax(logits)[class]; the scalar whose input
    /// gradient is a batch of per-image saliency maps.
    ClassLogProbSum {
        logits: Var,
        classes: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    /// Gradient accumulated over backward passes.
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Probabilities and logs are clamped below at this value inside
/// cross-entropy and KL; masked inputs can push probabilities to
/// numerical zero.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tape of executed operations. Nodes are appended in execution order, so
/// the record is topologically sorted by construction and the backward
/// pass is a single reverse sweep visiting each node exactly once.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
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

    /// Accumulated gradient of `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::ZERO,
            out.data_mut(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::MatMul { a, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: expected rank-4 input and kernel, got {sx:?} and {sw:?}"
            )));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c != cw {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c} != kernel channels {cw}"
            )));
        }
        if h < kh || wd < kw {
            return Err(Error::Shape(format!(
                "conv2d: spatial dims {h}x{wd} smaller than kernel {kh}x{kw}"
            )));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let ckk = c * kh * kw;
        let mut out = Tensor::zeros(vec![n, f, oh, ow]);
        let mut col = vec![T::ZERO; ckk * oh * ow];
        for s in 0..n {
            let xs = &self.value(x).data()[s * c * h * wd..(s + 1) * c * h * wd];
            im2col(xs, c, h, wd, kh, kw, &mut col);
            let os = &mut out.data_mut()[s * f * oh * ow..(s + 1) * f * oh * ow];
            T::gemm(
                f,
                ckk,
                oh * ow,
                T::ONE,
                self.value(w).data(),
                false,
                &col,
                false,
                T::ZERO,
                os,
            );
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(out, rg, Op::Conv2d { x, w }))
    }

    /// 2x2 stride-2 max pooling over the spatial dimensions; odd
    /// trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::Shape(format!(
                "max_pool2d: expected rank-4 input, got {sx:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "max_pool2d: spatial dims {h}x{w} smaller than the 2x2 window"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[argmax.len()] = data[best];
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::MaxPool2d { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (
            self.value(x).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sb.len() != 1 {
            return Err(Error::Shape(format!("add_bias: bias must be 1-d, got {sb:?}")));
        }
        let valid = match sx.len() {
            2 => sx[1] == sb[0],
            4 => sx[1] == sb[0],
            _ => false,
        };
        if !valid {
            return Err(Error::Shape(format!(
                "add_bias: bias {sb:?} does not match input {sx:?}"
            )));
        }
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        if sx.len() == 2 {
            for row in out.data_mut().chunks_mut(sx[1]) {
                for (v, bv) in row.iter_mut().zip(&bd) {
                    *v += *bv;
                }
            }
        } else {
            let plane = sx[2] * sx[3];
            for sample in out.data_mut().chunks_mut(sx[1] * plane) {
                for (ch, chunk) in sample.chunks_mut(plane).enumerate() {
                    for v in chunk {
                        *v += bd[ch];
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(out, rg, Op::AddBias { x, b }))
    }

    /// Reshape to `[N, rest]`, data order preserved.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.is_empty() {
            return Err(Error::Shape("flatten: scalar input".into()));
        }
        let n = sx[0];
        let rest = self.value(x).len() / n;
        let out = self.value(x).reshaped(vec![n, rest])?;
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::Flatten { x }))
    }

    /// In training mode each element is zeroed with probability `rate` and
    /// survivors are scaled by `1/(1-rate)`; eval mode is the exact
    /// identity and consumes no randomness.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout: rate must be in [0, 1), got {rate}"
            )));
        }
        let rg = self.requires(x);
        if !training || rate == 0.0 {
            let out = self.value(x).clone();
            return Ok(self.push(
                out,
                rg,
                Op::Dropout {
                    x,
                    keep: Vec::new(),
                    scale: T::ONE,
                },
            ));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<bool> = (0..self.value(x).len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        let mut out = self.value(x).clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
            *v = if k { *v * scale } else { T::ZERO };
        }
        Ok(self.push(out, rg, Op::Dropout { x, keep, scale }))
    }

    /// Row-wise softmax of a `[N, C]` tensor, stabilized by per-row max
    /// subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::Shape(format!("softmax: expected [N, C], got {sx:?}")));
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax: NaN in input".into()));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(sx[1]) {
            softmax_row(row);
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::Softmax { x }))
    }

    /// Mean over the batch of `-log p(label)`, computed in log-space from
    /// logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.value(logits).shape().to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {sx:?} vs {} labels",
                labels.len()
            )));
        }
        let c = sx[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).clone();
        for row in probs.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        let clamp = T::from_f64(LOG_CLAMP);
        let mut loss = T::ZERO;
        for (i, &label) in labels.iter().enumerate() {
            loss -= probs.row(i)[label].maximum(clamp).ln();
        }
        loss *= T::from_f64(1.0 / labels.len() as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// KL divergence `D(p ‖ q)` as a mean over rows, both operands clamped
    /// below at [`LOG_CLAMP`]. The first operand is a detached target:
    /// gradients flow into `q` only.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.value(p).shape(), self.value(q).shape());
        if sp != sq || sp.len() != 2 {
            return Err(Error::Shape(format!(
                "kl_div: expected matching [N, C] shapes, got {sp:?} and {sq:?}"
            )));
        }
        if self
            .value(p)
            .data()
            .iter()
            .chain(self.value(q).data())
            .any(|v| v.is_nan())
        {
            return Err(Error::Numeric("kl_div: NaN in input".into()));
        }
        let rows = sp[0];
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = T::ZERO;
        for (pv, qv) in self.value(p).data().iter().zip(self.value(q).data()) {
            let pc = pv.maximum(clamp);
            let qc = qv.maximum(clamp);
            total += pc * (pc.ln() - qc.ln());
        }
        total *= T::from_f64(1.0 / rows as f64);
        let rg = self.requires(q);
        Ok(self.push(Tensor::scalar(total), rg, Op::KlDiv { p, q }))
    }

    /// Sum over rows of `log softmax(logits)[class]`. Each row's term
    /// depends only on that row, so the input gradient of this scalar is a
    /// batch of independent per-image saliency maps.
    pub fn class_log_prob_sum(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let sx = self.value(logits).shape().to_vec();
        if sx.len() != 2 || sx[0] != classes.len() {
            return Err(Error::Shape(format!(
                "class_log_prob_sum: logits {sx:?} vs {} classes",
                classes.len()
            )));
        }
        let c = sx[1];
        if let Some(&bad) = classes.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!(
                "class_log_prob_sum: class {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).clone();
        for row in probs.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = T::ZERO;
        for (i, &class) in classes.iter().enumerate() {
            total += probs.row(i)[class].maximum(clamp).ln();
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::ClassLogProbSum {
                logits,
                classes: classes.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut total = T::ZERO;
        for v in self.value(x).data() {
            total += *v;
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += *w;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= *w;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    /// Reverse sweep from a scalar node. Each call computes the full
    /// gradient of `root` and adds it into the accumulated `grad` of every
    /// reachable `requires_grad` tensor.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward: root must be scalar, has shape {:?}",
                self.value(root).shape()
            )));
        }
        // Per-pass gradients, so repeated calls accumulate exactly.
        let mut pass: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        pass[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::ONE));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the contribution of node `i` (upstream gradient `g`) into its
    /// parents' per-pass gradients.
    fn propagate(&self, i: usize, g: &Tensor<T>, pass: &mut [Option<Tensor<T>>]) {
        let mut add_to = |slot: Var, f: &mut dyn FnMut(&mut Tensor<T>)| {
            if !self.requires(slot) {
                return;
            }
            let entry = &mut pass[slot.0];
            if entry.is_none() {
                *entry = Some(Tensor::zeros(self.value(slot).shape().to_vec()));
            }
            f(entry.as_mut().unwrap());
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                add_to(*a, &mut |da| {
                    // dA = g · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        T::ONE,
                        da.data_mut(),
                    );
                });
                add_to(*b, &mut |db| {
                    // dB = Aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        T::ONE,
                        db.data_mut(),
                    );
                });
            }
            Op::Conv2d { x, w } => self.conv2d_backward(*x, *w, g, pass),
            Op::Relu { x } => {
                add_to(*x, &mut |dx| {
                    for ((d, &u), &xv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.value(*x).data())
                    {
                        if xv > T::ZERO {
                            *d += u;
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                add_to(*x, &mut |dx| {
                    for (&src, &u) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src] += u;
                    }
                });
            }
            Op::AddBias { x, b } => {
                add_to(*x, &mut |dx| {
                    for (d, &u) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += u;
                    }
                });
                let sx = self.value(*x).shape().to_vec();
                add_to(*b, &mut |db| {
                    if sx.len() == 2 {
                        for row in g.data().chunks(sx[1]) {
                            for (d, &u) in db.data_mut().iter_mut().zip(row) {
                                *d += u;
                            }
                        }
                    } else {
                        let plane = sx[2] * sx[3];
                        for sample in g.data().chunks(sx[1] * plane) {
                            for (ch, chunk) in sample.chunks(plane).enumerate() {
                                for &u in chunk {
                                    db.data_mut()[ch] += u;
                                }
                            }
                        }
                    }
                });
            }
            Op::Flatten { x } => {
                add_to(*x, &mut |dx| {
                    for (d, &u) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += u;
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                add_to(*x, &mut |dx| {
                    if keep.is_empty() {
                        for (d, &u) in dx.data_mut().iter_mut().zip(g.data()) {
                            *d += u;
                        }
                    } else {
                        for ((d, &u), &k) in dx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                            if k {
                                *d += u * *scale;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let c = self.value(*x).shape()[1];
                let s = &self.nodes[i].value;
                add_to(*x, &mut |dx| {
                    for ((drow, grow), srow) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(s.data().chunks(c))
                    {
                        let mut dot = T::ZERO;
                        for (&gv, &sv) in grow.iter().zip(srow) {
                            dot += gv * sv;
                        }
                        for ((d, &gv), &sv) in drow.iter_mut().zip(grow).zip(srow) {
                            *d += sv * (gv - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let up = g.data()[0];
                let c = probs.shape()[1];
                let inv_n = T::from_f64(1.0 / labels.len() as f64);
                add_to(*logits, &mut |dl| {
                    for ((drow, prow), &label) in
                        dl.data_mut().chunks_mut(c).zip(probs.data().chunks(c)).zip(labels)
                    {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let delta = if j == label { T::ONE } else { T::ZERO };
                            *d += up * inv_n * (p - delta);
                        }
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let up = g.data()[0];
                let rows = self.value(*p).shape()[0];
                let inv_n = T::from_f64(1.0 / rows as f64);
                let clamp = T::from_f64(LOG_CLAMP);
                add_to(*q, &mut |dq| {
                    for ((d, &pv), &qv) in dq
                        .data_mut()
                        .iter_mut()
                        .zip(self.value(*p).data())
                        .zip(self.value(*q).data())
                    {
                        // d/dq [-p ln q] = -p/q; frozen where the clamp is active
                        if qv >= clamp {
                            *d -= up * inv_n * pv.maximum(clamp) / qv;
                        }
                    }
                });
            }
            Op::ClassLogProbSum {
                logits,
                classes,
                probs,
            } => {
                let up = g.data()[0];
                let c = probs.shape()[1];
                add_to(*logits, &mut |dl| {
                    for ((drow, prow), &class) in
                        dl.data_mut().chunks_mut(c).zip(probs.data().chunks(c)).zip(classes)
                    {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let delta = if j == class { T::ONE } else { T::ZERO };
                            *d += up * (delta - p);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let up = g.data()[0];
                add_to(*x, &mut |dx| {
                    for d in dx.data_mut() {
                        *d += up;
                    }
                });
            }
            Op::Add { a, b } => {
                for side in [*a, *b] {
                    add_to(side, &mut |d| {
                        for (dv, &u) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += u;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                add_to(*a, &mut |da| {
                    for ((d, &u), &bv) in da
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.value(*b).data())
                    {
                        *d += u * bv;
                    }
                });
                add_to(*b, &mut |db| {
                    for ((d, &u), &av) in db
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.value(*a).data())
                    {
                        *d += u * av;
                    }
                });
            }
            Op::Scale { x, c } => {
                add_to(*x, &mut |dx| {
                    for (d, &u) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += *c * u;
                    }
                });
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &Tensor<T>, pass: &mut [Option<Tensor<T>>]) {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let ckk = c * kh * kw;
        let need_x = self.requires(x);
        let need_w = self.requires(w);
        if !need_x && !need_w {
            return;
        }
        // Ensure slots exist before splitting borrows.
        if need_x && pass[x.0].is_none() {
            pass[x.0] = Some(Tensor::zeros(sx.clone()));
        }
        if need_w && pass[w.0].is_none() {
            pass[w.0] = Some(Tensor::zeros(sw.clone()));
        }
        let mut col = vec![T::ZERO; ckk * oh * ow];
        let mut dcol = vec![T::ZERO; ckk * oh * ow];
        for s in 0..n {
            let gs = &g.data()[s * f * oh * ow..(s + 1) * f * oh * ow];
            if need_w {
                let xs = &self.value(x).data()[s * c * h * wd..(s + 1) * c * h * wd];
                im2col(xs, c, h, wd, kh, kw, &mut col);
                // dW += g_s · colᵀ
                let dw = pass[w.0].as_mut().unwrap();
                T::gemm(
                    f,
                    oh * ow,
                    ckk,
                    T::ONE,
                    gs,
                    false,
                    &col,
                    true,
                    T::ONE,
                    dw.data_mut(),
                );
            }
            if need_x {
                // dcol = Wᵀ · g_s, then scatter back into the input layout
                T::gemm(
                    ckk,
                    f,
                    oh * ow,
                    T::ONE,
                    self.value(w).data(),
                    true,
                    gs,
                    false,
                    T::ZERO,
                    &mut dcol,
                );
                let dx = pass[x.0].as_mut().unwrap();
                let dxs = &mut dx.data_mut()[s * c * h * wd..(s + 1) * c * h * wd];
                col2im_add(&dcol, c, h, wd, kh, kw, dxs);
            }
        }
    }
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Unfolds a `[C, H, W]` sample into a `[C*kh*kw, OH*OW]` patch matrix.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, out: &mut [T]) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut idx = 0;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                for y in 0..oh {
                    let src = ch * h * w + (y + i) * w + j;
                    out[idx..idx + ow].copy_from_slice(&x[src..src + ow]);
                    idx += ow;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch-matrix gradient back into the
/// `[C, H, W]` layout.
fn col2im_add<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dx: &mut [T],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut idx = 0;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                for y in 0..oh {
                    let dst = ch * h * w + (y + i) * w + j;
                    for (d, &v) in dx[dst..dst + ow].iter_mut().zip(&col[idx..idx + ow]) {
                        *d += v;
                    }
                    idx += ow;
                }
            }
        }
    }
}
