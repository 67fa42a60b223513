//! Reverse-mode tape over the fixed set of layer primitives the encoder and
//! decoder are assembled from. Values are computed eagerly when a node is
//! pushed; [`Graph::backward`] walks the tape once in reverse.

use std::borrow::Cow;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttnShape};
use super::loss;
use super::param::{Gradients, ParamId, ParamSet};
use super::tensor::{gemm, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Swish(Var),
    Gelu(Var),
    Glu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    GroupMean {
        x: Var,
        groups: Vec<Range<usize>>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Loss {
        logits: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One forward computation. Parameter values are borrowed, not copied.
pub struct Graph<'a> {
    params: &'a ParamSet,
    nodes: Vec<Node<'a>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    /// Inference graph: dropout is the identity.
    pub fn new(params: &'a ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(params: &'a ParamSet, rng: ChaCha8Rng) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.nodes.push(Node {
            value: Cow::Borrowed(params.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `1×n` (or length-`n`) bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(NnError::DimMismatch(format!(
                "bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for r in 0..out.rows() {
            for (o, bb) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(NnError::DimMismatch(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= sigmoid(*v);
        }
        self.push(out, Op::Swish(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v).0;
        }
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Gated linear unit over the column halves: `a · sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if cols % 2 != 0 {
            return Err(NnError::DimMismatch("GLU needs an even width".into()));
        }
        let half = cols / 2;
        let mut out = Tensor::zeros(&[rows, half]);
        for r in 0..rows {
            let row = xv.row(r);
            let o = out.row_mut(r);
            for c in 0..half {
                o[c] = row[c] * sigmoid(row[half + c]);
            }
        }
        Ok(self.push(out, Op::Glu(x), &[x]))
    }

    /// Multi-head scaled dot-product attention on projected inputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let shape = attention::check_shapes(qv, kv, vv, heads)?;
        let (out, probs) = attention::forward(qv, kv, vv, &shape, causal, None);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Unfolds `T × C` into `T_out × (kernel·C)` windows with zero padding, so
    /// a 1-D convolution becomes a matmul. `T_out = (T + 2·pad − kernel)/stride + 1`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        if t + 2 * pad < kernel {
            return Err(NnError::DimMismatch(format!(
                "sequence of {t} too short for kernel {kernel}"
            )));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[t_out, kernel * c]);
        for o in 0..t_out {
            let dst = out.row_mut(o);
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    dst[j * c..(j + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        Ok(self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            &[x],
        ))
    }

    /// Per-channel "same" convolution; `w` is `kernel × C` with odd `kernel`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, c) = (xv.rows(), xv.cols());
        let kernel = wv.rows();
        if wv.cols() != c || kernel % 2 == 0 {
            return Err(NnError::DimMismatch(format!(
                "depthwise kernel {:?} for {c} channels",
                wv.shape()
            )));
        }
        let pad = kernel / 2;
        let mut out = Tensor::zeros(&[t, c]);
        for i in 0..t {
            let o = out.row_mut(i);
            for j in 0..kernel {
                let src = (i + j) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(j);
                for ch in 0..c {
                    o[ch] += wr[ch] * xr[ch];
                }
            }
        }
        Ok(self.push(out, Op::DepthwiseConv { x, w }, &[x, w]))
    }

    /// Averages each contiguous row group into one row.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Range<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(&[groups.len(), c]);
        for (g, range) in groups.iter().enumerate() {
            let o = out.row_mut(g);
            for r in range.clone() {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            let inv = 1.0 / range.len() as f64;
            if range.len() > 1 {
                o.iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push(out, Op::GroupMean { x, groups }, &[x])
    }

    /// Row lookup (embedding).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var, NnError> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                size: tv.rows(),
            });
        }
        let c = tv.cols();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn label_smoothed_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_index: Option<usize>,
    ) -> Result<Var, NnError> {
        let (l, grad) = loss::label_smoothed_ce(self.value(logits), targets, smoothing, pad_index)?;
        Ok(self.push(Tensor::scalar(l), Op::Loss { logits, grad }, &[logits]))
    }

    pub fn ctc_loss(&mut self, logits: Var, target: &[usize]) -> Result<Var, NnError> {
        let (l, grad) = loss::ctc_loss(self.value(logits), target)?;
        Ok(self.push(Tensor::scalar(l), Op::Loss { logits, grad }, &[logits]))
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Back-propagates from the scalar `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        node: &Node<'_>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let ga = slot(grads, *a, av.shape());
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        1.0,
                        (ga.data_mut(), k as isize, 1),
                    );
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        1.0,
                        (gb.data_mut(), n as isize, 1),
                    );
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let bshape = val(*b).shape().to_vec();
                    let gb = slot(grads, *b, &bshape);
                    let c = g.cols();
                    for r in 0..g.rows() {
                        for (a, v) in gb.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(*x) {
                        let shape = val(*x).shape().to_vec();
                        slot(grads, *x, &shape).add_assign(g);
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.shape());
                for (a, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *a += s * v;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gam = val(*gamma).data();
                if self.wants(*gamma) {
                    let shape = val(*gamma).shape().to_vec();
                    let gg = slot(grads, *gamma, &shape);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let shape = val(*beta).shape().to_vec();
                    let gb = slot(grads, *beta, &shape);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.shape());
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let dst = gx.row_mut(r);
                        for c in 0..cols {
                            dst[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Swish(x) => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.shape());
                for ((a, &xi), gi) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    let s = sigmoid(xi);
                    *a += gi * (s + xi * s * (1.0 - s));
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.shape());
                for ((a, &xi), gi) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    *a += gi * gelu(xi).1;
                }
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let half = g.cols();
                let gx = slot(grads, *x, xv.shape());
                for r in 0..g.rows() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let dst = gx.row_mut(r);
                    for c in 0..half {
                        let s = sigmoid(row[half + c]);
                        dst[c] += gr[c] * s;
                        dst[half + c] += gr[c] * row[c] * s * (1.0 - s);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let shape = AttnShape {
                    tq: qv.rows(),
                    tk: kv.rows(),
                    dim: qv.cols(),
                    heads: *heads,
                };
                let (dq, dk, dv) = attention::backward(qv, kv, vv, &shape, probs, g);
                for (x, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(*x) {
                        slot(grads, *x, d.shape()).add_assign(&d);
                    }
                }
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let (t, c) = (xv.rows(), xv.cols());
                    let gx = slot(grads, *x, xv.shape());
                    for o in 0..g.rows() {
                        let src_row = g.row(o);
                        for j in 0..*kernel {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let dst = gx.row_mut(src as usize);
                                for (a, b) in dst.iter_mut().zip(&src_row[j * c..(j + 1) * c]) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t, c) = (xv.rows(), xv.cols());
                let kernel = wv.rows();
                let pad = kernel / 2;
                if self.wants(*w) {
                    let gw = slot(grads, *w, wv.shape());
                    for i in 0..t {
                        let gr = g.row(i);
                        for j in 0..kernel {
                            let src = (i + j) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let xr = xv.row(src as usize);
                            let dst = gw.row_mut(j);
                            for ch in 0..c {
                                dst[ch] += gr[ch] * xr[ch];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, xv.shape());
                    for i in 0..t {
                        let gr = g.row(i);
                        for j in 0..kernel {
                            let src = (i + j) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let wr = wv.row(j);
                            let dst = gx.row_mut(src as usize);
                            for ch in 0..c {
                                dst[ch] += gr[ch] * wr[ch];
                            }
                        }
                    }
                }
            }
            Op::GroupMean { x, groups } => {
                let shape = val(*x).shape().to_vec();
                let gx = slot(grads, *x, &shape);
                for (gi, range) in groups.iter().enumerate() {
                    let inv = 1.0 / range.len() as f64;
                    let gr = g.row(gi);
                    for r in range.clone() {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(gr) {
                            *a += b * inv;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let shape = val(*table).shape().to_vec();
                let gt = slot(grads, *table, &shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.shape());
                for ((a, m), b) in gx.data_mut().iter_mut().zip(mask).zip(g.data()) {
                    *a += m * b;
                }
            }
            Op::Loss { logits, grad } => {
                let upstream = g.item();
                let gl = slot(grads, *logits, grad.shape());
                for (a, b) in gl.data_mut().iter_mut().zip(grad.data()) {
                    *a += upstream * b;
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if self.wants(*v) {
                        slot(grads, *v, &[1, 1]).data_mut()[0] += w * g.item();
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let value = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{gradcheck, CoordSelection};
    use crate::nncore::init::xavier_uniform;
    use rand::SeedableRng;

    fn small_params() -> (ParamSet, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let ids = vec![
            ps.add("w1", xavier_uniform(&[6, 8], 6, 8, &mut rng)),
            ps.add("b1", xavier_uniform(&[1, 8], 1, 8, &mut rng)),
            ps.add("g", xavier_uniform(&[1, 4], 1, 4, &mut rng)),
            ps.add("beta", xavier_uniform(&[1, 4], 1, 4, &mut rng)),
            ps.add("dw", xavier_uniform(&[3, 4], 3, 4, &mut rng)),
            ps.add("emb", xavier_uniform(&[5, 4], 5, 4, &mut rng)),
            ps.add("wq", xavier_uniform(&[4, 4], 4, 4, &mut rng)),
            ps.add("out", xavier_uniform(&[4, 5], 4, 5, &mut rng)),
        ];
        (ps, ids)
    }

    /// Exercises every op on a tiny composite and returns the scalar loss.
    fn composite<'a>(g: &mut Graph<'a>, ids: &[ParamId]) -> Result<Var, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = g.input(xavier_uniform(&[7, 3], 3, 3, &mut rng));
        let p: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
        let cols = g.im2col(x, 2, 2, 1)?; // 7 frames -> 4
        let h = g.matmul(cols, p[0])?;
        let h = g.add_bias(h, p[1])?;
        let h = g.glu(h)?; // 4 x 4
        let h = g.swish(h);
        let h = g.layer_norm(h, p[2], p[3]);
        let h = g.depthwise_conv(h, p[4])?;
        let h = g.group_mean(h, vec![0..2, 2..3, 3..4]);
        let e = g.gather(p[5], &[1, 3, 3, 0])?;
        let e = g.gelu(e);
        let q = g.matmul(e, p[6])?;
        let a = g.attention(q, h, h, 2, false)?;
        let s = g.attention(a, e, e, 2, true)?;
        let s = g.scale(s, 0.7);
        let s = g.add(s, e)?;
        let logits = g.matmul(s, p[7])?;
        let ce = g.label_smoothed_ce(logits, &[1, 2, 0, 4], 0.1, Some(0))?;
        let ctc_logits = g.matmul(h, p[6])?;
        let ctc = g.ctc_loss(ctc_logits, &[2, 1])?;
        Ok(g.weighted_sum(&[(ce, 1.0), (ctc, 0.3)]))
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let (mut ps, ids) = small_params();
        let report = gradcheck(
            &mut ps,
            |p| {
                let mut g = Graph::new(p);
                let root = composite(&mut g, &ids)?;
                Ok((g.value(root).item(), g.backward(root)))
            },
            1e-6,
            CoordSelection::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, ps.num_elements());
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let (ps, ids) = small_params();
        let mut g = Graph::new(&ps);
        let w = g.param(ids[0]);
        assert_eq!(g.dropout(w, 0.5), w);
        let mut t = Graph::training(&ps, ChaCha8Rng::seed_from_u64(1));
        let w = t.param(ids[0]);
        let d = t.dropout(w, 0.5);
        assert_ne!(d, w);
        let zeros = t.value(d).data().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 0 && zeros < 48);
    }

    #[test]
    fn inputs_do_not_receive_gradients() {
        let (ps, ids) = small_params();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::filled(&[2, 6], 1.0));
        let w = g.param(ids[0]);
        let y = g.matmul(x, w).unwrap();
        let l = g.label_smoothed_ce(y, &[0, 1], 0.0, None).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(ids[0]).is_some());
        assert!(grads.get(ids[1]).is_none());
    }
}
