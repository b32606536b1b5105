//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are 2-D; a
//! mini-batch of token sequences is stored as one tall matrix whose rows are
//! grouped by [`Segments`] (one segment per sequence), so the dense linear
//! algebra runs on whole batches while attention, pooling, convolution and
//! the state-space scan respect sequence boundaries.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Row ranges partitioning a tall matrix into independent sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Arc<Vec<Range<usize>>>);

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let ranges = lengths
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect();
        Segments(Arc::new(ranges))
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Self::from_lengths(&vec![len; count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.0.last().map_or(0, |r| r.end)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Range<usize>> {
        self.0.iter()
    }

    pub fn get(&self, i: usize) -> Range<usize> {
        self.0[i].clone()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.0.iter().map(|r| r.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Segments,
        heads: usize,
        probs: Vec<Mat>,
    },
    SelectRows(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    SegmentMean(Var, Segments),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        segs: Segments,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        segs: Segments,
        states: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph (tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every trainable parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Forward pass of the diagonal selective scan over one or more sequences.
///
/// Per row `t` of a sequence, with `a` the `d × n` state matrix:
/// `h_t = exp(delta_t ⊙ a) ⊙ h_{t-1} + delta_t ⊙ x_t ⊗ b_t` and
/// `y_t = h_t · c_t + d ⊙ x_t`. Returns `(y, states)` where `states` holds
/// every `h_t` flattened row-major (`d × n` per row).
///
/// The prefix recurrence is evaluated as a log-depth associative scan over
/// `(decay, input)` pairs rather than a step-by-step loop.
pub fn selective_scan(
    x: &Mat,
    delta: &Mat,
    a: &Mat,
    b: &Mat,
    c: &Mat,
    d: &Mat,
    segs: &Segments,
) -> (Mat, Mat) {
    let (rows, dim) = x.dim();
    let n = a.ncols();
    let mut decay = Mat::zeros((rows, dim * n));
    let mut acc = Mat::zeros((rows, dim * n));
    for t in 0..rows {
        for i in 0..dim {
            let dt = delta[[t, i]];
            let dx = dt * x[[t, i]];
            for j in 0..n {
                decay[[t, i * n + j]] = (dt * a[[i, j]]).exp();
                acc[[t, i * n + j]] = dx * b[[t, j]];
            }
        }
    }
    // Hillis–Steele inclusive scan with the operator
    // (a1, u1) ∘ (a2, u2) = (a1·a2, a2·u1 + u2), sweeping t downwards so each
    // level reads the previous level's values.
    for seg in segs.iter() {
        let len = seg.len();
        let mut offset = 1;
        while offset < len {
            for t in (seg.start + offset..seg.end).rev() {
                let (lo, hi) = (t - offset, t);
                for k in 0..dim * n {
                    let a_hi = decay[[hi, k]];
                    acc[[hi, k]] += a_hi * acc[[lo, k]];
                    decay[[hi, k]] = a_hi * decay[[lo, k]];
                }
            }
            offset *= 2;
        }
    }
    let mut y = Mat::zeros((rows, dim));
    for t in 0..rows {
        for i in 0..dim {
            let mut v = d[[0, i]] * x[[t, i]];
            for j in 0..n {
                v += acc[[t, i * n + j]] * c[[t, j]];
            }
            y[[t, i]] = v;
        }
    }
    (y, acc)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used for gradient checks).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node
    /// so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Broadcast-multiply every row of `a` by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let value = &(&xhat * self.value(gamma)) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column-wise (per-feature) normalisation over all rows using batch
    /// statistics. Returns the output and the biased batch mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let mut var = vec![0.0; cols];
        for row in xv.rows() {
            for (j, &v) in row.iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let value = &(&xhat * self.value(gamma)) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (out, mean.to_vec(), var)
    }

    /// Multi-head scaled dot-product attention, restricted to each segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(segs.total_rows(), rows, "segments must cover all rows");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, dim));
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for seg in segs.iter() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![seg.clone(), cols.clone()]);
                let kh = kv.slice(s![seg.clone(), cols.clone()]);
                let vh = vv.slice(s![seg.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![seg.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Gather rows by index; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = self.value(x).select(Axis(0), &idx);
        let rg = self.rg(x);
        self.push(value, Op::SelectRows(x, idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over the rows of every segment, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((segs.len(), xv.ncols()));
        for (i, seg) in segs.iter().enumerate() {
            let m = xv
                .slice(s![seg.clone(), ..])
                .mean_axis(Axis(0))
                .expect("non-empty segment");
            out.row_mut(i).assign(&m);
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMean(x, segs.clone()), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Mean softmax cross-entropy over rows. When `exclude_diagonal` is set the
    /// logits matrix must be square and entry `(i, i)` is left out of row
    /// `i`'s normaliser (the NT-Xent construction).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude_diagonal: bool) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.dim();
        assert_eq!(rows, targets.len());
        let mut probs = Mat::zeros((rows, cols));
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let allowed = |j: usize| !(exclude_diagonal && j == i);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(*j))
                .fold(f64::NEG_INFINITY, |a, (_, &b)| a.max(b));
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    probs[[i, j]] = e;
                    sum += e;
                }
            }
            probs.row_mut(i).mapv_inplace(|p| p / sum);
            total += max + sum.ln() - row[targets[i]];
        }
        let value = Mat::from_elem((1, 1), total / rows as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Depthwise causal convolution along rows inside each segment:
    /// `y[t] = b + Σ_k w[k] ⊙ x[t - (K-1) + k]`, zero-padded at the segment start.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, segs: &Segments) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, dim) = xv.dim();
        let width = wv.nrows();
        let mut out = Mat::zeros((rows, dim));
        for seg in segs.iter() {
            for t in seg.clone() {
                for i in 0..dim {
                    let mut acc = bv[[0, i]];
                    for k in 0..width {
                        let lag = width - 1 - k;
                        if t >= seg.start + lag {
                            acc += wv[[k, i]] * xv[[t - lag, i]];
                        }
                    }
                    out[[t, i]] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out,
            Op::CausalConv {
                x,
                w,
                b,
                segs: segs.clone(),
            },
            rg,
        )
    }

    /// Diagonal selective state-space scan; see [`selective_scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        segs: &Segments,
    ) -> Var {
        let (y, states) = selective_scan(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
            segs,
        );
        let rg = [x, delta, a, b, c, d].iter().any(|&v| self.rg(v));
        self.push(
            y,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                segs: segs.clone(),
                states,
            },
            rg,
        )
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|p| p.0);
        Grads { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*row));
                }
                if self.rg(*row) {
                    let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, gr);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut ga = val(*a).mapv(gelu_grad);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Silu(a) => {
                let mut ga = val(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = val(*a).mapv(sigmoid);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = node.value.mapv(|s| s * (1.0 - s));
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = node.value.mapv(|t| 1.0 - t * t);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => self.acc(grads, *a, g * &node.value),
            Op::Square(a) => self.acc(grads, *a, g * &(val(*a) * 2.0)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gxhat = g * val(*gamma);
                    let cols = gxhat.ncols() as f64;
                    let mut gx = Mat::zeros(gxhat.dim());
                    for r in 0..gxhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = gr.sum() / cols;
                        let m2 = gr.dot(&xr) / cols;
                        Zip::from(gx.row_mut(r))
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = inv_std[r] * (gv - m1 - xv * m2));
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gxhat = g * val(*gamma);
                    let rows = gxhat.nrows() as f64;
                    let m1 = gxhat.sum_axis(Axis(0)) / rows;
                    let m2 = (&gxhat * xhat).sum_axis(Axis(0)) / rows;
                    let mut gx = gxhat.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = inv_std[j] * (*v - m1[j] - xhat[[r, j]] * m2[j]);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Mat::zeros(qv.dim());
                let mut gk = Mat::zeros(kv.dim());
                let mut gv = Mat::zeros(vv.dim());
                for (si, seg) in segs.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![seg.clone(), cols.clone()]);
                        let qh = qv.slice(s![seg.clone(), cols.clone()]);
                        let kh = kv.slice(s![seg.clone(), cols.clone()]);
                        let vh = vv.slice(s![seg.clone(), cols.clone()]);
                        gv.slice_mut(s![seg.clone(), cols.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = &dp * p;
                        for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                            let dot = row.sum();
                            row.zip_mut_with(&p.row(r), |d, &pv| *d -= pv * dot);
                        }
                        gq.slice_mut(s![seg.clone(), cols.clone()])
                            .assign(&(ds.dot(&kh) * scale));
                        gk.slice_mut(s![seg.clone(), cols])
                            .assign(&(ds.t().dot(&qh) * scale));
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::SelectRows(x, idx) => {
                if self.rg(*x) {
                    let mut gx = Mat::zeros(val(*x).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(i);
                        dst += &g.row(r);
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if self.rg(p) {
                        self.acc(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SegmentMean(x, segs) => {
                let mut gx = Mat::zeros(val(*x).dim());
                for (i, seg) in segs.iter().enumerate() {
                    let share = g.row(i).mapv(|v| v / seg.len() as f64);
                    for r in seg.clone() {
                        gx.row_mut(r).assign(&share);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = row.dot(&yr);
                    row.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * dot) / norms[r]);
                }
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Mat::from_elem(val(*x).dim(), g[[0, 0]]);
                self.acc(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = val(*x).len() as f64;
                let gx = Mat::from_elem(val(*x).dim(), g[[0, 0]] / n);
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = probs.nrows() as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[[i, t]] -= 1.0;
                }
                gl *= g[[0, 0]] / rows;
                self.acc(grads, *logits, gl);
            }
            Op::CausalConv { x, w, b, segs } => {
                let (xv, wv) = (val(*x), val(*w));
                let dim = xv.ncols();
                let width = wv.nrows();
                let mut gx = Mat::zeros(xv.dim());
                let mut gw = Mat::zeros(wv.dim());
                for seg in segs.iter() {
                    for t in seg.clone() {
                        for k in 0..width {
                            let lag = width - 1 - k;
                            if t < seg.start + lag {
                                continue;
                            }
                            for i in 0..dim {
                                gx[[t - lag, i]] += g[[t, i]] * wv[[k, i]];
                                gw[[k, i]] += g[[t, i]] * xv[[t - lag, i]];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if self.rg(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                d,
                segs,
                states,
            } => {
                let (xv, dv, av, bv, cv, skip) =
                    (val(*x), val(*delta), val(*a), val(*b), val(*c), val(*d));
                let (_, dim) = xv.dim();
                let n = av.ncols();
                let mut gx = Mat::zeros(xv.dim());
                let mut gdelta = Mat::zeros(dv.dim());
                let mut ga = Mat::zeros(av.dim());
                let mut gb = Mat::zeros(bv.dim());
                let mut gc = Mat::zeros(cv.dim());
                let mut gd = Mat::zeros(skip.dim());
                let mut gh = vec![0.0; dim * n];
                for seg in segs.iter() {
                    gh.iter_mut().for_each(|v| *v = 0.0);
                    for t in seg.clone().rev() {
                        for i in 0..dim {
                            let gy = g[[t, i]];
                            gd[[0, i]] += gy * xv[[t, i]];
                            gx[[t, i]] += gy * skip[[0, i]];
                            let dt = dv[[t, i]];
                            let xt = xv[[t, i]];
                            for j in 0..n {
                                let k = i * n + j;
                                let h = states[[t, k]];
                                gc[[t, j]] += gy * h;
                                // dL/dh_t: direct readout plus the carry from t+1
                                // (already folded into gh[k]).
                                let ght = gh[k] + gy * cv[[t, j]];
                                let h_prev = if t > seg.start { states[[t - 1, k]] } else { 0.0 };
                                let decay = (dt * av[[i, j]]).exp();
                                let g_decay = ght * h_prev * decay;
                                gdelta[[t, i]] += g_decay * av[[i, j]] + ght * bv[[t, j]] * xt;
                                ga[[i, j]] += g_decay * dt;
                                gb[[t, j]] += ght * dt * xt;
                                gx[[t, i]] += ght * dt * bv[[t, j]];
                                gh[k] = ght * decay;
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *delta, gdelta);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
                self.acc(grads, *c, gc);
                self.acc(grads, *d, gd);
            }
        }
    }
}
