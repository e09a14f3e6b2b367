//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every tensor in the model is a 2-D matrix; per-frame 3-D tensors are held
//! as lists of matrices. Nodes are appended to a [`Graph`] in evaluation
//! order, so a single reverse sweep over the tape computes all gradients.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    BceWithLogits {
        logits: Var,
        targets: Rc<Mat>,
    },
    Dice {
        logits: Var,
        targets: Rc<Mat>,
        smooth: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Build with the op methods, then call [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Mat>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            grads: Vec::new(),
        }
    }

    /// A graph that records values only; `backward` is a no-op.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (when the graph records gradients).
    pub fn variable(&mut self, value: Mat) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter from `store`, reusing the leaf on repeated lookups.
    ///
    /// Frozen parameters enter the tape as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"));
        let v = if p.trainable {
            self.variable(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.params.insert(name.to_string(), v);
        v
    }

    /// Names of every parameter bound on this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[1, m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row: bias shape mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax. Entries that are `-inf` get weight exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = if *x == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*x - max).exp()
                };
                total += *x;
            }
            row.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Adds a constant additive mask (0 or `-inf`) and applies softmax.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Mat) -> Var {
        let masked = self.value(a) + mask;
        // The mask is constant, so route the gradient straight through `a`.
        let shifted = self.push(masked, Op::Scale(a, 1.0), &[a]);
        self.softmax_rows(shifted)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for j in 0..m {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(idx));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    /// Mean over rows, `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty input")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean token cross-entropy of row-wise logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: target count");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let n = targets.len().max(1) as f64;
        let value = Mat::from_elem((1, 1), loss / n);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy with logits; `targets` in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Mat>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "bce: shape mismatch");
        let total: f64 = lv
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Mat::from_elem((1, 1), total / lv.len().max(1) as f64);
        self.push(value, Op::BceWithLogits { logits, targets }, &[logits])
    }

    /// Soft Dice loss `1 - (2 Σ σ(z)t + s) / (Σ σ(z) + Σ t + s)` over all entries.
    pub fn dice_loss(&mut self, logits: Var, targets: Rc<Mat>, smooth: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "dice: shape mismatch");
        let (inter, psum, tsum) = dice_terms(lv, &targets);
        let value = Mat::from_elem((1, 1), 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth));
        self.push(
            value,
            Op::Dice {
                logits,
                targets,
                smooth,
            },
            &[logits],
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return;
        }
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all bound trainable parameters that were reached.
    pub fn param_grads(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *dv -= yv * dot;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.requires_grad(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires_grad(*x) {
                    let dxhat = g * self.value(*gamma);
                    let m = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let mean_dh = dh.sum() / m;
                        let mean_dh_h = dh.dot(&h) / m;
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (i, &idx) in indices.iter().enumerate() {
                    let mut row = d.row_mut(idx);
                    row += &g.row(i);
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (n, m) = self.value(*a).dim();
                let mut d = Mat::zeros((n, m));
                let scaled = g.row(0).mapv(|v| v / n as f64);
                for mut row in d.rows_mut() {
                    row.assign(&scaled);
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                self.accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.len().max(1) as f64;
                let mut d = lv.mapv(sigmoid);
                d -= &**targets;
                d *= g[[0, 0]] / n;
                self.accumulate(grads, *logits, d);
            }
            Op::Dice {
                logits,
                targets,
                smooth,
            } => {
                let lv = self.value(*logits);
                let (inter, psum, tsum) = dice_terms(lv, targets);
                let num = 2.0 * inter + smooth;
                let den = psum + tsum + smooth;
                // d/dp of -(num/den) = -(2t·den - num) / den²
                let mut d = Mat::zeros(lv.dim());
                for ((dv, &z), &t) in d.iter_mut().zip(lv.iter()).zip(targets.iter()) {
                    let p = sigmoid(z);
                    let dp = -(2.0 * t * den - num) / (den * den);
                    *dv = g[[0, 0]] * dp * p * (1.0 - p);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn dice_terms(logits: &Mat, targets: &Mat) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&z, &t) in logits.iter().zip(targets.iter()) {
        let p = sigmoid(z);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    (inter, psum, tsum)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let out = build(&mut g, x);
        g.backward(out);
        let analytic = g.grad(x).unwrap().clone();
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                *xp.iter_mut().nth(idx).unwrap() += delta;
                let mut g = Graph::new();
                let x = g.variable(xp);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = *analytic.iter().nth(idx).unwrap();
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut g = Graph::inference();
        let x = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 5.0]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let mut g = Graph::inference();
        let x = g.constant(array![[1.0, 2.0]]);
        let y = g.masked_softmax_rows(x, &array![[0.0, f64::NEG_INFINITY]]);
        assert_eq!(g.value(y)[[0, 0]], 1.0);
        assert_eq!(g.value(y)[[0, 1]], 0.0);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]];
        check_grad(
            |g, x| {
                let y = g.gelu(x);
                let s = g.softmax_rows(y);
                let m = g.mul(s, x);
                g.sum(m)
            },
            x0.clone(),
        );
        check_grad(
            |g, x| {
                let gamma = g.constant(array![[1.1, 0.9, -0.5]]);
                let beta = g.constant(array![[0.1, 0.2, 0.3]]);
                let y = g.layer_norm(x, gamma, beta);
                let w = g.constant(array![[0.5, -1.0, 2.0], [1.0, 0.3, -0.2]]);
                let z = g.mul(y, w);
                g.sum(z)
            },
            x0.clone(),
        );
        check_grad(
            |g, x| {
                let t = g.mean_rows(x);
                let c = g.concat_rows(&[x, t]);
                let sl = g.slice_cols(c, 1, 3);
                let ga = g.gather_rows(sl, &[0, 2, 2]);
                let p = g.matmul_t(ga, sl);
                g.sum(p)
            },
            x0.clone(),
        );
    }

    #[test]
    fn losses_match_finite_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]];
        let t = Rc::new(array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        check_grad(|g, x| g.cross_entropy(x, &[2, 0]), x0.clone());
        let tt = t.clone();
        check_grad(move |g, x| g.bce_with_logits(x, tt.clone()), x0.clone());
        check_grad(move |g, x| g.dice_loss(x, t.clone(), 1.0), x0);
    }

    #[test]
    fn uniform_logits_give_log_vocab_cross_entropy() {
        let mut g = Graph::inference();
        let x = g.constant(Mat::zeros((3, 7)));
        let ce = g.cross_entropy(x, &[0, 3, 6]);
        assert!((g.scalar(ce) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.variable(array![[3.0], [4.0]]);
        let y = g.matmul(a, b);
        g.backward(y);
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &array![[1.0], [2.0]]);
    }
}
