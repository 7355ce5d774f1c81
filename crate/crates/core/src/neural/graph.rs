//! Reverse-mode differentiation tape over 2-D arrays.
//!
//! Every value is an `Array2<f64>`; vectors are `1 × n` rows or `n × 1`
//! columns. Operations append a node holding the forward value and the
//! indices of its inputs; [`Graph::backward`] walks the tape in reverse.
//! Nodes that do not depend on a trainable leaf never receive gradients.
//!
//! Shape mismatches inside an op are programming errors and panic; layer
//! functions validate user-facing shapes before recording anything.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::{ParameterSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var, f64),
    Abs(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Flatten(Var),
    Sum(Var),
    Mean(Var),
    /// `Hᵀ x`: per-hyperedge sums of member rows.
    GatherEdges(Var, Arc<Vec<Vec<usize>>>),
    /// `H y`: per-node sums of incident hyperedge rows.
    ScatterNodes(Var, Arc<Vec<Vec<usize>>>),
    /// Per-hyperedge `Σ_{h≠k} |a_hk|`; `true` marks edges held at the floor.
    PairAbsSum(Var, Arc<Vec<Vec<usize>>>, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Trainable leaves bound from a [`ParameterSet`], by name.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every bound parameter that received one.
    pub fn for_bindings(&self, bindings: &Bindings) -> BTreeMap<String, Array2<f64>> {
        bindings
            .vars
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind every parameter; those for which `trainable` is false become
    /// constants.
    pub fn bind_with(&mut self, params: &ParameterSet, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, t): (&str, &Tensor)| {
                let v = if trainable(name) && t.requires_grad {
                    self.leaf(t.value.clone())
                } else {
                    self.constant(t.value.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bindings { vars }
    }

    pub fn bind(&mut self, params: &ParameterSet) -> Bindings {
        self.bind_with(params, |_| true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    /// `a + b` with a `1 × n` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row expects a 1 × n row");
        let v = self.value(a) + self.value(b);
        self.push_op(v, Op::AddRow(a, b), &[a, b])
    }

    /// Scale row `i` of `a` by `v[i]`, with `v` an `m × 1` column.
    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(v), (m, 1), "mul_col expects an m × 1 column");
        let out = self.value(a) * self.value(v);
        self.push_op(out, Op::MulCol(a, v), &[a, v])
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push_op(v, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).mapv(|x| elu(x, alpha));
        self.push_op(v, Op::Elu(a, alpha), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push_op(v, Op::Abs(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push_op(v, Op::Powf(a, p), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push_op(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push_op(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(v, Op::SliceCols(a, start), &[a])
    }

    /// Row `i` as a `1 × n` node.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..=i, ..]).to_owned();
        self.push_op(v, Op::Row(a, i), &[a])
    }

    /// Stack `1 × n` rows into a `k × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let views: Vec<_> = rows.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows column mismatch");
        self.push_op(v, Op::StackRows(rows.to_vec()), rows)
    }

    /// Row-major reshape to `1 × (m·n)`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.len();
        let v = Array2::from_shape_vec((1, n), src.iter().copied().collect()).unwrap();
        self.push_op(v, Op::Flatten(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Array2::from_elem((1, 1), src.sum() / src.len() as f64);
        self.push_op(v, Op::Mean(a), &[a])
    }

    /// `Hᵀ x` for incidence given as member lists; output has one row per
    /// hyperedge.
    pub fn gather_edges(&mut self, x: Var, members: &Arc<Vec<Vec<usize>>>) -> Var {
        let v = gather_edges(self.value(x), members);
        self.push_op(v, Op::GatherEdges(x, members.clone()), &[x])
    }

    /// `H y` for incidence given as member lists; output has `n_nodes` rows.
    pub fn scatter_nodes(&mut self, y: Var, members: &Arc<Vec<Vec<usize>>>, n_nodes: usize) -> Var {
        let v = scatter_nodes(self.value(y), members, n_nodes);
        self.push_op(v, Op::ScatterNodes(y, members.clone()), &[y])
    }

    /// Hyperedge weights `Σ_{h≠k ∈ e} |a_hk|` as an `E × 1` column, with
    /// values below `floor` replaced by `floor` (and no gradient).
    pub fn pair_abs_sum(&mut self, a: Var, members: &Arc<Vec<Vec<usize>>>, floor: f64) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((members.len(), 1));
        let mut floored = vec![false; members.len()];
        for (e, nodes) in members.iter().enumerate() {
            let mut w = 0.0;
            for &h in nodes {
                for &k in nodes {
                    if h != k {
                        w += src[[h, k]].abs();
                    }
                }
            }
            if w < floor {
                w = floor;
                floored[e] = true;
            }
            out[[e, 0]] = w;
        }
        self.push_op(out, Op::PairAbsSum(a, members.clone(), floored), &[a])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, v) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*v));
                }
                if self.wants(*v) {
                    let gv = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::Affine(a, scale) => self.accumulate(grads, *a, g * *scale),
            Op::Sigmoid(a) => {
                let d = out.mapv(|y| y * (1.0 - y));
                self.accumulate(grads, *a, g * &d);
            }
            Op::Tanh(a) => {
                let d = out.mapv(|y| 1.0 - y * y);
                self.accumulate(grads, *a, g * &d);
            }
            Op::Elu(a, alpha) => {
                let x = self.value(*a);
                let mut d = x.mapv(|x| if x > 0.0 { 1.0 } else { alpha * x.exp() });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let mut d = x.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let mut d = x.mapv(|x| p * x.powf(p - 1.0));
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Array2::zeros(out.dim());
                for ((mut drow, yrow), grow) in d.rows_mut().into_iter().zip(out.rows()).zip(g.rows()) {
                    let dot = yrow.dot(&grow);
                    for ((dv, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Row(a, i) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.row_mut(*i).assign(&g.row(0));
                    self.accumulate(grads, *a, d);
                }
            }
            Op::StackRows(rows) => {
                for (k, &r) in rows.iter().enumerate() {
                    if self.wants(r) {
                        self.accumulate(grads, r, g.slice(s![k..=k, ..]).to_owned());
                    }
                }
            }
            Op::Flatten(a) => {
                let shape = self.shape(*a);
                let d = Array2::from_shape_vec(shape, g.iter().copied().collect()).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => self.accumulate(grads, *a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::GatherEdges(x, members) => {
                let n = self.shape(*x).0;
                self.accumulate(grads, *x, scatter_nodes(g, members, n));
            }
            Op::ScatterNodes(y, members) => {
                self.accumulate(grads, *y, gather_edges(g, members));
            }
            Op::PairAbsSum(a, members, floored) => {
                if self.wants(*a) {
                    let src = self.value(*a);
                    let mut d = Array2::zeros(src.dim());
                    for (e, nodes) in members.iter().enumerate() {
                        if floored[e] {
                            continue;
                        }
                        let ge = g[[e, 0]];
                        for &h in nodes {
                            for &k in nodes {
                                if h != k {
                                    let x = src[[h, k]];
                                    d[[h, k]] += ge * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x` for `x > 0`, `α(eˣ − 1)` otherwise.
pub fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * (x.exp() - 1.0)
    }
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

fn gather_edges(x: &Array2<f64>, members: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((members.len(), x.ncols()));
    for (e, nodes) in members.iter().enumerate() {
        let mut row = out.row_mut(e);
        for &v in nodes {
            row += &x.row(v);
        }
    }
    out
}

fn scatter_nodes(y: &Array2<f64>, members: &[Vec<usize>], n_nodes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n_nodes, y.ncols()));
    for (e, nodes) in members.iter().enumerate() {
        for &v in nodes {
            let mut row = out.row_mut(v);
            row += &y.row(e);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.leaf(array![[5.0], [6.0]]);
        let c = g.matmul(a, b);
        let s = g.sum(c);
        assert_eq!(g.scalar(s), 17.0 + 39.0);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(grads.get(b).unwrap(), &array![[4.0], [6.0]]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0]]);
        let b = g.leaf(array![[2.0]]);
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &array![[1.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = array![[1000.0, 1000.0], [-3.0, 5.0]];
        let s = softmax_rows(&a);
        for r in s.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
            assert!(r.iter().all(|&x| x > 0.0));
        }
        assert_eq!(s[[0, 0]], 0.5);
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(1.0, 0.3), 1.0);
        assert_eq!(elu(0.0, 0.3), 0.0);
        assert!((elu(-1.0, 1.0) - (-1.0f64).exp_m1()).abs() < 1e-16);
        assert!((elu(-1.0, 1.0) + 0.632_120_558_828_557_7).abs() < 1e-15);
    }

    #[test]
    fn elu_gradient_at_zero_is_alpha() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.0]]);
        let y = g.elu(x, 0.7);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 0.7);
    }

    #[test]
    fn incidence_products() {
        let members = Arc::new(vec![vec![0, 1], vec![1, 2]]);
        let x = array![[1.0], [2.0], [4.0]];
        assert_eq!(gather_edges(&x, &members), array![[3.0], [6.0]]);
        assert_eq!(scatter_nodes(&array![[1.0], [10.0]], &members, 3), array![[1.0], [11.0], [10.0]]);
    }
}
