//! Layer functions recorded on a [`Graph`].
//!
//! Each layer reads its parameters from [`Bindings`] under a name prefix and
//! checks their shapes first, so a bad checkpoint or a wrong configuration
//! is reported against the offending parameter. Sequences are `m × d`
//! matrices with one row per time step.

use std::sync::Arc;

use ndarray::Array2;

use super::graph::{Bindings, Graph, Var};
use super::{NeuralError, ParamSpec};
use crate::hypergraph::HypergraphSnapshot;

fn param(g: &Graph, b: &Bindings, name: &str, expected: (usize, usize)) -> Result<Var, NeuralError> {
    let v = b.get(name).ok_or_else(|| NeuralError::MissingParam(name.to_string()))?;
    let actual = g.shape(v);
    if actual != expected {
        return Err(NeuralError::ParamShape {
            name: name.to_string(),
            expected,
            actual,
        });
    }
    Ok(v)
}

fn check_input(g: &Graph, v: Var, name: &str, expected: (usize, usize)) -> Result<(), NeuralError> {
    let actual = g.shape(v);
    if actual != expected {
        return Err(NeuralError::InputShape {
            name: name.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Elu(f64),
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Self::Identity => x,
            Self::Elu(alpha) => g.elu(x, alpha),
        }
    }
}

pub fn gru_param_shapes(prefix: &str, n_in: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for gate in ["r", "u", "z"] {
        out.push(ParamSpec::weight(format!("{prefix}.w_x{gate}"), n_in, hidden));
        out.push(ParamSpec::weight(format!("{prefix}.w_z{gate}"), hidden, hidden));
        out.push(ParamSpec::zero(format!("{prefix}.b_{gate}"), 1, hidden));
    }
    out
}

/// Gated recurrent unit over the rows of `x`; returns every hidden state.
///
/// `r = σ(x W_xr + z W_zr + b_r)`, `u = σ(x W_xu + z W_zu + b_u)`,
/// `z̃ = tanh(x W_xz + (r ⊙ z) W_zz + b_z)`, `z ← u ⊙ z + (1 − u) ⊙ z̃`.
pub fn gru_forward(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    hidden: usize,
    z0: Option<Var>,
) -> Result<Var, NeuralError> {
    let (m, n_in) = g.shape(x);
    if m == 0 {
        return Err(NeuralError::InvalidArgument("empty input sequence".into()));
    }
    let mut pre = Vec::with_capacity(3);
    let mut rec = Vec::with_capacity(3);
    for gate in ["r", "u", "z"] {
        let wx = param(g, b, &format!("{prefix}.w_x{gate}"), (n_in, hidden))?;
        let wz = param(g, b, &format!("{prefix}.w_z{gate}"), (hidden, hidden))?;
        let bias = param(g, b, &format!("{prefix}.b_{gate}"), (1, hidden))?;
        let xw = g.matmul(x, wx);
        pre.push(g.add_row(xw, bias));
        rec.push(wz);
    }
    let mut z = match z0 {
        Some(z0) => {
            check_input(g, z0, "initial hidden state", (1, hidden))?;
            z0
        }
        None => g.constant(Array2::zeros((1, hidden))),
    };
    let mut states = Vec::with_capacity(m);
    for t in 0..m {
        let xr = g.row(pre[0], t);
        let xu = g.row(pre[1], t);
        let xz = g.row(pre[2], t);
        let zr = g.matmul(z, rec[0]);
        let r_in = g.add(xr, zr);
        let r = g.sigmoid(r_in);
        let zu = g.matmul(z, rec[1]);
        let u_in = g.add(xu, zu);
        let u = g.sigmoid(u_in);
        let rz = g.mul(r, z);
        let rzw = g.matmul(rz, rec[2]);
        let c_in = g.add(xz, rzw);
        let cand = g.tanh(c_in);
        let keep = g.mul(u, z);
        let one_minus_u = g.one_minus(u);
        let fresh = g.mul(one_minus_u, cand);
        z = g.add(keep, fresh);
        states.push(z);
    }
    Ok(g.stack_rows(&states))
}

pub fn lstm_param_shapes(prefix: &str, n_in: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_ih"), n_in, 4 * hidden),
        ParamSpec::weight(format!("{prefix}.w_hh"), hidden, 4 * hidden),
        ParamSpec::zero(format!("{prefix}.b"), 1, 4 * hidden),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct LstmOutput {
    /// `m × hidden`, one row per step.
    pub hidden: Var,
    /// Final cell state, `1 × hidden`.
    pub cell: Var,
}

/// Long short-term memory over the rows of `x`. Gate blocks are ordered
/// input, forget, candidate, output.
pub fn lstm_forward(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    hidden: usize,
    state0: Option<(Var, Var)>,
) -> Result<LstmOutput, NeuralError> {
    let (m, n_in) = g.shape(x);
    if m == 0 {
        return Err(NeuralError::InvalidArgument("empty input sequence".into()));
    }
    let w_ih = param(g, b, &format!("{prefix}.w_ih"), (n_in, 4 * hidden))?;
    let w_hh = param(g, b, &format!("{prefix}.w_hh"), (hidden, 4 * hidden))?;
    let bias = param(g, b, &format!("{prefix}.b"), (1, 4 * hidden))?;
    let (mut h, mut c) = match state0 {
        Some((h0, c0)) => {
            check_input(g, h0, "initial hidden state", (1, hidden))?;
            check_input(g, c0, "initial cell state", (1, hidden))?;
            (h0, c0)
        }
        None => {
            let h0 = g.constant(Array2::zeros((1, hidden)));
            let c0 = g.constant(Array2::zeros((1, hidden)));
            (h0, c0)
        }
    };
    let xw = g.matmul(x, w_ih);
    let pre = g.add_row(xw, bias);
    let mut states = Vec::with_capacity(m);
    for t in 0..m {
        let xt = g.row(pre, t);
        let hw = g.matmul(h, w_hh);
        let gates = g.add(xt, hw);
        let i_pre = g.slice_cols(gates, 0, hidden);
        let f_pre = g.slice_cols(gates, hidden, 2 * hidden);
        let g_pre = g.slice_cols(gates, 2 * hidden, 3 * hidden);
        let o_pre = g.slice_cols(gates, 3 * hidden, 4 * hidden);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let kept = g.mul(f, c);
        let added = g.mul(i, cand);
        c = g.add(kept, added);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        states.push(h);
    }
    Ok(LstmOutput {
        hidden: g.stack_rows(&states),
        cell: c,
    })
}

pub fn mha_param_shapes(prefix: &str, d: usize, n_heads: usize) -> Result<Vec<ParamSpec>, NeuralError> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NeuralError::InvalidArgument(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dk = d / n_heads;
    let mut out = Vec::new();
    for k in 0..n_heads {
        out.push(ParamSpec::weight(format!("{prefix}.w_q.{k}"), d, dk));
        out.push(ParamSpec::weight(format!("{prefix}.w_k.{k}"), d, dk));
        out.push(ParamSpec::weight(format!("{prefix}.w_v.{k}"), d, dk));
    }
    out.push(ParamSpec::weight(format!("{prefix}.w_o"), d, d));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Var,
    /// Per-head `m × m` attention weights.
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention with `n_heads` heads over the rows of
/// `h`, followed by the output projection.
pub fn mha_forward(g: &mut Graph, b: &Bindings, prefix: &str, h: Var, n_heads: usize) -> Result<MhaOutput, NeuralError> {
    let (_, d) = g.shape(h);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NeuralError::InvalidArgument(format!(
            "model width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for k in 0..n_heads {
        let wq = param(g, b, &format!("{prefix}.w_q.{k}"), (d, dk))?;
        let wk = param(g, b, &format!("{prefix}.w_k.{k}"), (d, dk))?;
        let wv = param(g, b, &format!("{prefix}.w_v.{k}"), (d, dk))?;
        let q = g.matmul(h, wq);
        let key = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let kt = g.transpose(key);
        let raw = g.matmul(q, kt);
        let scores = g.scale(raw, scale);
        let alpha = g.softmax_rows(scores);
        heads.push(g.matmul(alpha, v));
        weights.push(alpha);
    }
    let w_o = param(g, b, &format!("{prefix}.w_o"), (d, d))?;
    let cat = g.concat_cols(&heads);
    Ok(MhaOutput {
        output: g.matmul(cat, w_o),
        weights,
    })
}

pub fn latent_attention_param_shapes(prefix: &str, hidden: usize, n_nodes: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_q"), hidden, n_nodes),
        ParamSpec::weight(format!("{prefix}.w_k"), hidden, n_nodes),
    ]
}

/// Node-to-node attention `softmax(Qᵀ K / √N)` with `Q = Z W_Q`, `K = Z W_K`
/// for a latent sequence `z` of shape `m × hidden`. Output is `N × N`.
pub fn latent_attention(g: &mut Graph, b: &Bindings, prefix: &str, z: Var, n_nodes: usize) -> Result<Var, NeuralError> {
    let (_, hidden) = g.shape(z);
    if n_nodes == 0 {
        return Err(NeuralError::InvalidArgument("no nodes".into()));
    }
    let wq = param(g, b, &format!("{prefix}.w_q"), (hidden, n_nodes))?;
    let wk = param(g, b, &format!("{prefix}.w_k"), (hidden, n_nodes))?;
    let q = g.matmul(z, wq);
    let k = g.matmul(z, wk);
    let qt = g.transpose(q);
    let raw = g.matmul(qt, k);
    let scores = g.scale(raw, 1.0 / (n_nodes as f64).sqrt());
    Ok(g.softmax_rows(scores))
}

/// Incidence structure of a snapshot in the form the convolution uses.
#[derive(Debug, Clone)]
pub struct ConvStructure {
    pub members: Arc<Vec<Vec<usize>>>,
    pub n_nodes: usize,
    /// `1 / δ(e)` as an `E × 1` column.
    pub inv_edge_degree: Array2<f64>,
}

impl ConvStructure {
    pub fn new(members: Vec<Vec<usize>>, n_nodes: usize) -> Result<Self, NeuralError> {
        let mut inv = Array2::zeros((members.len(), 1));
        for (e, nodes) in members.iter().enumerate() {
            if nodes.is_empty() {
                return Err(NeuralError::InvalidArgument(format!("hyperedge {e} is empty")));
            }
            if let Some(&v) = nodes.iter().find(|&&v| v >= n_nodes) {
                return Err(NeuralError::InvalidArgument(format!(
                    "hyperedge {e} references node {v} of {n_nodes}"
                )));
            }
            inv[[e, 0]] = 1.0 / nodes.len() as f64;
        }
        Ok(Self {
            members: Arc::new(members),
            n_nodes,
            inv_edge_degree: inv,
        })
    }

    pub fn from_snapshot(snapshot: &HypergraphSnapshot) -> Self {
        let members = snapshot.hyperedges.iter().map(|e| e.nodes.clone()).collect();
        Self::new(members, snapshot.n_nodes).expect("validated snapshot")
    }

    pub fn n_edges(&self) -> usize {
        self.members.len()
    }
}

/// Hypergraph convolution `act(D_v^{-1/2} H W D_e^{-1} Hᵀ D_v^{-1/2} X Θ)`.
///
/// `weights` is the `E × 1` hyperedge weight column; vertex degrees are
/// derived from it, so gradients reach the weights when they are on the
/// tape. `x` is `N × F` and `theta_name` names an `F × F_out` parameter.
pub fn hypergraph_conv(
    g: &mut Graph,
    b: &Bindings,
    theta_name: &str,
    x: Var,
    structure: &ConvStructure,
    weights: Var,
    f_out: usize,
    act: Activation,
) -> Result<Var, NeuralError> {
    let (n, f_in) = g.shape(x);
    if n != structure.n_nodes {
        return Err(NeuralError::InputShape {
            name: "node features".into(),
            expected: (structure.n_nodes, f_in),
            actual: (n, f_in),
        });
    }
    check_input(g, weights, "hyperedge weights", (structure.n_edges(), 1))?;
    let theta = param(g, b, theta_name, (f_in, f_out))?;
    let degree = g.scatter_nodes(weights, &structure.members, n);
    if let Some(v) = g.value(degree).iter().position(|&d| !(d > 0.0)) {
        return Err(NeuralError::ZeroDegree(v));
    }
    let dv = g.powf(degree, -0.5);
    let y = g.matmul(x, theta);
    let y = g.mul_col(y, dv);
    let e = g.gather_edges(y, &structure.members);
    let inv = g.constant(structure.inv_edge_degree.clone());
    let coef = g.mul(weights, inv);
    let e = g.mul_col(e, coef);
    let back = g.scatter_nodes(e, &structure.members, n);
    let out = g.mul_col(back, dv);
    Ok(act.apply(g, out))
}

/// `sizes = [in, hidden…, out]`.
pub fn mlp_param_shapes(prefix: &str, sizes: &[usize]) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (l, pair) in sizes.windows(2).enumerate() {
        out.push(ParamSpec::weight(format!("{prefix}.l{l}.w"), pair[0], pair[1]));
        out.push(ParamSpec::zero(format!("{prefix}.l{l}.b"), 1, pair[1]));
    }
    out
}

/// Dense layers with `act` between them and a linear last layer.
pub fn mlp_forward(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    sizes: &[usize],
    act: Activation,
) -> Result<Var, NeuralError> {
    if sizes.len() < 2 {
        return Err(NeuralError::InvalidArgument("an MLP needs at least two sizes".into()));
    }
    let (rows, cols) = g.shape(x);
    if cols != sizes[0] {
        return Err(NeuralError::InputShape {
            name: "mlp input".into(),
            expected: (rows, sizes[0]),
            actual: (rows, cols),
        });
    }
    let mut h = x;
    let last = sizes.len() - 2;
    for (l, pair) in sizes.windows(2).enumerate() {
        let w = param(g, b, &format!("{prefix}.l{l}.w"), (pair[0], pair[1]))?;
        let bias = param(g, b, &format!("{prefix}.l{l}.b"), (1, pair[1]))?;
        let hw = g.matmul(h, w);
        h = g.add_row(hw, bias);
        if l < last {
            h = act.apply(g, h);
        }
    }
    Ok(h)
}

/// Mean squared error between two nodes of equal shape.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var, NeuralError> {
    let expected = g.shape(pred);
    check_input(g, target, "target", expected)?;
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}
