//! Sparse mixture-of-experts feed-forward: softmax router, top-k selection
//! with renormalized weights, and scatter-add of expert outputs.

use super::weights::DenseFfn;
use crate::error::{CasalError, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Per-token routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Full softmax over expert logits, one row per token.
    pub probs: Vec<Vec<f64>>,
    /// Selected expert ids per token, in descending probability order
    /// (ties broken by ascending expert id).
    pub selected: Vec<Vec<usize>>,
    /// Renormalized weights aligned with `selected`; each row sums to 1.
    pub weights: Vec<Vec<f64>>,
}

impl Routing {
    /// Rows (token indices) routed to each expert, in ascending token order,
    /// paired with the slot index inside `selected[token]`.
    pub fn assignments(&self, n_experts: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); n_experts];
        for (t, sel) in self.selected.iter().enumerate() {
            for (slot, &e) in sel.iter().enumerate() {
                out[e].push((t, slot));
            }
        }
        out
    }
}

/// Indices of the `k` largest entries, descending, ties by ascending index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn route(hidden: &Matrix, router: &Matrix, top_k: usize) -> Result<Routing> {
    let n_experts = router.cols();
    if top_k == 0 || top_k > n_experts {
        return Err(CasalError::InvalidConfig(format!(
            "top_k ({top_k}) must be in 1..={n_experts}"
        )));
    }
    let logits = hidden.matmul(router);
    if !logits.all_finite() {
        return Err(CasalError::NonFinite("router logits".into()));
    }
    let mut probs = Vec::with_capacity(hidden.rows());
    let mut selected = Vec::with_capacity(hidden.rows());
    let mut weights = Vec::with_capacity(hidden.rows());
    for t in 0..hidden.rows() {
        let mut p = logits.row(t).to_vec();
        softmax_in_place(&mut p);
        let sel = top_k_indices(&p, top_k);
        let total: f64 = sel.iter().map(|&e| p[e]).sum();
        weights.push(sel.iter().map(|&e| p[e] / total).collect());
        selected.push(sel);
        probs.push(p);
    }
    Ok(Routing {
        probs,
        selected,
        weights,
    })
}

/// Intermediate values of one gated feed-forward evaluation.
#[derive(Debug, Clone)]
pub struct FfnTrace {
    pub gate_pre: Matrix,
    pub up: Matrix,
    pub inter: Matrix,
    pub out: Matrix,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn ffn_trace(x: &Matrix, f: &DenseFfn) -> FfnTrace {
    let gate_pre = x.matmul(&f.w_gate);
    let up = x.matmul(&f.w_up);
    let mut inter = Matrix::zeros(x.rows(), f.w_up.cols());
    for ((o, &g), &u) in inter
        .as_mut_slice()
        .iter_mut()
        .zip(gate_pre.as_slice())
        .zip(up.as_slice())
    {
        *o = silu(g) * u;
    }
    let out = inter.matmul(&f.w_down);
    FfnTrace {
        gate_pre,
        up,
        inter,
        out,
    }
}

pub fn ffn_forward(x: &Matrix, f: &DenseFfn) -> Matrix {
    ffn_trace(x, f).out
}

/// Expert-parallel pass: every expert processes only the tokens routed to it
/// (gather), and weighted outputs are scatter-added back per token.
pub fn moe_forward_routed(hidden: &Matrix, routing: &Routing, experts: &[DenseFfn]) -> Matrix {
    let mut out = Matrix::zeros(hidden.rows(), hidden.cols());
    for (e, rows) in routing.assignments(experts.len()).iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let tokens: Vec<usize> = rows.iter().map(|&(t, _)| t).collect();
        let y = ffn_forward(&hidden.select_rows(&tokens), &experts[e]);
        for (i, &(t, slot)) in rows.iter().enumerate() {
            let w = routing.weights[t][slot];
            for (o, v) in out.row_mut(t).iter_mut().zip(y.row(i)) {
                *o += w * v;
            }
        }
    }
    out
}

/// Sparse MoE block on already-normalized hidden states.
pub fn moe_block_forward(
    hidden: &Matrix,
    router: &Matrix,
    experts: &[DenseFfn],
    top_k: usize,
) -> Result<Matrix> {
    if router.rows() != hidden.cols() || router.cols() != experts.len() {
        return Err(crate::error::shape_err(
            "router",
            &[hidden.cols(), experts.len()],
            &router.shape(),
        ));
    }
    let routing = route(hidden, router, top_k)?;
    Ok(moe_forward_routed(hidden, &routing, experts))
}
