//! Transformer building blocks: gating, MoE dispatch, fused cross attention.

use crate::error::Result;
use crate::tensor::{topk, Graph, NodeId, Scalar, Tensor};

/// Per-token routing outcome of one MoE layer: full softmax scores `s`,
/// top-K indices `r`, and the renormalized mixture weights `w`.
#[derive(Debug, Clone)]
pub struct GateDecision<T: Scalar> {
    pub scores_node: NodeId,
    /// Snapshot of the `[U, N]` score values.
    pub scores: Tensor<T>,
    /// Selected expert indices per token, descending score, ties to the
    /// lowest index.
    pub routed: Vec<Vec<usize>>,
    pub weight_nodes: Vec<Vec<NodeId>>,
    pub weights: Vec<Vec<T>>,
}

pub struct FfnParams {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct AttentionParams {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Context keys/values fused into one attention layer, with the positions
/// to exclude already marked false in `mask`.
pub struct CtxLayer {
    pub k: NodeId,
    pub v: NodeId,
}

pub fn ffn<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &FfnParams) -> NodeId {
    let h = g.matmul(x, p.w1);
    let h = g.add_bias(h, p.b1);
    let h = g.silu(h);
    let h = g.matmul(h, p.w2);
    g.add_bias(h, p.b2)
}

/// Softmax gate without temperature scaling, top-K selection, and
/// renormalization of the selected probabilities to sum to one.
///
/// `pin` bypasses the top-K selection with fixed indices (used to keep the
/// piecewise routing constant during finite-difference checks); the weights
/// are still recomputed from the live scores.
pub fn gate<T: Scalar>(
    g: &mut Graph<T>,
    hidden: NodeId,
    w_gate: NodeId,
    k: usize,
    pin: Option<&[Vec<usize>]>,
) -> Result<GateDecision<T>> {
    let logits = g.try_matmul(hidden, w_gate)?;
    let scores_node = g.softmax_rows(logits);
    let scores = g.value(scores_node).clone();
    let (u_tokens, n_experts) = scores.rc();
    if k > n_experts {
        return Err(crate::error::Error::InvalidArgument(format!(
            "gate: K={} exceeds N={}",
            k, n_experts
        )));
    }
    let mut routed = Vec::with_capacity(u_tokens);
    let mut weight_nodes = Vec::with_capacity(u_tokens);
    let mut weights = Vec::with_capacity(u_tokens);
    for u in 0..u_tokens {
        let idx = match pin {
            Some(p) => p[u].clone(),
            None => topk(scores.row(u), k)?.0,
        };
        let picks: Vec<NodeId> = idx.iter().map(|&i| g.pick(scores_node, u, i)).collect();
        let mut total = picks[0];
        for &p in &picks[1..] {
            total = g.add(total, p);
        }
        let wn: Vec<NodeId> = picks.iter().map(|&p| g.div(p, total)).collect();
        let wv: Vec<T> = wn.iter().map(|&n| g.value(n).item()).collect();
        routed.push(idx);
        weight_nodes.push(wn);
        weights.push(wv);
    }
    Ok(GateDecision { scores_node, scores, routed, weight_nodes, weights })
}

/// Sparse mixture layer over pre-normalized token hiddens `[U, d_model]`.
///
/// Output per token is the weight-renormalized sum of its routed experts;
/// routing indices are constants for gradient purposes, weights and expert
/// paths differentiate. `materialize_all` computes every expert on every
/// token and returns the per-expert outputs (needed by the contrastive
/// regularizer on AS-MoE layers); otherwise only routed experts run.
pub fn moe_forward<T: Scalar>(
    g: &mut Graph<T>,
    tokens: NodeId,
    experts: &[FfnParams],
    w_gate: NodeId,
    k: usize,
    materialize_all: bool,
    pin: Option<&[Vec<usize>]>,
) -> Result<(NodeId, GateDecision<T>, Option<Vec<NodeId>>)> {
    let decision = gate(g, tokens, w_gate, k, pin)?;
    let (u_tokens, _) = g.value(tokens).rc();

    let all_outputs: Option<Vec<NodeId>> = if materialize_all {
        Some(experts.iter().map(|e| ffn(g, tokens, e)).collect())
    } else {
        None
    };

    let mut out_rows = Vec::with_capacity(u_tokens);
    for u in 0..u_tokens {
        let mut acc: Option<NodeId> = None;
        for (slot, &i) in decision.routed[u].iter().enumerate() {
            let h_row = match &all_outputs {
                Some(outs) => g.slice_rows(outs[i], u, u + 1),
                None => {
                    let row = g.slice_rows(tokens, u, u + 1);
                    ffn(g, row, &experts[i])
                }
            };
            let contrib = g.mul_scalar_node(h_row, decision.weight_nodes[u][slot]);
            acc = Some(match acc {
                Some(a) => g.add(a, contrib),
                None => contrib,
            });
        }
        out_rows.push(acc.expect("K >= 1"));
    }
    let out = g.concat_rows(&out_rows);
    Ok((out, decision, all_outputs))
}

/// Scaled dot-product attention over local keys/values concatenated with
/// optional context keys/values; masked context positions are excluded from
/// the softmax entirely.
pub fn fused_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &AttentionParams,
    local_mask: &[bool],
    ctx: Option<(&CtxLayer, &[bool])>,
    d_k: usize,
) -> NodeId {
    let (u_tokens, _) = g.value(x).rc();
    debug_assert_eq!(local_mask.len(), u_tokens);
    let q = g.matmul(x, p.wq);
    let lk = g.matmul(x, p.wk);
    let lv = g.matmul(x, p.wv);
    let (keys, vals, mask) = match ctx {
        Some((c, cmask)) => {
            let keys = g.concat_rows(&[lk, c.k]);
            let vals = g.concat_rows(&[lv, c.v]);
            let mut mask = local_mask.to_vec();
            mask.extend_from_slice(cmask);
            (keys, vals, mask)
        }
        None => (lk, lv, local_mask.to_vec()),
    };
    let kt = g.transpose(keys);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, T::of_f64(1.0 / (d_k as f64).sqrt()));
    let probs = g.masked_softmax_rows(scaled, &mask);
    let att = g.matmul(probs, vals);
    g.matmul(att, p.wo)
}
