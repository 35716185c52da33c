//! Trainable context encoder standing in for the vision-language backbone.
//!
//! Encodes synthetic observation tokens plus instruction tokens with a small
//! transformer whose depth matches the action expert, and exports one
//! key/value pair per layer for cross-layer fusion. A reuse cache makes
//! multi-step flow integration skip the encoder; cached and fresh KV values
//! are bitwise identical and the cache is invalidated by parameter updates.

use crate::error::{Error, Result};
use crate::model::blocks::{ffn, fused_attention, AttentionParams, FfnParams};
use crate::model::{CtxLayer, CtxNodes, HiMoeModel, ParamNodes};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Observation/instruction tokens for one timestep. Absent camera streams
/// are `None`: they become zero tokens excluded via the attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextInput {
    pub obs_streams: Vec<Option<Vec<f64>>>,
    pub instr_ids: Vec<usize>,
}

impl ContextInput {
    fn validate(&self, model_cfg: &crate::model::ModelConfig) -> Result<()> {
        if self.obs_streams.len() != model_cfg.max_streams {
            return Err(Error::ShapeMismatch(format!(
                "expected {} obs streams, got {}",
                model_cfg.max_streams,
                self.obs_streams.len()
            )));
        }
        if self.instr_ids.len() != model_cfg.instr_len {
            return Err(Error::ShapeMismatch(format!(
                "expected {} instruction tokens, got {}",
                model_cfg.instr_len,
                self.instr_ids.len()
            )));
        }
        if self.instr_ids.is_empty() && self.obs_streams.iter().all(Option::is_none) {
            return Err(Error::InvalidArgument("empty context input".into()));
        }
        for s in self.obs_streams.iter().flatten() {
            if s.len() != model_cfg.obs_dim {
                return Err(Error::ShapeMismatch(format!(
                    "obs token width {} != {}",
                    s.len(),
                    model_cfg.obs_dim
                )));
            }
        }
        for &id in &self.instr_ids {
            if id >= model_cfg.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "instruction id {} outside vocab {}",
                    id, model_cfg.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Build the context encoder inside `g` and return per-layer KV nodes.
/// Gradients flow into the encoder parameters, so this is the training path.
pub fn encode_context<T: Scalar>(
    g: &mut Graph<T>,
    model: &HiMoeModel<T>,
    pn: &ParamNodes,
    input: &ContextInput,
) -> Result<CtxNodes> {
    let cfg = model.cfg();
    input.validate(cfg)?;
    let p = model.params();
    let dk = cfg.stack.d_k;
    let eps = T::of_f64(1e-5);

    let mut mask = Vec::with_capacity(cfg.ctx_tokens());
    let mut rows = Vec::with_capacity(cfg.ctx_tokens());
    let obs_w = pn.node(p, "ctx.obs.w");
    let obs_b = pn.node(p, "ctx.obs.b");
    let stream_embed = pn.node(p, "ctx.stream");
    for (s, stream) in input.obs_streams.iter().enumerate() {
        let feats: Vec<T> = match stream {
            Some(v) => v.iter().map(|&x| T::of_f64(x)).collect(),
            None => vec![T::zero(); cfg.obs_dim],
        };
        mask.push(stream.is_some());
        let tok_in = g.leaf(Tensor::new(vec![1, cfg.obs_dim], feats).unwrap());
        let tok = g.matmul(tok_in, obs_w);
        let tok = g.add_bias(tok, obs_b);
        let se = g.slice_rows(stream_embed, s, s + 1);
        rows.push(g.add(tok, se));
    }
    let embed = pn.node(p, "ctx.embed");
    for &id in &input.instr_ids {
        mask.push(true);
        rows.push(g.slice_rows(embed, id, id + 1));
    }
    let mut x = g.concat_rows(&rows);

    let mut layers = Vec::with_capacity(cfg.stack.depth());
    for l in 0..cfg.stack.depth() {
        let ln1g = pn.node(p, &format!("ctx.l{l}.ln1.g"));
        let ln1b = pn.node(p, &format!("ctx.l{l}.ln1.b"));
        let normed = g.layer_norm_rows(x, ln1g, ln1b, eps);
        let attn = AttentionParams {
            wq: pn.node(p, &format!("ctx.l{l}.attn.wq")),
            wk: pn.node(p, &format!("ctx.l{l}.attn.wk")),
            wv: pn.node(p, &format!("ctx.l{l}.attn.wv")),
            wo: pn.node(p, &format!("ctx.l{l}.attn.wo")),
        };
        let att = fused_attention(g, normed, &attn, &mask, None, dk);
        x = g.add(x, att);
        let ln2g = pn.node(p, &format!("ctx.l{l}.ln2.g"));
        let ln2b = pn.node(p, &format!("ctx.l{l}.ln2.b"));
        let normed = g.layer_norm_rows(x, ln2g, ln2b, eps);
        let fp = FfnParams {
            w1: pn.node(p, &format!("ctx.l{l}.ffn.w1")),
            b1: pn.node(p, &format!("ctx.l{l}.ffn.b1")),
            w2: pn.node(p, &format!("ctx.l{l}.ffn.w2")),
            b2: pn.node(p, &format!("ctx.l{l}.ffn.b2")),
        };
        let f = ffn(g, normed, &fp);
        x = g.add(x, f);

        let wk = pn.node(p, &format!("ctx.l{l}.kv.wk"));
        let wv = pn.node(p, &format!("ctx.l{l}.kv.wv"));
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        debug_assert_eq!(g.value(k).rc(), (cfg.ctx_tokens(), dk));
        layers.push(CtxLayer { k, v });
    }
    g.check_finite()?;
    Ok(CtxNodes { layers, mask })
}

/// Snapshot of the per-layer context KV, detached from any graph and pinned
/// to the parameter version it was computed from.
#[derive(Debug, Clone)]
pub struct ContextCache<T: Scalar> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub mask: Vec<bool>,
    version: u64,
}

/// Compute and store the context KV for reuse across integration steps.
pub fn cache_context<T: Scalar>(
    model: &HiMoeModel<T>,
    input: &ContextInput,
) -> Result<ContextCache<T>> {
    let mut g = Graph::new();
    let pn = model.emit_params(&mut g);
    let ctx = encode_context(&mut g, model, &pn, input)?;
    let layers = ctx
        .layers
        .iter()
        .map(|l| (g.value(l.k).clone(), g.value(l.v).clone()))
        .collect();
    Ok(ContextCache { layers, mask: ctx.mask, version: model.version() })
}

impl<T: Scalar> ContextCache<T> {
    /// Materialize the cached KV as constant leaves in a working graph.
    /// Errors if the model's parameters changed since the cache was built.
    pub fn emit(&self, g: &mut Graph<T>, model: &HiMoeModel<T>) -> Result<CtxNodes> {
        if model.version() != self.version {
            return Err(Error::StaleCache);
        }
        let layers = self
            .layers
            .iter()
            .map(|(k, v)| {
                let kn: NodeId = g.leaf(k.clone());
                let vn = g.leaf(v.clone());
                CtxLayer { k: kn, v: vn }
            })
            .collect();
        Ok(CtxNodes { layers, mask: self.mask.clone() })
    }
}
