//! The hierarchical MoE action expert: attention layers with per-layer
//! context-KV fusion, feed-forward slots filled by AS-MoE, HB-MoE, or dense
//! blocks, producing the vector-field prediction for flow matching.

pub mod blocks;
mod config;
#[cfg(test)]
mod model_tests;
mod params;

pub use blocks::{ffn, fused_attention, gate, moe_forward, CtxLayer, GateDecision};
pub use config::{ExpertStackConfig, LayerKind, ModelConfig};
pub use params::{ParamInit, ParamNodes, ParamSet};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use blocks::{AttentionParams, FfnParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One training/inference example as seen by the action expert. All values
/// are in normalized unified coordinates.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    /// Unified state values, width `action_dim`.
    pub state_values: Vec<f64>,
    /// Validity mask of the state, as 0/1, width `action_dim`.
    pub state_mask: Vec<f64>,
    /// Noisy action chunk, `horizon` rows of width `action_dim`.
    pub actions: Vec<Vec<f64>>,
    /// Flow-matching timestep in `[0, 1]`.
    pub tau: f64,
}

/// Per-layer context keys/values already present in the working graph.
pub struct CtxNodes {
    pub layers: Vec<CtxLayer>,
    pub mask: Vec<bool>,
}

/// Routing trace of one MoE layer.
pub struct MoeTrace<T: Scalar> {
    pub layer: usize,
    pub kind: LayerKind,
    pub decision: GateDecision<T>,
    /// All-expert outputs `[U, d_model]` per expert; AS-MoE layers only.
    pub expert_outputs: Option<Vec<NodeId>>,
}

/// Output of one forward pass.
pub struct ForwardTrace<T: Scalar> {
    /// Predicted vector field, `[horizon, action_dim]`.
    pub v_pred: NodeId,
    pub moe: Vec<MoeTrace<T>>,
}

/// Fixed routing indices per MoE layer (in layer order) per token. Used to
/// hold the piecewise-constant top-K selection fixed across
/// finite-difference perturbations.
pub type RoutingPins = Vec<Vec<Vec<usize>>>;

/// The full policy network: context encoder plus hierarchical action expert,
/// one flat parameter set.
pub struct HiMoeModel<T: Scalar> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    version: u64,
}

impl<T: Scalar> HiMoeModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(&cfg, &mut ParamInit { params: &mut params, rng: &mut rng });
        Ok(HiMoeModel { cfg, params, version: 0 })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding context caches.
    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn emit_params(&self, g: &mut Graph<T>) -> ParamNodes {
        ParamNodes::emit(&self.params, g)
    }

    pub fn to_f64(&self) -> HiMoeModel<f64> {
        HiMoeModel { cfg: self.cfg.clone(), params: self.params.to_f64(), version: self.version }
    }

    /// Forward pass of the action expert. The token sequence is
    /// `[state, H action tokens, tau embedding]`; every layer attends over
    /// local tokens fused with its context KV pair when `ctx` is given.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pn: &ParamNodes,
        input: &PolicyInput,
        ctx: Option<&CtxNodes>,
        pins: Option<&RoutingPins>,
    ) -> Result<ForwardTrace<T>> {
        let stack = &self.cfg.stack;
        let a_dim = stack.action_dim;
        let h = stack.horizon;
        if input.state_values.len() != a_dim || input.state_mask.len() != a_dim {
            return Err(Error::ShapeMismatch(format!(
                "state width {} != action_dim {}",
                input.state_values.len(),
                a_dim
            )));
        }
        if input.actions.len() != h || input.actions.iter().any(|r| r.len() != a_dim) {
            return Err(Error::ShapeMismatch(format!(
                "action chunk must be {}x{}",
                h, a_dim
            )));
        }
        if !(0.0..=1.0).contains(&input.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0,1]", input.tau)));
        }
        if let Some(c) = ctx {
            if c.layers.len() != stack.depth() {
                return Err(Error::ShapeMismatch(format!(
                    "context has {} layers, stack has {}",
                    c.layers.len(),
                    stack.depth()
                )));
            }
        }

        let p = &self.params;

        // State token: values followed by the 0/1 validity mask.
        let mut state_row: Vec<T> = input.state_values.iter().map(|&v| T::of_f64(v)).collect();
        state_row.extend(input.state_mask.iter().map(|&v| T::of_f64(v)));
        let state_in = g.leaf(Tensor::new(vec![1, 2 * a_dim], state_row).unwrap());
        let w = pn.node(p, "him.in_state.w");
        let b = pn.node(p, "him.in_state.b");
        let state_tok = g.matmul(state_in, w);
        let state_tok = g.add_bias(state_tok, b);

        let act_data: Vec<T> = input
            .actions
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::of_f64(v)))
            .collect();
        let act_in = g.leaf(Tensor::new(vec![h, a_dim], act_data).unwrap());
        let w = pn.node(p, "him.in_act.w");
        let b = pn.node(p, "him.in_act.b");
        let act_tok = g.matmul(act_in, w);
        let act_tok = g.add_bias(act_tok, b);

        let emb: Vec<T> = tau_embedding(input.tau, stack.d_model)
            .into_iter()
            .map(T::of_f64)
            .collect();
        let tau_in = g.leaf(Tensor::new(vec![1, stack.d_model], emb).unwrap());
        let w = pn.node(p, "him.tau.w");
        let b = pn.node(p, "him.tau.b");
        let tau_tok = g.matmul(tau_in, w);
        let tau_tok = g.add_bias(tau_tok, b);

        let mut x = g.concat_rows(&[state_tok, act_tok, tau_tok]);
        let u_tokens = h + 2;
        let local_mask = vec![true; u_tokens];
        let eps = T::of_f64(1e-5);

        let mut moe_traces = Vec::new();
        let mut pin_idx = 0usize;
        for (l, kind) in stack.layer_kinds.iter().enumerate() {
            let ln1g = pn.node(p, &format!("him.l{l}.ln1.g"));
            let ln1b = pn.node(p, &format!("him.l{l}.ln1.b"));
            let normed = g.layer_norm_rows(x, ln1g, ln1b, eps);
            let attn_p = AttentionParams {
                wq: pn.node(p, &format!("him.l{l}.attn.wq")),
                wk: pn.node(p, &format!("him.l{l}.attn.wk")),
                wv: pn.node(p, &format!("him.l{l}.attn.wv")),
                wo: pn.node(p, &format!("him.l{l}.attn.wo")),
            };
            let ctx_layer = ctx.map(|c| (&c.layers[l], c.mask.as_slice()));
            let att = fused_attention(g, normed, &attn_p, &local_mask, ctx_layer, stack.d_k);
            x = g.add(x, att);

            let ln2g = pn.node(p, &format!("him.l{l}.ln2.g"));
            let ln2b = pn.node(p, &format!("him.l{l}.ln2.b"));
            let normed = g.layer_norm_rows(x, ln2g, ln2b, eps);
            let f = match kind {
                LayerKind::Dense => {
                    let fp = FfnParams {
                        w1: pn.node(p, &format!("him.l{l}.ffn.w1")),
                        b1: pn.node(p, &format!("him.l{l}.ffn.b1")),
                        w2: pn.node(p, &format!("him.l{l}.ffn.w2")),
                        b2: pn.node(p, &format!("him.l{l}.ffn.b2")),
                    };
                    ffn(g, normed, &fp)
                }
                LayerKind::AsMoe | LayerKind::HbMoe => {
                    let experts: Vec<FfnParams> = (0..stack.n_experts)
                        .map(|i| FfnParams {
                            w1: pn.node(p, &format!("him.l{l}.e{i}.w1")),
                            b1: pn.node(p, &format!("him.l{l}.e{i}.b1")),
                            w2: pn.node(p, &format!("him.l{l}.e{i}.w2")),
                            b2: pn.node(p, &format!("him.l{l}.e{i}.b2")),
                        })
                        .collect();
                    let w_gate = pn.node(p, &format!("him.l{l}.gate.w"));
                    let pin = pins.map(|ps| ps[pin_idx].as_slice());
                    pin_idx += 1;
                    let (out, decision, all_outputs) = moe_forward(
                        g,
                        normed,
                        &experts,
                        w_gate,
                        stack.top_k,
                        *kind == LayerKind::AsMoe,
                        pin,
                    )?;
                    moe_traces.push(MoeTrace {
                        layer: l,
                        kind: *kind,
                        decision,
                        expert_outputs: all_outputs,
                    });
                    out
                }
            };
            x = g.add(x, f);
        }

        let lng = pn.node(p, "him.out.ln.g");
        let lnb = pn.node(p, "him.out.ln.b");
        let x = g.layer_norm_rows(x, lng, lnb, eps);
        let act_hidden = g.slice_rows(x, 1, 1 + h);
        let w = pn.node(p, "him.out.w");
        let b = pn.node(p, "him.out.b");
        let v = g.matmul(act_hidden, w);
        let v_pred = g.add_bias(v, b);

        g.check_finite()?;
        Ok(ForwardTrace { v_pred, moe: moe_traces })
    }

    /// Realized routing of a trace, reusable as pins for a second pass.
    pub fn extract_pins(trace: &ForwardTrace<T>) -> RoutingPins {
        trace.moe.iter().map(|m| m.decision.routed.clone()).collect()
    }
}

impl HiMoeModel<f32> {
    pub fn of_f64(src: &HiMoeModel<f64>) -> Self {
        HiMoeModel {
            cfg: src.cfg.clone(),
            params: ParamSet::of_f64(&src.params),
            version: src.version,
        }
    }
}

/// Sinusoidal embedding of the flow timestep, geometric frequencies 1..1000.
pub fn tau_embedding(tau: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for j in 0..half {
        let omega = 1000f64.powf(j as f64 / (half.max(2) - 1) as f64);
        out[2 * j] = (omega * tau).sin();
        out[2 * j + 1] = (omega * tau).cos();
    }
    out
}

fn init_params<T: Scalar>(cfg: &ModelConfig, init: &mut ParamInit<T>) {
    let s = &cfg.stack;
    let (dm, dk, dff) = (s.d_model, s.d_k, s.d_ff);

    // Context encoder (depth-aligned with the action expert).
    init.embedding("ctx.embed", cfg.vocab_size, dm);
    init.matrix("ctx.obs.w", cfg.obs_dim, dm);
    init.zeros("ctx.obs.b", dm);
    init.embedding("ctx.stream", cfg.max_streams, dm);
    for l in 0..s.depth() {
        init.ones(&format!("ctx.l{l}.ln1.g"), dm);
        init.zeros(&format!("ctx.l{l}.ln1.b"), dm);
        init.matrix(&format!("ctx.l{l}.attn.wq"), dm, dk);
        init.matrix(&format!("ctx.l{l}.attn.wk"), dm, dk);
        init.matrix(&format!("ctx.l{l}.attn.wv"), dm, dk);
        init.matrix(&format!("ctx.l{l}.attn.wo"), dk, dm);
        init.ones(&format!("ctx.l{l}.ln2.g"), dm);
        init.zeros(&format!("ctx.l{l}.ln2.b"), dm);
        init.matrix(&format!("ctx.l{l}.ffn.w1"), dm, dff);
        init.zeros(&format!("ctx.l{l}.ffn.b1"), dff);
        init.matrix(&format!("ctx.l{l}.ffn.w2"), dff, dm);
        init.zeros(&format!("ctx.l{l}.ffn.b2"), dm);
        init.matrix(&format!("ctx.l{l}.kv.wk"), dm, dk);
        init.matrix(&format!("ctx.l{l}.kv.wv"), dm, dk);
    }

    // Action expert.
    init.matrix("him.in_state.w", 2 * s.action_dim, dm);
    init.zeros("him.in_state.b", dm);
    init.matrix("him.in_act.w", s.action_dim, dm);
    init.zeros("him.in_act.b", dm);
    init.matrix("him.tau.w", dm, dm);
    init.zeros("him.tau.b", dm);
    for (l, kind) in s.layer_kinds.iter().enumerate() {
        init.ones(&format!("him.l{l}.ln1.g"), dm);
        init.zeros(&format!("him.l{l}.ln1.b"), dm);
        init.matrix(&format!("him.l{l}.attn.wq"), dm, dk);
        init.matrix(&format!("him.l{l}.attn.wk"), dm, dk);
        init.matrix(&format!("him.l{l}.attn.wv"), dm, dk);
        init.matrix(&format!("him.l{l}.attn.wo"), dk, dm);
        init.ones(&format!("him.l{l}.ln2.g"), dm);
        init.zeros(&format!("him.l{l}.ln2.b"), dm);
        match kind {
            LayerKind::Dense => {
                let w = dff * s.dense_ff_mult;
                init.matrix(&format!("him.l{l}.ffn.w1"), dm, w);
                init.zeros(&format!("him.l{l}.ffn.b1"), w);
                init.matrix(&format!("him.l{l}.ffn.w2"), w, dm);
                init.zeros(&format!("him.l{l}.ffn.b2"), dm);
            }
            LayerKind::AsMoe | LayerKind::HbMoe => {
                init.matrix(&format!("him.l{l}.gate.w"), dm, s.n_experts);
                for i in 0..s.n_experts {
                    init.matrix(&format!("him.l{l}.e{i}.w1"), dm, dff);
                    init.zeros(&format!("him.l{l}.e{i}.b1"), dff);
                    init.matrix(&format!("him.l{l}.e{i}.w2"), dff, dm);
                    init.zeros(&format!("him.l{l}.e{i}.b2"), dm);
                }
            }
        }
    }
    init.ones("him.out.ln.g", dm);
    init.zeros("him.out.ln.b", dm);
    init.matrix("him.out.w", dm, s.action_dim);
    init.zeros("him.out.b", s.action_dim);
}
