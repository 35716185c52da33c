use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Feed-forward slot of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    AsMoe,
    HbMoe,
    Dense,
}

/// Layer layout and widths of the action expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStackConfig {
    pub layer_kinds: Vec<LayerKind>,
    /// Experts per MoE layer.
    pub n_experts: usize,
    /// Routed experts per token.
    pub top_k: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    /// Action horizon H.
    pub horizon: usize,
    /// Width of one action vector (24 for the unified layout; smaller for
    /// reduced diagnostic models).
    pub action_dim: usize,
    /// Dense layers use `d_ff * dense_ff_mult`, so an all-dense stack can be
    /// matched to the active parameter count of a top-K MoE stack.
    pub dense_ff_mult: usize,
}

impl ExpertStackConfig {
    /// The standard hierarchy: AS-MoE at both boundaries, HB-MoE immediately
    /// inside them, dense blocks in the middle.
    pub fn sandwich(depth: usize, n_experts: usize, top_k: usize) -> Self {
        assert!(depth >= 5, "sandwich needs at least 5 layers");
        let mut kinds = vec![LayerKind::Dense; depth];
        kinds[0] = LayerKind::AsMoe;
        kinds[1] = LayerKind::HbMoe;
        kinds[depth - 2] = LayerKind::HbMoe;
        kinds[depth - 1] = LayerKind::AsMoe;
        ExpertStackConfig {
            layer_kinds: kinds,
            n_experts,
            top_k,
            d_model: 64,
            d_k: 32,
            d_ff: 128,
            horizon: 8,
            action_dim: 24,
            dense_ff_mult: 1,
        }
    }

    /// Toy defaults: depth 6 = [AS, HB, Dense, Dense, HB, AS], N=8, K=2.
    pub fn toy_default() -> Self {
        Self::sandwich(6, 8, 2)
    }

    /// Paper-scale reference (N=32, top-k=4); retained in the schema, not
    /// used by the desk-scale experiments.
    pub fn paper_reference() -> Self {
        let mut cfg = Self::sandwich(6, 32, 4);
        cfg.d_model = 1024;
        cfg.d_k = 256;
        cfg.d_ff = 4096;
        cfg.horizon = 50;
        cfg
    }

    /// All-dense stack with the feed-forward width scaled by `top_k`,
    /// matching the active parameter count of the MoE stack it ablates.
    pub fn dense_matched(&self) -> Self {
        let mut cfg = self.clone();
        cfg.layer_kinds = vec![LayerKind::Dense; self.layer_kinds.len()];
        cfg.dense_ff_mult = self.top_k.max(1);
        cfg
    }

    pub fn depth(&self) -> usize {
        self.layer_kinds.len()
    }

    pub fn has_moe(&self) -> bool {
        self.layer_kinds.iter().any(|k| *k != LayerKind::Dense)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_kinds.is_empty() {
            return Err(Error::Config("empty layer stack".into()));
        }
        if self.has_moe() && (self.top_k < 1 || self.top_k > self.n_experts) {
            return Err(Error::Config(format!(
                "top_k={} out of range for n_experts={}",
                self.top_k, self.n_experts
            )));
        }
        for &d in &[self.d_model, self.d_k, self.d_ff, self.horizon, self.action_dim] {
            if d == 0 {
                return Err(Error::Config("zero extent in stack config".into()));
            }
        }
        Ok(())
    }

    /// Whether the layout is the canonical boundary/adjacent/central pattern.
    pub fn is_sandwich(&self) -> bool {
        let n = self.layer_kinds.len();
        n >= 5
            && self.layer_kinds[0] == LayerKind::AsMoe
            && self.layer_kinds[n - 1] == LayerKind::AsMoe
            && self.layer_kinds[1] == LayerKind::HbMoe
            && self.layer_kinds[n - 2] == LayerKind::HbMoe
            && self.layer_kinds[2..n - 2].iter().all(|k| *k == LayerKind::Dense)
    }
}

/// Full model configuration: action-expert stack plus the context encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stack: ExpertStackConfig,
    /// Instruction vocabulary size of the context encoder.
    pub vocab_size: usize,
    /// Feature width of one synthetic observation token.
    pub obs_dim: usize,
    /// Maximum number of camera streams; absent streams are zero tokens
    /// excluded through the attention mask.
    pub max_streams: usize,
    /// Instruction tokens per episode.
    pub instr_len: usize,
}

impl ModelConfig {
    pub fn toy_default() -> Self {
        ModelConfig {
            stack: ExpertStackConfig::toy_default(),
            vocab_size: 32,
            obs_dim: 8,
            max_streams: 2,
            instr_len: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.vocab_size == 0 || self.obs_dim == 0 || self.instr_len == 0 {
            return Err(Error::Config("zero extent in model config".into()));
        }
        Ok(())
    }

    /// Context tokens per episode (obs streams + instruction).
    pub fn ctx_tokens(&self) -> usize {
        self.max_streams + self.instr_len
    }

    /// Action-expert tokens: one state token, H action tokens, one
    /// timestep-embedding token.
    pub fn seq_tokens(&self) -> usize {
        self.stack.horizon + 2
    }
}
