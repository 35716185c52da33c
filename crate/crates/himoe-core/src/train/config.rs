//! Training configuration and the learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{RegWeights, TAU_ALPHA, TAU_BETA};
use crate::synth::DatasetManifest;
use serde::{Deserialize, Serialize};

/// Decay shape after warmup. Exponential is the primary schedule; cosine is
/// available behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DecayKind {
    #[default]
    Exponential,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub reg: RegWeights,
    /// Beta(α, β) of the flow-timestep distribution.
    pub tau_alpha: f64,
    pub tau_beta: f64,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub decay_end_step: usize,
    pub decay: DecayKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Inline dataset recipe; ignored when `dataset_path` is set.
    #[serde(default)]
    pub manifest: Option<DatasetManifest>,
    /// Pre-generated dataset file to load instead of building from the
    /// manifest.
    #[serde(default)]
    pub dataset_path: Option<String>,
    pub checkpoint_every: usize,
    /// Re-randomize expert feed-forward weights (keeping the gates) before
    /// training; fine-tuning option, freshly initialized by default scheme.
    #[serde(default)]
    pub moe_reinit: bool,
    /// Apply the balancing regularizer to every MoE layer instead of only
    /// HB-MoE layers; used by ablation variants whose stack has a single MoE
    /// kind but keeps both regularizers.
    #[serde(default)]
    pub hb_on_all_moe: bool,
    /// Single-threaded batch processing. Gradient accumulation order is
    /// fixed either way, so results match the parallel path bitwise; this
    /// removes thread-pool nondeterminism in timing-sensitive contexts.
    #[serde(default)]
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn toy_default() -> Self {
        TrainConfig {
            model: ModelConfig::toy_default(),
            reg: RegWeights::default(),
            tau_alpha: TAU_ALPHA,
            tau_beta: TAU_BETA,
            lr_init: 2.5e-5,
            lr_floor: 2.5e-6,
            warmup_steps: 1000,
            decay_end_step: 30_000,
            decay: DecayKind::Exponential,
            weight_decay: 1e-4,
            batch_size: 32,
            total_steps: 2000,
            seed: 0,
            manifest: None,
            dataset_path: None,
            checkpoint_every: 500,
            moe_reinit: false,
            hb_on_all_moe: false,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.warmup_steps >= self.decay_end_step {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below decay_end_step {}",
                self.warmup_steps, self.decay_end_step
            )));
        }
        if self.lr_floor > self.lr_init {
            return Err(Error::Config(format!(
                "lr_floor {} exceeds lr_init {}",
                self.lr_floor, self.lr_init
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("zero batch size or step count".into()));
        }
        if self.manifest.is_none() && self.dataset_path.is_none() {
            return Err(Error::Config("no dataset: set manifest or dataset_path".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}

/// Learning rate at `step`: linear warmup from 0 to `lr_init`, then decay to
/// `lr_floor` at `decay_end_step`, clamped at the floor beyond it.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.lr_init * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.decay_end_step {
        return cfg.lr_floor;
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.decay_end_step - cfg.warmup_steps) as f64;
    match cfg.decay {
        DecayKind::Exponential => cfg.lr_init * (cfg.lr_floor / cfg.lr_init).powf(frac),
        DecayKind::Cosine => {
            cfg.lr_floor
                + 0.5 * (cfg.lr_init - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DatasetManifest;

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig::toy_default();
        c.manifest = Some(DatasetManifest::uniform(&["joint-a"], 4, 0));
        c
    }

    #[test]
    fn schedule_hits_documented_values() {
        let c = cfg();
        assert_eq!(lr_schedule(1000, &c), 2.5e-5);
        assert_eq!(lr_schedule(500, &c), 1.25e-5);
        assert_eq!(lr_schedule(30_000, &c), 2.5e-6);
        assert_eq!(lr_schedule(100_000, &c), 2.5e-6);
        assert_eq!(lr_schedule(0, &c), 0.0);
    }

    #[test]
    fn schedule_continuous_at_warmup_and_monotone_after() {
        let c = cfg();
        let before = lr_schedule(c.warmup_steps, &c);
        let after = lr_schedule(c.warmup_steps + 1, &c);
        assert!((before - c.lr_init).abs() < 1e-12);
        assert!(after <= before);
        let mut prev = before;
        for step in (c.warmup_steps..35_000).step_by(97) {
            let lr = lr_schedule(step, &c);
            assert!(lr <= prev + 1e-18, "schedule increased at {step}");
            assert!(lr >= c.lr_floor - 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn cosine_switch_also_hits_endpoints() {
        let mut c = cfg();
        c.decay = DecayKind::Cosine;
        assert!((lr_schedule(1000, &c) - 2.5e-5).abs() < 1e-18);
        assert!((lr_schedule(30_000, &c) - 2.5e-6).abs() < 1e-18);
        let mid = lr_schedule(15_500, &c);
        assert!((mid - (2.5e-6 + 0.5 * (2.5e-5 - 2.5e-6))).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip() {
        let c = cfg();
        let text = c.to_toml().unwrap();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.warmup_steps = 40_000;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lr_floor = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.manifest = None;
        assert!(c.validate().is_err());
    }
}
