//! Training driver: batched flow-matching optimization of the policy with
//! both regularizers, metrics logging, checkpointing, evaluation, routing
//! statistics, and ablation sweeps.

pub mod checkpoint;
mod config;
pub mod eval;
pub mod optim;
pub mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use config::{lr_schedule, DecayKind, TrainConfig};
pub use eval::{
    evaluate, heatmap_csv, histogram_for, js_divergence, routing_heatmap, EmbodimentReport,
    EvalOptions, EvalReport, HeatmapRow, ModelPolicy,
};
pub use optim::AdamW;
pub use sweep::{grid_cells, run_sweep, standard_cells, sweep_table, SweepCell, SweepResult};

use crate::codec::UNIFIED_DIM;
use crate::context::encode_context;
use crate::error::{Error, Result};
use crate::model::{HiMoeModel, LayerKind, PolicyInput};
use crate::objectives::{
    flow_loss, regularizers_from_trace_with, sample_tau, token_labels, total_loss, FlowSample,
    LossBreakdown, RegWeights,
};
use crate::sampler::draw_noise;
use crate::synth::{build_dataset, default_embodiments, Dataset, TrainExample};
use crate::tensor::backward;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One metrics-log record; the log is one JSON object per line. `total` is
/// always the weighted combination of the three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub l_flow: f64,
    pub l_as: f64,
    pub l_hb: f64,
    pub total: f64,
}

/// Loss (and optionally the flat gradient) of a single example: fresh graph,
/// context encoded in-graph so its parameters train too.
pub fn sample_loss_grad(
    model: &HiMoeModel<f32>,
    ex: &TrainExample,
    fs: &FlowSample,
    reg: &RegWeights,
    hb_on_all_moe: bool,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f32>>)> {
    let mut g = crate::tensor::Graph::new();
    let pn = model.emit_params(&mut g);
    let ctx = encode_context(&mut g, model, &pn, &ex.ctx)?;
    let input = PolicyInput {
        state_values: ex.state_values.clone(),
        state_mask: ex.state_mask.clone(),
        actions: fs.a_tau.clone(),
        tau: fs.tau,
    };
    let trace = model.forward(&mut g, &pn, &input, Some(&ctx), None)?;
    let l_flow = flow_loss(&mut g, trace.v_pred, &fs.target)?;
    let labels = token_labels(ex.space, model.cfg().stack.horizon);
    let (l_as, l_hb) = regularizers_from_trace_with(&mut g, &trace, &labels, reg.tau_c, hb_on_all_moe)?;
    let (total, bd) = total_loss(&mut g, l_flow, l_as, l_hb, reg);
    g.check_finite()?;
    if !bd.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    if !with_grad {
        return Ok((bd, None));
    }
    backward(&mut g, total)?;
    let mut flat = Vec::with_capacity(model.params().total_elements());
    for &id in &pn.0 {
        flat.extend_from_slice(g.grad(id).data());
    }
    Ok((bd, Some(flat)))
}

/// Build or load the dataset a config points at.
pub fn resolve_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if let Some(p) = &cfg.dataset_path {
        return Dataset::load(Path::new(p));
    }
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: set manifest or dataset_path".into()))?;
    build_dataset(manifest, &default_embodiments())
}

/// Re-randomize every expert feed-forward block (fresh fan-in-scaled normal
/// weights, zero biases) while retaining the gate projections. This is the
/// documented default of the fine-tuning re-initialization option.
pub fn reinit_experts(model: &mut HiMoeModel<f32>, seed: u64) {
    let cfg = model.cfg().clone();
    let s = &cfg.stack;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.params_mut();
    for (l, kind) in s.layer_kinds.iter().enumerate() {
        if *kind == LayerKind::Dense {
            continue;
        }
        for i in 0..s.n_experts {
            for (suffix, fan_in) in [("w1", s.d_model), ("w2", s.d_ff)] {
                let pos = params.position(&format!("him.l{l}.e{i}.{suffix}"));
                let normal = Normal::new(0.0f64, 1.0 / (fan_in as f64).sqrt()).unwrap();
                for v in params.tensors_mut()[pos].data_mut() {
                    *v = normal.sample(&mut rng) as f32;
                }
            }
            for suffix in ["b1", "b2"] {
                let pos = params.position(&format!("him.l{l}.e{i}.{suffix}"));
                for v in params.tensors_mut()[pos].data_mut() {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Owns the model, optimizer, data, and RNG stream for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: HiMoeModel<f32>,
    pub dataset: Dataset,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::check_dataset_compat(&cfg)?;
        let dataset = resolve_dataset(&cfg)?;
        let mut model = HiMoeModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
        if cfg.moe_reinit {
            reinit_experts(&mut model, cfg.seed.wrapping_add(0x5EED));
        }
        let opt = AdamW::new(model.params().total_elements(), cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, model, dataset, opt, rng, step: 0 })
    }

    /// Exact resume: restores parameters, optimizer moments, RNG position,
    /// and the step counter; the dataset is rebuilt deterministically.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let lc = load_checkpoint(path)?;
        lc.config.validate()?;
        Self::check_dataset_compat(&lc.config)?;
        let dataset = resolve_dataset(&lc.config)?;
        let mut model = HiMoeModel::<f32>::new(lc.config.model.clone(), lc.config.seed)?;
        checkpoint::check_param_layout(&lc, model.params())?;
        model.params_mut().set_from_flat(&lc.params);
        Ok(Trainer {
            cfg: lc.config,
            model,
            dataset,
            opt: lc.opt,
            rng: lc.rng,
            step: lc.step,
        })
    }

    /// Fine-tuning start: parameters come from the checkpoint, everything
    /// else (optimizer, RNG, step counter, dataset, schedule) from the new
    /// config. `cfg.moe_reinit` re-randomizes the experts after loading.
    pub fn fine_tune(path: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::check_dataset_compat(&cfg)?;
        let lc = load_checkpoint(path)?;
        if lc.config.model != cfg.model {
            return Err(Error::Checkpoint("checkpoint model config differs from fine-tune config".into()));
        }
        let dataset = resolve_dataset(&cfg)?;
        let mut model = HiMoeModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
        checkpoint::check_param_layout(&lc, model.params())?;
        model.params_mut().set_from_flat(&lc.params);
        if cfg.moe_reinit {
            reinit_experts(&mut model, cfg.seed.wrapping_add(0x5EED));
        }
        let opt = AdamW::new(model.params().total_elements(), cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, model, dataset, opt, rng, step: 0 })
    }

    fn check_dataset_compat(cfg: &TrainConfig) -> Result<()> {
        use crate::synth::{INSTR_LEN, MAX_STREAMS, OBS_DIM};
        if cfg.model.stack.action_dim != UNIFIED_DIM {
            return Err(Error::Config(format!(
                "dataset training needs action_dim {UNIFIED_DIM}, config has {}",
                cfg.model.stack.action_dim
            )));
        }
        if cfg.model.obs_dim != OBS_DIM
            || cfg.model.max_streams != MAX_STREAMS
            || cfg.model.instr_len != INSTR_LEN
        {
            return Err(Error::Config(
                "context dims must match the synthetic data layout".into(),
            ));
        }
        Ok(())
    }

    /// One optimizer step over a fresh batch. Examples, noise, and timesteps
    /// are drawn serially from the trainer RNG; per-example gradients may be
    /// computed in parallel but are accumulated in draw order, so the result
    /// is bitwise independent of thread scheduling.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let step = self.step + 1;
        let lr = lr_schedule(step as usize, &self.cfg);
        let h = self.cfg.model.stack.horizon;
        let a_dim = self.cfg.model.stack.action_dim;

        let mut draws = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let ex = self.dataset.sample_example(h, &mut self.rng)?;
            let eps = draw_noise(h, a_dim, &mut self.rng);
            let tau = sample_tau(&mut self.rng, self.cfg.tau_alpha, self.cfg.tau_beta);
            let fs = FlowSample::new(ex.chunk.clone(), eps, tau)?;
            draws.push((ex, fs));
        }

        let model = &self.model;
        let reg = self.cfg.reg;
        let hb_all = self.cfg.hb_on_all_moe;
        let per: Vec<Result<(LossBreakdown, Option<Vec<f32>>)>> = if self.cfg.deterministic {
            draws
                .iter()
                .map(|(ex, fs)| sample_loss_grad(model, ex, fs, &reg, hb_all, true))
                .collect()
        } else {
            draws
                .par_iter()
                .map(|(ex, fs)| sample_loss_grad(model, ex, fs, &reg, hb_all, true))
                .collect()
        };

        let n = draws.len() as f64;
        let mut acc = vec![0.0f32; self.model.params().total_elements()];
        let (mut lf, mut las, mut lhb) = (0.0, 0.0, 0.0);
        for r in per {
            let (bd, grad) = r?;
            lf += bd.l_flow;
            las += bd.l_as;
            lhb += bd.l_hb;
            for (a, b) in acc.iter_mut().zip(grad.expect("gradient requested")) {
                *a += b;
            }
        }
        let inv = (1.0 / n) as f32;
        for a in &mut acc {
            *a *= inv;
        }

        let mut flat = self.model.params().flatten();
        self.opt.step(&mut flat, &acc, lr);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer update" });
        }
        self.model.params_mut().set_from_flat(&flat);
        self.step = step;

        let (l_flow, l_as, l_hb) = (lf / n, las / n, lhb / n);
        Ok(MetricsRow {
            step,
            lr,
            l_flow,
            l_as,
            l_hb,
            total: l_flow + reg.lambda_as * l_as + reg.lambda_hb * l_hb,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.cfg,
            self.step,
            &self.dataset.state_stats,
            &self.dataset.action_stats,
            &self.rng,
            self.model.params(),
            &self.opt,
        )
    }

    /// Train until `total_steps`. With an output directory, metrics go to
    /// `metrics.jsonl` and the checkpoint is written before the first step
    /// (so an immediate failure still leaves a valid state), at the
    /// configured cadence, and at the end. On a non-finite loss the run
    /// aborts with `TrainAborted`; the most recent on-disk checkpoint is the
    /// last good state.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join("checkpoint.bin"));
        let mut metrics_file = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(d.join("metrics.jsonl"))?)
            }
            None => None,
        };
        if let Some(p) = &ckpt_path {
            // Never overwrite a prior (good) checkpoint with non-finite
            // state; every later save is guarded by the train_step checks.
            if self.model.params().tensors().iter().all(|t| t.all_finite()) {
                self.save_checkpoint(p)?;
            } else {
                return Err(Error::TrainAborted {
                    step: self.step as usize,
                    reason: "non-finite parameters at start of run".into(),
                });
            }
        }

        let mut rows = Vec::new();
        while self.step < self.cfg.total_steps as u64 {
            let row = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    return Err(Error::TrainAborted {
                        step: self.step as usize,
                        reason: e.to_string(),
                    })
                }
            };
            if let Some(f) = &mut metrics_file {
                let line = serde_json::to_string(&row)
                    .map_err(|e| Error::Checkpoint(format!("metrics encode: {e}")))?;
                writeln!(f, "{line}")?;
            }
            rows.push(row);
            if let Some(p) = &ckpt_path {
                if self.step % self.cfg.checkpoint_every as u64 == 0 {
                    self.save_checkpoint(p)?;
                }
            }
        }
        if let Some(p) = &ckpt_path {
            self.save_checkpoint(p)?;
        }
        if let Some(f) = &mut metrics_file {
            f.flush()?;
        }
        Ok(rows)
    }
}
