//! Config-grid experiment driver: one independent train+evaluate per cell at
//! the cell's own fixed seed, so results are order-independent.

use super::eval::{evaluate, EvalOptions};
use super::{TrainConfig, Trainer};
use crate::error::Result;
use crate::model::LayerKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub label: String,
    /// The cell's config, echoed verbatim.
    pub config_toml: String,
    /// Mean flow loss over the last (up to) 10 steps.
    pub final_flow: f64,
    pub final_total: f64,
    /// Mean rollout success; absent when the sweep ran without rollouts.
    pub mean_success: Option<f64>,
}

/// The standard architecture variants: the hierarchical stack itself, the
/// parameter-matched all-dense baseline, an all-HB stack (no action-space
/// layers), and a single-kind MoE stack (every MoE layer AS) trained with
/// both regularizers.
pub fn standard_cells(base: &TrainConfig) -> Vec<SweepCell> {
    let mut cells = vec![SweepCell { label: "hierarchical".into(), cfg: base.clone() }];

    let mut dense = base.clone();
    dense.model.stack = base.model.stack.dense_matched();
    cells.push(SweepCell { label: "dense-matched".into(), cfg: dense });

    let mut all_hb = base.clone();
    for k in &mut all_hb.model.stack.layer_kinds {
        if *k == LayerKind::AsMoe {
            *k = LayerKind::HbMoe;
        }
    }
    cells.push(SweepCell { label: "all-hb".into(), cfg: all_hb });

    let mut single = base.clone();
    for k in &mut single.model.stack.layer_kinds {
        if *k == LayerKind::HbMoe {
            *k = LayerKind::AsMoe;
        }
    }
    single.hb_on_all_moe = true;
    cells.push(SweepCell { label: "single-moe-both-regs".into(), cfg: single });

    cells
}

/// Cartesian grid over expert count and routed-expert count.
pub fn grid_cells(base: &TrainConfig, n_values: &[usize], k_values: &[usize]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &n in n_values {
        for &k in k_values {
            if k > n {
                continue;
            }
            let mut cfg = base.clone();
            cfg.model.stack.n_experts = n;
            cfg.model.stack.top_k = k;
            cells.push(SweepCell { label: format!("n{n}-k{k}"), cfg });
        }
    }
    cells
}

/// Train and evaluate every cell independently. Each cell uses only its own
/// config (and seed), so permuting the cell order permutes the results
/// without changing any of them.
pub fn run_sweep(cells: &[SweepCell], rollout_trials: usize) -> Result<Vec<SweepResult>> {
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut trainer = Trainer::new(cell.cfg.clone())?;
        let rows = trainer.run(None)?;
        let tail = &rows[rows.len().saturating_sub(10)..];
        let final_flow = tail.iter().map(|r| r.l_flow).sum::<f64>() / tail.len().max(1) as f64;
        let final_total = tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64;
        let mean_success = if rollout_trials > 0 {
            let opts = EvalOptions {
                flow_examples: 0,
                mse_examples: 0,
                rollout_trials,
                seed: cell.cfg.seed,
                ..EvalOptions::default()
            };
            Some(evaluate(&trainer.model, &trainer.dataset, &opts)?.mean_success)
        } else {
            None
        };
        results.push(SweepResult {
            label: cell.label.clone(),
            config_toml: cell.cfg.to_toml()?,
            final_flow,
            final_total,
            mean_success,
        });
    }
    Ok(results)
}

/// Human-readable comparison table followed by each cell's verbatim config.
pub fn sweep_table(results: &[SweepResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>12} {:>12} {:>10}\n",
        "cell", "final_flow", "final_total", "success"
    ));
    for r in results {
        let s = r
            .mean_success
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<24} {:>12.6} {:>12.6} {:>10}\n",
            r.label, r.final_flow, r.final_total, s
        ));
    }
    for r in results {
        out.push_str(&format!("\n[cell {}]\n{}", r.label, r.config_toml));
    }
    out
}
