//! Evaluation on parameter snapshots: per-embodiment flow loss, action MSE
//! against the scripted expert, closed-loop rollout success, and routing
//! statistics (heatmap export + divergence utilities).

use super::sample_loss_grad;
use crate::codec::{decode, encode, mapped_dims, ActionSpace, UnifiedVector, VectorKind, UNIFIED_DIM};
use crate::context::{cache_context, ContextInput};
use crate::error::{Error, Result};
use crate::model::{HiMoeModel, LayerKind, PolicyInput};
use crate::objectives::{sample_tau, FlowSample, RegWeights, TAU_ALPHA, TAU_BETA};
use crate::sampler::{draw_noise, integrate, IntegratorConfig};
use crate::synth::{rollout_eval, Dataset, Embodiment, Policy, RolloutConfig, RolloutObs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The trained policy wrapped for closed-loop rollout: raw observations are
/// encoded and normalized, a chunk is sampled by flow integration with the
/// context KV cached per plan call, then denormalized, decoded to the raw
/// action layout, and clamped to the embodiment's action bounds.
pub struct ModelPolicy<'a> {
    pub model: &'a HiMoeModel<f32>,
    pub state_stats: &'a crate::codec::NormStats,
    pub action_stats: &'a crate::codec::NormStats,
    pub integrator: IntegratorConfig,
    pub rng: ChaCha8Rng,
}

impl Policy for ModelPolicy<'_> {
    fn plan(&mut self, emb: &Embodiment, obs: &RolloutObs) -> Result<Vec<Vec<f64>>> {
        if self.model.cfg().stack.action_dim != UNIFIED_DIM {
            return Err(Error::Config("rollout needs the unified action width".into()));
        }
        let mapped = mapped_dims(&emb.desc);
        let suv = encode(&obs.raw_state, &emb.desc, VectorKind::State)?;
        let suv = self.state_stats.apply(&suv, &mapped);
        let state_values = suv.values.to_vec();
        let state_mask: Vec<f64> = suv.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

        let ctx_in = ContextInput {
            obs_streams: obs.obs_streams.clone(),
            instr_ids: obs.instr_ids.to_vec(),
        };
        let cache = cache_context(self.model, &ctx_in)?;
        let chunk = integrate(
            self.model,
            &state_values,
            &state_mask,
            Some(&cache),
            &mut self.rng,
            &self.integrator,
        )?;

        let mut out = Vec::with_capacity(chunk.len());
        for row in chunk {
            let mut values = [0.0f64; UNIFIED_DIM];
            values.copy_from_slice(&row);
            self.action_stats.invert_slice(&mut values, &mapped);
            let uv = UnifiedVector { values, mask: mapped, kind: VectorKind::Action };
            let mut raw = decode(&uv, &emb.desc);
            for (c, v) in raw.iter_mut().enumerate() {
                let b = emb.action_bound(c);
                *v = v.clamp(-b, b);
            }
            out.push(raw);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Validation examples per embodiment for the flow loss.
    pub flow_examples: usize,
    /// Examples per embodiment for the sampled-action MSE.
    pub mse_examples: usize,
    /// Closed-loop trials per embodiment.
    pub rollout_trials: usize,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            flow_examples: 32,
            mse_examples: 8,
            rollout_trials: 20,
            seed: 0,
            integrator: IntegratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentReport {
    pub embodiment: String,
    /// Mean flow-matching loss on validation draws.
    pub flow_loss: f64,
    /// MSE of sampled normalized chunks against the expert's chunks.
    pub action_mse: f64,
    /// Closed-loop success rate in [0, 1].
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_embodiment: Vec<EmbodimentReport>,
    pub mean_flow_loss: f64,
    pub mean_success: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report parse: {e}")))
    }
}

/// Per-embodiment evaluation of a model snapshot on a dataset's embodiments
/// and normalization statistics.
pub fn evaluate(model: &HiMoeModel<f32>, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let h = model.cfg().stack.horizon;
    let a_dim = model.cfg().stack.action_dim;
    let reg = RegWeights::default();
    let mut reports = Vec::new();
    for (gi, emb) in ds.embodiments.iter().enumerate() {
        let ep_ids: Vec<usize> = ds
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, ep)| ep.embodiment == emb.desc.id)
            .map(|(i, _)| i)
            .collect();
        if ep_ids.is_empty() {
            return Err(Error::Dataset(format!("no episodes for {}", emb.desc.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1000 * gi as u64));

        let mut flow = 0.0;
        for _ in 0..opts.flow_examples {
            let ep = ep_ids[rng.gen_range(0..ep_ids.len())];
            let t = rng.gen_range(0..ds.episodes[ep].len());
            let ex = ds.example_at(ep, t, h)?;
            let eps = draw_noise(h, a_dim, &mut rng);
            let tau = sample_tau(&mut rng, TAU_ALPHA, TAU_BETA);
            let fs = FlowSample::new(ex.chunk.clone(), eps, tau)?;
            let (bd, _) = sample_loss_grad(model, &ex, &fs, &reg, false, false)?;
            flow += bd.l_flow;
        }
        flow /= opts.flow_examples.max(1) as f64;

        let mut mse = 0.0;
        for _ in 0..opts.mse_examples {
            let ep = ep_ids[rng.gen_range(0..ep_ids.len())];
            let t = rng.gen_range(0..ds.episodes[ep].len());
            let ex = ds.example_at(ep, t, h)?;
            let cache = cache_context(model, &ex.ctx)?;
            let chunk = integrate(
                model,
                &ex.state_values,
                &ex.state_mask,
                Some(&cache),
                &mut rng,
                &opts.integrator,
            )?;
            let mapped = mapped_dims(&emb.desc);
            let mut se = 0.0;
            let mut n = 0usize;
            for (pred, want) in chunk.iter().zip(&ex.chunk) {
                for d in 0..a_dim {
                    if mapped[d] {
                        se += (pred[d] - want[d]).powi(2);
                        n += 1;
                    }
                }
            }
            mse += se / n.max(1) as f64;
        }
        mse /= opts.mse_examples.max(1) as f64;

        let mut policy = ModelPolicy {
            model,
            state_stats: &ds.state_stats,
            action_stats: &ds.action_stats,
            integrator: opts.integrator,
            rng: ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(77 + gi as u64)),
        };
        let success = rollout_eval(
            &mut policy,
            emb,
            opts.rollout_trials,
            opts.seed.wrapping_add(500 + gi as u64),
            &RolloutConfig::default(),
        )?;

        reports.push(EmbodimentReport {
            embodiment: emb.desc.id.clone(),
            flow_loss: flow,
            action_mse: mse,
            success,
        });
    }
    let n = reports.len() as f64;
    Ok(EvalReport {
        mean_flow_loss: reports.iter().map(|r| r.flow_loss).sum::<f64>() / n,
        mean_success: reports.iter().map(|r| r.success).sum::<f64>() / n,
        per_embodiment: reports,
    })
}

/// One routing-statistics record: how often `expert` is among the routed
/// top-K at `layer` for tokens of `group` (= embodiment id × action space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub layer_kind: String,
    pub expert: usize,
    pub group: String,
    pub frequency: f64,
}

fn kind_str(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::AsMoe => "as_moe",
        LayerKind::HbMoe => "hb_moe",
        LayerKind::Dense => "dense",
    }
}

pub fn group_label(emb: &Embodiment) -> String {
    let space = match emb.desc.action_space {
        ActionSpace::Eef => "eef",
        ActionSpace::Joint => "joint",
    };
    format!("{}/{space}", emb.desc.id)
}

/// Routing frequencies over `per_group` random training draws per group.
/// Per (layer, group) the frequencies over experts sum to 1 exactly (counts
/// over a fixed total).
pub fn routing_heatmap(
    model: &HiMoeModel<f32>,
    ds: &Dataset,
    per_group: usize,
    seed: u64,
) -> Result<Vec<HeatmapRow>> {
    let stack = &model.cfg().stack;
    if !stack.has_moe() {
        return Ok(Vec::new());
    }
    let h = stack.horizon;
    let n = stack.n_experts;
    let mut rows = Vec::new();
    for (gi, emb) in ds.embodiments.iter().enumerate() {
        let ep_ids: Vec<usize> = ds
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, ep)| ep.embodiment == emb.desc.id)
            .map(|(i, _)| i)
            .collect();
        if ep_ids.is_empty() {
            return Err(Error::Dataset(format!("no episodes for {}", emb.desc.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31 * gi as u64));
        // counts[moe slot] -> (layer, kind, per-expert count, total)
        let mut counts: Vec<(usize, LayerKind, Vec<u64>, u64)> = Vec::new();
        for _ in 0..per_group {
            let ep = ep_ids[rng.gen_range(0..ep_ids.len())];
            let t = rng.gen_range(0..ds.episodes[ep].len());
            let ex = ds.example_at(ep, t, h)?;
            let eps = draw_noise(h, stack.action_dim, &mut rng);
            let tau = sample_tau(&mut rng, TAU_ALPHA, TAU_BETA);
            let fs = FlowSample::new(ex.chunk.clone(), eps, tau)?;
            let mut g = crate::tensor::Graph::new();
            let pn = model.emit_params(&mut g);
            let ctx = crate::context::encode_context(&mut g, model, &pn, &ex.ctx)?;
            let input = PolicyInput {
                state_values: ex.state_values.clone(),
                state_mask: ex.state_mask.clone(),
                actions: fs.a_tau.clone(),
                tau: fs.tau,
            };
            let trace = model.forward(&mut g, &pn, &input, Some(&ctx), None)?;
            for (mi, m) in trace.moe.iter().enumerate() {
                if counts.len() == mi {
                    counts.push((m.layer, m.kind, vec![0; n], 0));
                }
                let slot = &mut counts[mi];
                for routed in &m.decision.routed {
                    for &e in routed {
                        slot.2[e] += 1;
                        slot.3 += 1;
                    }
                }
            }
        }
        let group = group_label(emb);
        for (layer, kind, per_expert, total) in counts {
            for (e, &c) in per_expert.iter().enumerate() {
                rows.push(HeatmapRow {
                    layer,
                    layer_kind: kind_str(kind).into(),
                    expert: e,
                    group: group.clone(),
                    frequency: c as f64 / total as f64,
                });
            }
        }
    }
    Ok(rows)
}

/// CSV serialization with the documented header.
pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("layer,layer_kind,expert,group,frequency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer, r.layer_kind, r.expert, r.group, r.frequency
        ));
    }
    out
}

/// Normalized per-expert histogram at `layer`, pooled over groups whose
/// label contains `group_filter` (e.g. "/joint" pools all joint groups).
pub fn histogram_for(
    rows: &[HeatmapRow],
    layer: usize,
    group_filter: &str,
    n_experts: usize,
) -> Vec<f64> {
    let mut hist = vec![0.0; n_experts];
    for r in rows {
        if r.layer == layer && r.group.contains(group_filter) {
            hist[r.expert] += r.frequency;
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        for h in &mut hist {
            *h /= total;
        }
    }
    hist
}

/// Jensen–Shannon divergence (natural log) between two distributions over
/// the same support; 0 for identical inputs, ln 2 for disjoint ones.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "JS divergence needs equal support");
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 })
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(&x, &y)| 0.5 * (x + y)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}
