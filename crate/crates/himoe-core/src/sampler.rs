//! Inference-time action generation: Euler integration of the learned vector
//! field from Gaussian noise at τ=0 to the action chunk at τ=1.

use crate::context::ContextCache;
use crate::error::{Error, Result};
use crate::model::{HiMoeModel, PolicyInput};
use crate::tensor::{Graph, Scalar};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Euler integrator settings. Only the explicit Euler scheme is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { steps: 10 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("integrator needs steps >= 1".into()));
        }
        Ok(())
    }
}

/// Integrate an arbitrary vector field from the given noise draw.
///
/// The model is trained to predict the target ε − A (the direction from data
/// to noise), while the flow moves from noise toward data:
/// A^τ = τ·A + (1−τ)·ε, so dA^τ/dτ = A − ε = −(ε − A). Euler therefore
/// *subtracts* the predicted field: A^{τ+Δ} = A^τ − Δ·v(A^τ, τ).
pub fn integrate_field<F>(eps: Vec<Vec<f64>>, cfg: &IntegratorConfig, mut field: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Vec<f64>], f64) -> Result<Vec<Vec<f64>>>,
{
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let mut a = eps;
    for step in 0..cfg.steps {
        let tau = step as f64 * dt;
        let v = field(&a, tau)?;
        if v.len() != a.len() || v.iter().zip(&a).any(|(x, y)| x.len() != y.len()) {
            return Err(Error::ShapeMismatch("field output vs chunk".into()));
        }
        for (ar, vr) in a.iter_mut().zip(&v) {
            for (x, &d) in ar.iter_mut().zip(vr) {
                *x -= dt * d;
            }
        }
        if a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "flow integration" });
        }
    }
    Ok(a)
}

/// Draw the initial chunk ε ~ N(0, I) with the model's horizon/width.
pub fn draw_noise(horizon: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..horizon)
        .map(|_| (0..action_dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Sample one normalized action chunk from the policy. Context KV comes from
/// the cache so the encoder runs once per episode step, not once per
/// integration step.
pub fn integrate<T: Scalar>(
    model: &HiMoeModel<T>,
    state_values: &[f64],
    state_mask: &[f64],
    ctx: Option<&ContextCache<T>>,
    rng: &mut ChaCha8Rng,
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    let stack = &model.cfg().stack;
    let eps = draw_noise(stack.horizon, stack.action_dim, rng);
    integrate_field(eps, cfg, |a, tau| {
        let mut g = Graph::new();
        let pn = model.emit_params(&mut g);
        let ctx_nodes = match ctx {
            Some(c) => Some(c.emit(&mut g, model)?),
            None => None,
        };
        let input = PolicyInput {
            state_values: state_values.to_vec(),
            state_mask: state_mask.to_vec(),
            actions: a.to_vec(),
            tau,
        };
        let t = model.forward(&mut g, &pn, &input, ctx_nodes.as_ref(), None)?;
        let v = g.value(t.v_pred);
        Ok((0..stack.horizon).map(|r| v.row(r).iter().map(|x| x.to_f64_()).collect()).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertStackConfig, ModelConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn chunk(v: f64, h: usize, w: usize) -> Vec<Vec<f64>> {
        vec![vec![v; w]; h]
    }

    #[test]
    fn oracle_field_reconstructs_exactly_any_step_count() {
        let a = vec![vec![0.7, -0.3], vec![1.4, 0.1]];
        let eps = vec![vec![-0.9, 0.5], vec![0.2, 2.0]];
        for steps in [1usize, 2, 7, 10, 100] {
            let target: Vec<Vec<f64>> = a
                .iter()
                .zip(&eps)
                .map(|(ar, er)| er.iter().zip(ar).map(|(e, x)| e - x).collect())
                .collect();
            let out = integrate_field(eps.clone(), &IntegratorConfig { steps }, |_, _| {
                Ok(target.clone())
            })
            .unwrap();
            for (or, ar) in out.iter().zip(&a) {
                for (o, x) in or.iter().zip(ar) {
                    assert_relative_eq!(o, x, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_field_returns_noise() {
        let eps = vec![vec![0.3, -1.1]];
        let out = integrate_field(eps.clone(), &IntegratorConfig::default(), |_, _| {
            Ok(chunk(0.0, 1, 2))
        })
        .unwrap();
        assert_eq!(out, eps);
    }

    #[test]
    fn nan_aborts_integration() {
        let eps = vec![vec![0.0]];
        let r = integrate_field(eps, &IntegratorConfig::default(), |_, _| {
            Ok(vec![vec![f64::NAN]])
        });
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(integrate_field(vec![vec![0.0]], &IntegratorConfig { steps: 0 }, |_, _| {
            Ok(vec![vec![0.0]])
        })
        .is_err());
    }

    #[test]
    fn model_integration_is_deterministic_given_seed() {
        let mut stack = ExpertStackConfig::sandwich(5, 3, 2);
        stack.d_model = 8;
        stack.d_k = 4;
        stack.d_ff = 8;
        stack.horizon = 2;
        stack.action_dim = 3;
        let cfg = ModelConfig { stack, vocab_size: 4, obs_dim: 3, max_streams: 1, instr_len: 2 };
        let model: crate::model::HiMoeModel<f64> =
            crate::model::HiMoeModel::new(cfg.clone(), 5).unwrap();
        let sv = vec![0.1, 0.2, 0.3];
        let sm = vec![1.0, 1.0, 1.0];
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            integrate(&model, &sv, &sm, None, &mut rng, &IntegratorConfig::default()).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn cached_context_integration_matches_fresh() {
        use crate::context::{cache_context, ContextInput};
        let mut stack = ExpertStackConfig::sandwich(5, 3, 2);
        stack.d_model = 8;
        stack.d_k = 4;
        stack.d_ff = 8;
        stack.horizon = 2;
        stack.action_dim = 3;
        let cfg = ModelConfig { stack, vocab_size: 4, obs_dim: 3, max_streams: 1, instr_len: 2 };
        let model: crate::model::HiMoeModel<f64> =
            crate::model::HiMoeModel::new(cfg.clone(), 6).unwrap();
        let ci = ContextInput { obs_streams: vec![Some(vec![0.5, -0.5, 0.0])], instr_ids: vec![1, 2] };
        let cache = cache_context(&model, &ci).unwrap();
        let sv = vec![0.0, 0.1, -0.1];
        let sm = vec![1.0; 3];

        // With-cache path vs re-encoding the context inside the field closure.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cached = integrate(&model, &sv, &sm, Some(&cache), &mut rng, &IntegratorConfig::default()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = draw_noise(2, 3, &mut rng);
        let fresh = integrate_field(eps, &IntegratorConfig::default(), |a, tau| {
            let mut g = Graph::new();
            let pn = model.emit_params(&mut g);
            let ctx = crate::context::encode_context(&mut g, &model, &pn, &ci)?;
            let input = crate::model::PolicyInput {
                state_values: sv.clone(),
                state_mask: sm.clone(),
                actions: a.to_vec(),
                tau,
            };
            let t = model.forward(&mut g, &pn, &input, Some(&ctx), None)?;
            let v = g.value(t.v_pred);
            Ok((0..2).map(|r| v.row(r).to_vec()).collect())
        })
        .unwrap();
        assert_eq!(cached, fresh);
    }
}
