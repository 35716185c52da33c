use super::blocks::{fused_attention, gate, moe_forward, AttentionParams, CtxLayer, FfnParams};
use super::*;
use crate::tensor::{backward, Graph, Tensor};
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ModelConfig {
    let mut stack = ExpertStackConfig::sandwich(5, 3, 2);
    stack.d_model = 8;
    stack.d_k = 4;
    stack.d_ff = 8;
    stack.horizon = 2;
    stack.action_dim = 3;
    ModelConfig { stack, vocab_size: 4, obs_dim: 3, max_streams: 1, instr_len: 2 }
}

fn tiny_input(cfg: &ModelConfig) -> PolicyInput {
    let a = cfg.stack.action_dim;
    PolicyInput {
        state_values: (0..a).map(|i| 0.1 * i as f64).collect(),
        state_mask: vec![1.0; a],
        actions: (0..cfg.stack.horizon)
            .map(|h| (0..a).map(|i| 0.05 * (h * a + i) as f64 - 0.1).collect())
            .collect(),
        tau: 0.3,
    }
}

// ---- gate ----

fn run_gate(logits: Vec<f64>, k: usize) -> crate::Result<GateDecision<f64>> {
    let n = logits.len();
    let mut g = Graph::new();
    let hidden = g.leaf(Tensor::new(vec![1, n], vec![1.0; n]).unwrap());
    // Diagonal-free trick: use an identity "hidden" instead. Simpler: leaf the
    // logits directly as hidden [1,n] and use the identity as the gate matrix.
    let w = g.leaf(Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|p| if p % (n + 1) == 0 { logits[p / (n + 1)] } else { 0.0 })
            .collect(),
    )
    .unwrap());
    let _ = hidden;
    let ones = g.leaf(Tensor::new(vec![1, n], vec![1.0; n]).unwrap());
    gate(&mut g, ones, w, k, None)
}

#[test]
fn gate_hand_example() {
    // logits [2,1,0,-1], K=2: top-2 renormalized equals softmax over {2,1}.
    let d = run_gate(vec![2.0, 1.0, 0.0, -1.0], 2).unwrap();
    assert_eq!(d.routed[0], vec![0, 1]);
    assert_relative_eq!(d.weights[0][0], 0.7310585786300049, epsilon = 1e-12);
    assert_relative_eq!(d.weights[0][1], 0.2689414213699951, epsilon = 1e-12);
    let s = d.scores.row(0);
    assert_relative_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn gate_uniform_tie_breaks_low_index() {
    let d = run_gate(vec![0.0; 4], 2).unwrap();
    assert_eq!(d.routed[0], vec![0, 1]);
    assert_relative_eq!(d.weights[0][0], 0.5, epsilon = 1e-12);
    assert_relative_eq!(d.weights[0][1], 0.5, epsilon = 1e-12);
}

#[test]
fn gate_k_equals_n_recovers_full_softmax() {
    let d = run_gate(vec![0.3, -0.7, 1.1], 3).unwrap();
    for (slot, &i) in d.routed[0].iter().enumerate() {
        assert_relative_eq!(d.weights[0][slot], d.scores.at(0, i), epsilon = 1e-12);
    }
}

#[test]
fn gate_rejects_k_above_n() {
    assert!(run_gate(vec![0.0, 1.0], 3).is_err());
}

#[test]
fn gate_contract_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.gen_range(2..9);
        let k = rng.gen_range(1..=n);
        let u = rng.gen_range(1..4);
        let mut g = Graph::new();
        let hidden = g.leaf(Tensor::new(
            vec![u, 4],
            (0..u * 4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap());
        let w = g.leaf(Tensor::new(
            vec![4, n],
            (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let d = gate(&mut g, hidden, w, k, None).unwrap();
        for t in 0..u {
            assert_relative_eq!(d.scores.row(t).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_eq!(d.routed[t].len(), k);
            assert_relative_eq!(d.weights[t].iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }
}

// ---- moe_forward ----

fn rand_ffn(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, dm: usize, dff: usize) -> FfnParams {
    let mat = |r: usize, c: usize, g: &mut Graph<f64>, rng: &mut ChaCha8Rng| {
        g.leaf(Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .unwrap())
    };
    let w1 = mat(dm, dff, g, rng);
    let w2 = mat(dff, dm, g, rng);
    let vecp = |c: usize, g: &mut Graph<f64>, rng: &mut ChaCha8Rng| {
        g.leaf(Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap())
    };
    let b1 = vecp(dff, g, rng);
    let b2 = vecp(dm, g, rng);
    FfnParams { w1, b1, w2, b2 }
}

#[test]
fn moe_k1_equals_routed_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let tokens = g.leaf(Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
    let experts: Vec<FfnParams> = (0..3).map(|_| rand_ffn(&mut g, &mut rng, 4, 6)).collect();
    let w_gate = g.leaf(Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let (out, d, _) = moe_forward(&mut g, tokens, &experts, w_gate, 1, false, None).unwrap();
    for u in 0..2 {
        let i = d.routed[u][0];
        let row = g.slice_rows(tokens, u, u + 1);
        let direct = super::blocks::ffn(&mut g, row, &experts[i]);
        let got = g.value(out).row(u).to_vec();
        let want = g.value(direct).row(0).to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn moe_identical_experts_ignore_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let tokens = g.leaf(Tensor::new(vec![2, 4], (0..8).map(|i| 0.2 * i as f64 - 0.5).collect()).unwrap());
    let shared = rand_ffn(&mut g, &mut rng, 4, 6);
    let experts: Vec<FfnParams> = (0..4)
        .map(|_| FfnParams { w1: shared.w1, b1: shared.b1, w2: shared.w2, b2: shared.b2 })
        .collect();
    let w_gate = g.leaf(Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let (out, _, _) = moe_forward(&mut g, tokens, &experts, w_gate, 2, false, None).unwrap();
    let row = g.slice_rows(tokens, 0, 1);
    let direct = super::blocks::ffn(&mut g, row, &shared);
    let got = g.value(out).row(0).to_vec();
    let want = g.value(direct).row(0).to_vec();
    for (a, b) in got.iter().zip(&want) {
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn moe_expert_permutation_equivariance(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4usize;
        let k = rng.gen_range(1..=n);
        let dm = 4usize;
        let tok_data: Vec<f64> = (0..2 * dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gate_data: Vec<f64> = (0..dm * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expert_seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();

        let eval = |perm: &[usize]| -> Tensor<f64> {
            let mut g = Graph::new();
            let tokens = g.leaf(Tensor::new(vec![2, dm], tok_data.clone()).unwrap());
            // permute gate columns with the expert order
            let mut gd = vec![0.0; dm * n];
            for r in 0..dm {
                for (new_i, &old_i) in perm.iter().enumerate() {
                    gd[r * n + new_i] = gate_data[r * n + old_i];
                }
            }
            let w_gate = g.leaf(Tensor::new(vec![dm, n], gd).unwrap());
            let experts: Vec<FfnParams> = perm
                .iter()
                .map(|&i| {
                    let mut er = ChaCha8Rng::seed_from_u64(expert_seeds[i]);
                    rand_ffn(&mut g, &mut er, dm, 5)
                })
                .collect();
            let (out, _, _) = moe_forward(&mut g, tokens, &experts, w_gate, k, false, None).unwrap();
            g.value(out).clone()
        };

        let ident: Vec<usize> = (0..n).collect();
        let rot: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let a = eval(&ident);
        let b = eval(&rot);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

// ---- fused attention ----

#[test]
fn fused_attention_empty_ctx_is_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dm = 6;
    let dk = 3;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3, dm], (0..3 * dm).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let mat = |r: usize, c: usize, g: &mut Graph<f64>, rng: &mut ChaCha8Rng| {
        g.leaf(Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
    };
    let p = AttentionParams {
        wq: mat(dm, dk, &mut g, &mut rng),
        wk: mat(dm, dk, &mut g, &mut rng),
        wv: mat(dm, dk, &mut g, &mut rng),
        wo: mat(dk, dm, &mut g, &mut rng),
    };
    let mask = vec![true; 3];
    let plain = fused_attention(&mut g, x, &p, &mask, None, dk);

    // Same computation with a context pair whose positions are all masked.
    let ck = g.leaf(Tensor::new(vec![2, dk], vec![9.0; 2 * dk]).unwrap());
    let cv = g.leaf(Tensor::new(vec![2, dk], vec![-9.0; 2 * dk]).unwrap());
    let ctx = CtxLayer { k: ck, v: cv };
    let fused = fused_attention(&mut g, x, &p, &mask, Some((&ctx, &[false, false])), dk);

    let a = g.value(plain).clone();
    let b = g.value(fused).clone();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_relative_eq!(x, y, epsilon = 1e-12);
    }
}

#[test]
fn fused_attention_saturates_to_ctx_value() {
    // One context key aligned with the query at scale 50 dominates the
    // softmax, so the attended value converges to the context value row.
    let dk = 4;
    let dm = dk;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, dm], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let eye = |g: &mut Graph<f64>| {
        g.leaf(Tensor::new(
            vec![dm, dk],
            (0..dm * dk).map(|p| if p % (dk + 1) == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap())
    };
    let p = AttentionParams { wq: eye(&mut g), wk: eye(&mut g), wv: eye(&mut g), wo: eye(&mut g) };
    let ck = g.leaf(Tensor::new(vec![1, dk], vec![50.0, 0.0, 0.0, 0.0]).unwrap());
    let ctx_v = vec![0.25, -0.5, 0.75, -1.0];
    let cv = g.leaf(Tensor::new(vec![1, dk], ctx_v.clone()).unwrap());
    let ctx = CtxLayer { k: ck, v: cv };
    let out = fused_attention(&mut g, x, &p, &[true], Some((&ctx, &[true])), dk);
    let got = g.value(out).row(0).to_vec();
    for (a, b) in got.iter().zip(&ctx_v) {
        assert_relative_eq!(a, b, epsilon = 1e-6);
    }
}

// ---- full forward ----

#[test]
fn forward_is_deterministic_bitwise() {
    let cfg = ModelConfig::toy_default();
    let model: HiMoeModel<f64> = HiMoeModel::new(cfg.clone(), 42).unwrap();
    let input = tiny_input_for(&cfg);
    let run = || {
        let mut g = Graph::new();
        let pn = model.emit_params(&mut g);
        let t = model.forward(&mut g, &pn, &input, None, None).unwrap();
        g.value(t.v_pred).clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a.data(), b.data());
}

fn tiny_input_for(cfg: &ModelConfig) -> PolicyInput {
    let a = cfg.stack.action_dim;
    PolicyInput {
        state_values: (0..a).map(|i| (i as f64 * 0.37).sin()).collect(),
        state_mask: (0..a).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect(),
        actions: (0..cfg.stack.horizon)
            .map(|h| (0..a).map(|i| ((h + i) as f64 * 0.21).cos() * 0.3).collect())
            .collect(),
        tau: 0.62,
    }
}

#[test]
fn forward_output_shape_tracks_horizon() {
    for h in [1usize, 8, 50] {
        let mut cfg = tiny_cfg();
        cfg.stack.horizon = h;
        let model: HiMoeModel<f64> = HiMoeModel::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let pn = model.emit_params(&mut g);
        let t = model.forward(&mut g, &pn, &tiny_input_for(&cfg), None, None).unwrap();
        assert_eq!(g.value(t.v_pred).rc(), (h, cfg.stack.action_dim));
    }
}

#[test]
fn forward_rejects_bad_shapes() {
    let cfg = tiny_cfg();
    let model: HiMoeModel<f64> = HiMoeModel::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let pn = model.emit_params(&mut g);
    let mut bad = tiny_input(&cfg);
    bad.state_values.pop();
    assert!(model.forward(&mut g, &pn, &bad, None, None).is_err());
    let mut bad = tiny_input(&cfg);
    bad.tau = 1.5;
    assert!(model.forward(&mut g, &pn, &bad, None, None).is_err());
    let mut bad = tiny_input(&cfg);
    bad.actions.pop();
    assert!(model.forward(&mut g, &pn, &bad, None, None).is_err());
}

/// Central-difference gradient of ‖v_pred‖² w.r.t. every parameter, with
/// routing pinned so the piecewise-constant top-K selection cannot flip
/// between perturbations. Exercises the context encoder path too.
#[test]
fn forward_full_gradient_check() {
    let cfg = tiny_cfg();
    let model: HiMoeModel<f64> = HiMoeModel::new(cfg.clone(), 3).unwrap();
    let input = tiny_input(&cfg);
    let ctx_in = crate::context::ContextInput {
        obs_streams: vec![Some(vec![0.2, -0.4, 0.9])],
        instr_ids: vec![1, 3],
    };

    // Pin routing from an unperturbed pass.
    let pins = {
        let mut g = Graph::new();
        let pn = model.emit_params(&mut g);
        let ctx = crate::context::encode_context(&mut g, &model, &pn, &ctx_in).unwrap();
        let t = model.forward(&mut g, &pn, &input, Some(&ctx), None).unwrap();
        HiMoeModel::extract_pins(&t)
    };

    let loss_of = |m: &HiMoeModel<f64>| -> (f64, Option<Vec<Tensor<f64>>>, Vec<crate::tensor::NodeId>) {
        let mut g = Graph::new();
        let pn = m.emit_params(&mut g);
        let ctx = crate::context::encode_context(&mut g, m, &pn, &ctx_in).unwrap();
        let t = m.forward(&mut g, &pn, &input, Some(&ctx), Some(&pins)).unwrap();
        let sq = g.mul(t.v_pred, t.v_pred);
        let loss = g.sum_all(sq);
        backward(&mut g, loss).unwrap();
        let grads: Vec<Tensor<f64>> = pn.0.iter().map(|&n| g.grad(n)).collect();
        (g.value(loss).item(), Some(grads), pn.0.clone())
    };

    let (_, grads, _) = loss_of(&model);
    let grads = grads.unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();

    let flat = model.params().flatten();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    // Stride through coordinates so the check touches every parameter tensor
    // without 2x-forward per scalar over the whole model.
    let stride = (flat.len() / 600).max(1);
    let mut m = HiMoeModel::<f64>::new(cfg, 3).unwrap();
    for i in (0..flat.len()).step_by(stride) {
        let mut fp = flat.clone();
        fp[i] += h;
        m.params_mut().set_from_flat(&fp);
        let (lp, _, _) = loss_of(&m);
        fp[i] -= 2.0 * h;
        m.params_mut().set_from_flat(&fp);
        let (lm, _, _) = loss_of(&m);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
}

#[test]
fn tau_embedding_is_bounded_and_distinct() {
    let a = tau_embedding(0.1, 16);
    let b = tau_embedding(0.9, 16);
    assert!(a.iter().all(|v| v.abs() <= 1.0));
    assert_ne!(a, b);
}
