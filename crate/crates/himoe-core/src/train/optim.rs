//! Adam with decoupled weight decay. Moments are stored in f32 (matching the
//! parameter and checkpoint precision); per-element updates are computed in
//! f64 and rounded once, so a step is a pure function of (state, grad, lr).

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps (drives bias correction).
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update in place. Weight decay is decoupled: it scales the
    /// parameter directly by `lr * weight_decay` and never enters the
    /// moment estimates.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param size mismatch");
        assert_eq!(params.len(), grads.len(), "grad/param size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = self.beta1 * self.m[i] as f64 + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] as f64 + (1.0 - self.beta2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let mut p = params[i] as f64;
            p -= lr * self.weight_decay * p;
            p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            params[i] = p as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = (x - 3)^2, grad = 2(x - 3).
        let mut x = vec![0.0f32];
        let mut opt = AdamW::new(1, 0.0);
        for _ in 0..4000 {
            let g = 2.0 * (x[0] - 3.0);
            opt.step(&mut x, &[g], 1e-2);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_unused_params() {
        // Zero gradient: the only force is weight decay, applied directly to
        // the parameter, so it decays geometrically.
        let mut x = vec![2.0f32];
        let mut opt = AdamW::new(1, 0.1);
        let lr = 0.5;
        opt.step(&mut x, &[0.0], lr);
        assert!((x[0] - 2.0 * (1.0 - lr * 0.1) as f32).abs() < 1e-7);
        for _ in 0..200 {
            opt.step(&mut x, &[0.0], lr);
        }
        assert!(x[0].abs() < 1e-3);
    }

    #[test]
    fn step_is_bitwise_deterministic() {
        let run = || {
            let mut x = vec![1.0f32, -0.5, 0.25];
            let mut opt = AdamW::new(3, 1e-4);
            for k in 0..50 {
                let g: Vec<f32> = x.iter().map(|&p| p * 0.3 + k as f32 * 0.01).collect();
                opt.step(&mut x, &g, 1e-3);
            }
            (x, opt)
        };
        assert_eq!(run(), run());
    }
}
