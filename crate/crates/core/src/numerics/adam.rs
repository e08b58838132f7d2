//! Adam optimizer with bias correction.

use crate::scalar::Scalar;

/// Adam hyper-parameters. Defaults: beta1=0.9, beta2=0.999, eps=1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<S: Scalar> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> Default for AdamConfig<S> {
    fn default() -> Self {
        Self {
            beta1: S::from_f64_c(0.9),
            beta2: S::from_f64_c(0.999),
            eps: S::from_f64_c(1e-8),
        }
    }
}

/// First/second-moment state for one parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, param: &mut [S], grad: &[S], lr: S, cfg: &AdamConfig<S>) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let one = S::one();
        let bc1 = one - cfg.beta1.powi(t);
        let bc2 = one - cfg.beta2.powi(t);
        for i in 0..param.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (one - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (one - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = vec![0.5f64, -1.5, 3.0];
        let orig = p.clone();
        let mut st = AdamState::new(3);
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            st.step(&mut p, &[0.0, 0.0, 0.0], 1e-2, &cfg);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_of_gradient() {
        // With bias correction, |update| ~= lr on the first step.
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        st.step(&mut p, &[0.3], 0.01, &AdamConfig::default());
        assert!((p[0] + 0.01).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = vec![2.0f64];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::default();
        for _ in 0..2000 {
            let grad = 2.0 * p[0];
            st.step(&mut p, &[grad], 0.05, &cfg);
        }
        assert!(p[0].abs() < 1e-3, "got {}", p[0]);
    }
}
