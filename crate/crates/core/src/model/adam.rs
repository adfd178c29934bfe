use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        OptimizerState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    pub fn reset(&mut self) {
        self.first_moment.fill(0.0);
        self.second_moment.fill(0.0);
        self.step = 0;
    }
}

/// One Adam update in place. A non-finite gradient leaves both `params` and
/// `state` untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            format!("{} parameters", params.len()),
            format!("{} gradients / {} moments", grads.len(), state.first_moment.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Update(format!("non-finite gradient at coordinate {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op_except_step() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(2, 1e-3);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1, lr);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        // m_hat = 1, v_hat = 1 → Δ = -lr / (1 + 1e-8)
        let expected = -lr / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1, 1e-2);
        let mut prev = p[0];
        for _ in 0..50 {
            adam_step(&mut p, &[0.3], &mut s).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.0, 0.0];
        let mut s = OptimizerState::new(2, 1e-3);
        let err = adam_step(&mut p, &[0.0, f64::NAN], &mut s).unwrap_err();
        assert!(matches!(err, Error::Update(_)));
        assert_eq!(s.step, 0);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(1, 1e-3);
        assert!(adam_step(&mut p, &[0.0, 1.0], &mut s).is_err());
    }
}
