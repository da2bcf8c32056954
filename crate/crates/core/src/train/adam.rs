use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1_t: 1.0, beta2_t: 1.0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    state.beta1_t *= BETA1;
    state.beta2_t *= BETA2;
    let (c1, c2) = (1.0 - state.beta1_t, 1.0 - state.beta2_t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / (math::sqrt(*v / c2) + EPSILON);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        }
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, -1.0], &mut st, 0.1);
        // m = 0.1 g, v = 0.001 g^2; corrected they are g and g^2.
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (2.0 + 0.1 * 1.0 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((st.m[0] - 0.05).abs() < 1e-16 && (st.v[1] - 0.001).abs() < 1e-16);
        // second step with g = (1, 1)
        adam_step(&mut p, &[1.0, 1.0], &mut st, 0.1);
        let m0 = 0.9 * 0.05 + 0.1 * 1.0;
        let v0: f64 = 0.999 * 0.00025 + 0.001 * 1.0;
        let want = (1.0 - 0.1 * 0.5 / (0.5 + 1e-8)) - 0.1 * (m0 / (1.0 - 0.81)) / ((v0 / (1.0 - 0.999 * 0.999)).sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn constant_gradient_moves_at_learning_rate() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        let mut last = p.clone();
        for _ in 0..2000 {
            last.copy_from_slice(&p);
            adam_step(&mut p, &[3.0, -0.01], &mut st, 1e-3);
        }
        assert!(((last[0] - p[0]) - 1e-3).abs() < 1e-9);
        assert!(((p[1] - last[1]) - 1e-3).abs() < 1e-8);
    }
}
