use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// AdamW moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// Parameters flagged in `decays` are first shrunk by `1 - lr * weight_decay`;
/// then every parameter takes the bias-corrected Adam step.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    decays: &[bool],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decays.len() != n || state.first_moment.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adamw: {} params, {} grads, {} decay flags, {} moments",
            n,
            grads.len(),
            decays.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        if decays[i] {
            params[i] *= 1.0 - lr * weight_decay;
        }
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = OptimizerState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adamw_step(&mut s, &mut p, &[0.0; 3], &[true; 3], 1e-2, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_single_scalar() {
        // m = 0.1 g, v = 0.001 g²; bias-corrected m̂ = g, v̂ = g².
        let g = 0.3;
        let lr = 0.01;
        let mut s = OptimizerState::new(1);
        let mut p = vec![2.0];
        adamw_step(&mut s, &mut p, &[g], &[false], lr, 0.05).unwrap();
        let expect = 2.0 - lr * g / (g + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((s.first_moment[0] - 0.03).abs() < 1e-15);
        assert!((s.second_moment[0] - 0.09 * 0.001).abs() < 1e-18);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = OptimizerState::new(2);
        let mut p = vec![4.0, 4.0];
        adamw_step(&mut s, &mut p, &[0.0, 0.0], &[true, false], 0.1, 0.5).unwrap();
        assert!((p[0] - 4.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(p[1], 4.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = OptimizerState::new(2);
        let mut p = vec![0.0; 2];
        assert!(adamw_step(&mut s, &mut p, &[0.0], &[true; 2], 0.1, 0.0).is_err());
    }
}
