use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter {i}: {} values, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }

    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.values.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.values[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![v], vec![1]).unwrap()]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(1e-4, &p);
        adam_step(&mut p, &[vec![2.0]], &mut state).unwrap();
        // m_hat = 2, v_hat = 4, so the step is lr * 2 / (2 + eps).
        let expected = -1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].values[0] - expected).abs() < 1e-18);
        assert!((p[0].values[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![1.5, -2.0], vec![2]).unwrap()];
        let mut state = AdamState::new(1e-3, &p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut state).unwrap();
        assert_eq!(p[0].values, vec![1.5, -2.0]);
    }

    #[test]
    fn descends_quadratic() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new(1e-2, &p);
        let mut prev = 1.0;
        for _ in 0..100 {
            let theta = p[0].values[0];
            adam_step(&mut p, &[vec![2.0 * theta]], &mut state).unwrap();
            let f = p[0].values[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new(1e-2, &p);
        assert!(adam_step(&mut p, &[vec![1.0, 2.0]], &mut state).is_err());
        assert!(adam_step(&mut p, &[], &mut state).is_err());
    }
}
