use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            name: "adam step".into(),
            expected: vec![state.m.len()],
            got: vec![params.len(), grads.len()],
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3, 0.01);
        adam_step(&mut p, &[0.3, -4.0, 1e-3], &mut s).unwrap();
        assert_eq!(s.step, 1);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-7);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-7);
        assert!((p[2] - (0.5 - 0.01)).abs() < 1e-4);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2, 0.1);
        for _ in 0..100 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 100);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = vec![0.0];
        let mut s = AdamState::new(1, 1e-2);
        let mut hit = None;
        for i in 0..5000 {
            let g = 2.0 * (w[0] - 3.0);
            adam_step(&mut w, &[g], &mut s).unwrap();
            if (w[0] - 3.0).abs() < 1e-3 && hit.is_none() {
                hit = Some(i);
            }
        }
        assert!(hit.is_some());
        assert!((w[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2, 0.1);
        assert!(adam_step(&mut [0.0], &[0.0], &mut s).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
