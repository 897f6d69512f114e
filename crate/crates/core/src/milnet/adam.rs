//! Adam optimiser over flat parameter groups.
//!
//! The model exposes its trainable parameters as an ordered list of slices
//! (one per tensor, plus the pooling sharpness as a one-element group); the
//! optimiser state mirrors that list and refuses to run if the layout ever
//! drifts from the one it was created with.

use super::scalar::Scalar;
use super::MilError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    /// Standard moment decays and epsilon with the given learning rate.
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter group, plus the step count
/// used for bias correction. Moments are kept in `f64` so long runs do not
/// lose small updates to single-precision rounding.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialised state for groups of the given sizes.
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update in place.
///
/// `params` and `grads` must list the same groups, in the same order and
/// with the same lengths, as when `state` was created.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState,
    params: &mut [&mut [T]],
    grads: &[&[T]],
    hp: &AdamParams,
) -> Result<(), MilError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(MilError::OptimizerMismatch(format!(
            "expected {} parameter groups, got {} params / {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (g, (p, m)) in grads.iter().zip(params.iter().zip(&state.m)) {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(MilError::OptimizerMismatch(format!(
                "group size changed: state has {}, got {} params / {} grads",
                m.len(),
                p.len(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let delta = hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
            param[i] = param[i] - T::from_f64(delta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_unit_gradient_moves_by_learning_rate() {
        // With g = 1 every step, bias correction makes m_hat = v_hat = 1,
        // so each update is lr / (1 + eps) for any step count.
        let mut state = AdamState::new(&[1]);
        let hp = AdamParams::with_learning_rate(0.1);
        let mut p = [0.0f64];
        let g = [1.0f64];
        adam_step(&mut state, &mut [&mut p], &[&g], &hp).unwrap();
        assert_relative_eq!(p[0], -0.1, epsilon = 1e-6);
        adam_step(&mut state, &mut [&mut p], &[&g], &hp).unwrap();
        assert_relative_eq!(p[0], -0.2, epsilon = 1e-6);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn update_direction_opposes_gradient() {
        let mut state = AdamState::new(&[2]);
        let hp = AdamParams::default();
        let mut p = [1.0f32, 1.0];
        let g = [0.5f32, -0.5];
        adam_step(&mut state, &mut [&mut p], &[&g], &hp).unwrap();
        assert!(p[0] < 1.0);
        assert!(p[1] > 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut state = AdamState::new(&[3]);
        let hp = AdamParams::default();
        let mut p = [1.0f64, -2.0, 3.0];
        let g = [0.0f64; 3];
        adam_step(&mut state, &mut [&mut p], &[&g], &hp).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn layout_drift_is_rejected() {
        let mut state = AdamState::new(&[2, 3]);
        let hp = AdamParams::default();
        let mut a = [0.0f64; 2];
        let ga = [0.1f64; 2];
        // Wrong group count.
        let err = adam_step(&mut state, &mut [&mut a], &[&ga], &hp).unwrap_err();
        assert!(matches!(err, MilError::OptimizerMismatch(_)));
        // Wrong group length.
        let mut b = [0.0f64; 4];
        let gb = [0.1f64; 4];
        let err = adam_step(&mut state, &mut [&mut a, &mut b], &[&ga, &gb], &hp).unwrap_err();
        assert!(matches!(err, MilError::OptimizerMismatch(_)));
        // No partial update happened.
        assert_eq!(state.step_count(), 0);
        assert_eq!(a, [0.0; 2]);
    }

    #[test]
    fn two_parameters_track_a_quadratic_minimum() {
        // Minimise (p0 - 3)^2 + (p1 + 1)^2; Adam should get close.
        let mut state = AdamState::new(&[2]);
        let hp = AdamParams::with_learning_rate(0.05);
        let mut p = [0.0f64, 0.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 3.0), 2.0 * (p[1] + 1.0)];
            adam_step(&mut state, &mut [&mut p], &[&g], &hp).unwrap();
        }
        assert_relative_eq!(p[0], 3.0, epsilon = 1e-3);
        assert_relative_eq!(p[1], -1.0, epsilon = 1e-3);
    }
}
