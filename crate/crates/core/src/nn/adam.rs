use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::arch::PnnParams;
use super::model::Gradients;
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut PnnParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let n = params.values.len();
    if grads.0.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {n} parameters, {} gradients, {} moments",
            grads.0.len(),
            state.first_moment.len()
        )));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let correction1 = 1.0 - libm::pow(beta1, t);
    let correction2 = 1.0 - libm::pow(beta2, t);

    for (((theta, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *theta -= learning_rate * m_hat / (math::sqrt(v_hat) + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture};

    fn params() -> PnnParams {
        init_params(&Architecture::new(2, vec![2], vec![2]).unwrap(), 1).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = params();
        let before = p.values.clone();
        let zero = Gradients::zeros(p.len());
        let mut state = OptimizerState::new(AdamConfig::default(), p.len());
        state.first_moment.fill(0.5);
        state.second_moment.fill(0.25);
        // A zero gradient with nonzero history still moves; with empty
        // history it must not.
        let mut fresh = OptimizerState::new(AdamConfig::default(), p.len());
        adam_step(&mut p, &zero, &mut fresh).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(fresh.step, 1);

        adam_step(&mut p, &zero, &mut state).unwrap();
        assert!(state.first_moment.iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert!(state.second_moment.iter().all(|&v| (v - 0.24975).abs() < 1e-15));
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        // t = 1: m = (1−β1)g, v = (1−β2)g², m̂ = g, v̂ = g², Δ = −λ·g/(|g|+ε).
        let mut p = params();
        let before = p.values.clone();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 - 10.0) * 0.37 + 0.01).collect();
        let mut state = OptimizerState::new(AdamConfig::default(), p.len());
        adam_step(&mut p, &Gradients(g.clone()), &mut state).unwrap();
        for ((after, before), g) in p.values.iter().zip(&before).zip(&g) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((after - before - expected).abs() < 1e-15);
            assert!(((after - before).abs() - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut p = params();
        let mut state = OptimizerState::new(AdamConfig::default(), p.len());
        let g = Gradients((0..p.len()).map(|i| if i % 2 == 0 { 3.0 } else { -0.02 }).collect());
        let mut last = p.values.clone();
        for _ in 0..2000 {
            adam_step(&mut p, &g, &mut state).unwrap();
            for ((now, prev), gi) in p.values.iter().zip(&last).zip(&g.0) {
                let step = now - prev;
                assert!((step.abs() - 1e-3).abs() < 1e-6);
                assert_eq!(step.signum(), -gi.signum());
            }
            last = p.values.clone();
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let mut state = OptimizerState::new(AdamConfig::default(), p.len());
        assert!(adam_step(&mut p, &Gradients::zeros(3), &mut state).is_err());
    }
}
