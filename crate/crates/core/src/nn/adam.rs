use super::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment accumulators, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

/// Adaptive-moment gradient descent with bias correction and a constant rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        let zeros = || param_lens.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        Self { config, state: AdamState { step: 0, first: zeros(), second: zeros() } }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), self.state.first.len(), "parameter group count changed");
        assert_eq!(params.len(), grads.len());
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let step_size = T::from_f64_lossy(c.learning_rate / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.epsilon);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            assert_eq!(p.len(), g.len());
            assert_eq!(p.len(), m.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                p[j] = p[j] - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}
