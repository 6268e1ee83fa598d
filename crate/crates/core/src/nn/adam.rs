use serde::{Deserialize, Serialize};

use crate::error::{FmgpError, Result};

/// Adam optimiser over a flat parameter vector, with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }

    /// One descent step on `params` using `grads` of the loss.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(FmgpError::shape(format!(
                "adam state holds {n} parameters, got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for k in 0..n {
            let g = grads[k];
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            params[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
