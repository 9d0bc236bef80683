//! Adam optimizer and global gradient-norm clipping.

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are keyed by parameter
/// position, so the caller must pass the same parameter list, in the same
/// order, on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's accumulated gradient. Tensors
    /// whose gradient is absent are treated as having a zero gradient
    /// (their moments still decay). The step counter advances regardless,
    /// so a zero gradient changes optimizer state but not parameters.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::BadConfig {
                detail: format!(
                    "optimizer has {} slots but was given {} parameters",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if self.m[idx].len() != p.len() {
                return Err(Error::BadConfig {
                    detail: format!(
                        "parameter {} changed length: {} vs {}",
                        idx,
                        p.len(),
                        self.m[idx].len()
                    ),
                });
            }
            let zero = vec![0.0; p.len()];
            let taken = p.grad.take();
            let grad = taken.as_deref().unwrap_or(&zero);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = p.data_mut();
            for (j, &g) in grad.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.grad = taken;
        }
        Ok(())
    }
}

/// Rescales every gradient so their joint L2 norm is at most `max_norm`,
/// returning the norm measured before clipping. Gradients at or below the
/// threshold are untouched.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let mut total = 0.0;
    for p in params.iter() {
        if let Some(g) = &p.grad {
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
