use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(NumericsError::Invalid(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Adaptive-moment optimizer with bias correction. Moment buffers are created
/// for exactly the tensors passed to [`Adam::new`], in that order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor<f32>]) -> Result<Self, NumericsError> {
        config.validate()?;
        let first = params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        let second = first.clone();
        Ok(Self { config, step_count: 0, first, second })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }

    /// Applies one update; clips `grads` in place first when clipping is on.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &mut [Vec<f32>]) -> Result<f32, NumericsError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NumericsError::Invalid(format!(
                "optimizer holds {} parameters, got {} tensors and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(NumericsError::Invalid(format!("parameter {i} changed size")));
            }
        }
        let norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        if !norm.is_finite() {
            return Err(NumericsError::NonFinite { op: "adam" });
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon, .. } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
            if !p.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam" });
            }
        }
        Ok(norm)
    }
}

pub fn global_norm(grads: &[Vec<f32>]) -> f32 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
