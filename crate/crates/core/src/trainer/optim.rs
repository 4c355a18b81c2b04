use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;
use crate::tensor::{Gradients, ParamId};

/// `lr₀ · decay^epoch`, epochs counted from 0.
pub fn learning_rate(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}

/// Dense copy of the parameter gradients from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl GradientSet {
    /// Errors if any gradient entry is NaN or infinite.
    pub fn from_gradients(grads: &Gradients) -> Result<Self, TrainError> {
        let mut entries = Vec::new();
        for (id, g) in grads.params() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: id });
            }
            entries.push((id, g.data().to_vec()));
        }
        Ok(Self { entries })
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if max_norm > 0.0 && norm > max_norm {
            let scale = max_norm / norm;
            for (_, g) in &mut self.entries {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &GradientSet, lr: f64);
}

/// `θ ← θ − lr · g`
#[derive(Debug, Clone, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &GradientSet, lr: f64) {
        for (id, g) in &grads.entries {
            for (p, d) in params.get_mut(*id).data_mut().iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    steps: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: Vec::new(), steps: 0 }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &GradientSet, lr: f64) {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (id, g) in &grads.entries {
            let (m, v) = self.moments[*id].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in params.get_mut(*id).data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build(self) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd),
            OptimizerKind::Adam => Box::new(Adam::default()),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(TrainError::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}
