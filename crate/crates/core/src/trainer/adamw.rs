//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use linesight_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::model::params::ModelParameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// First/second moments for the trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new<'a>(params: &ModelParameters, trainable: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for name in trainable {
            let n = params.get(name)?.numel();
            moments.insert(
                name.to_string(),
                Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                },
            );
        }
        Ok(OptimizerState { step: 0, moments })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One AdamW update of every tracked parameter. A tracked parameter without
/// a gradient is treated as having a zero gradient. Gradients for untracked
/// (frozen) parameters are rejected, as are non-finite gradients; in both
/// cases nothing is modified.
pub fn adamw_step(
    params: &mut ModelParameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !state.tracks(name) {
            return Err(Error::Input(format!(
                "gradient supplied for untracked parameter {name}"
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, m) in state.moments.iter_mut() {
        let current = params.get(name)?;
        let mut w = current.to_vec();
        let grad = grads.get(name);
        for i in 0..w.len() {
            let g = grad.map_or(0.0, |t| t.data()[i]);
            w[i] *= decay;
            m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g;
            m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m.first[i] / bc1;
            let vhat = m.second[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        let updated = Tensor::new(current.dims(), w)?;
        params.set(name, updated)?;
    }
    Ok(())
}
