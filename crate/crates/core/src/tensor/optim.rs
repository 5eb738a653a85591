use std::collections::HashMap;

use super::{ParamId, Real, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or ±inf; no parameter or moment was touched.
    SkippedNonFinite,
}

/// Adam with bias correction. Moments are keyed by parameter identity.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    steps: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that holds a gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<StepOutcome>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        let params: Vec<&'a mut Tensor<T>> = params.into_iter().collect();
        for p in &params {
            if let Some((m, _)) = self.moments.get(&p.id()) {
                if m.len() != p.numel() {
                    return dim_err(format!(
                        "optimizer state of length {} for parameter of shape {:?}",
                        m.len(),
                        p.shape()
                    ));
                }
            }
        }
        let finite = params
            .iter()
            .filter_map(|p| p.grad())
            .all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            log::warn!("non-finite gradient; optimizer step skipped");
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for p in params {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
