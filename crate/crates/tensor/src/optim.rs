use std::collections::BTreeMap;

use crate::error::{config, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction and exponential per-epoch learning-rate decay.
/// State is keyed by parameter name so it survives checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(config(
                "adam",
                format!("learning rate {} must be positive", cfg.lr),
            ));
        }
        if !(cfg.decay > 0.0 && cfg.decay <= 1.0) {
            return Err(config(
                "adam",
                format!("decay {} outside (0, 1]", cfg.decay),
            ));
        }
        Ok(Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.cfg.lr * self.cfg.decay.powi(epoch as i32)
    }

    /// One update of every parameter that currently holds a gradient.
    /// Gradients are consumed.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], epoch: usize) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let lr = self.lr_at(epoch);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for set in sets.iter_mut() {
            for (name, p) in set.iter_mut() {
                let Some(g) = p.take_grad() else { continue };
                let st = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                for (((w, &gi), m), v) in p
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .zip(&mut st.m)
                    .zip(&mut st.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Rebuilds an optimizer from persisted state.
    pub fn restore(cfg: AdamConfig, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        let mut a = Self::new(cfg)?;
        a.step = step;
        a.moments = moments;
        Ok(a)
    }
}
