//! SGD with classical momentum and stepped learning-rate decay:
//! v ← μ·v − η·∇, p ← p + v.

use crate::config::OptimConfig;
use crate::error::{HarnessError, Result};
use std::collections::BTreeMap;
use triplet_core::Tensor;

#[derive(Debug)]
pub struct Sgd {
    cfg: OptimConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Self {
        Sgd { cfg, velocity: BTreeMap::new() }
    }

    /// Learning rate after stepped decay: η·factor^(epoch / period).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.cfg.lr * self.cfg.decay_factor.powi((epoch / self.cfg.decay_every) as i32)
    }

    /// Applies one update to every visited parameter. Parameters without an
    /// entry in `grads` (detached from the loss) are left untouched; their
    /// velocity still decays so a later gradient does not inherit stale
    /// momentum at full strength.
    pub fn step(
        &mut self,
        epoch: usize,
        grads: &BTreeMap<String, Vec<f64>>,
        visit: &mut dyn FnMut(&mut dyn FnMut(String, &mut Tensor)),
    ) -> Result<()> {
        let lr = self.lr_at(epoch);
        let mu = self.cfg.momentum;
        let mut err = None;
        visit(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; t.len()]);
            if vel.len() != t.len() {
                err = Some(HarnessError::config(format!(
                    "optimizer state for {} has length {}, parameter has {}",
                    name,
                    vel.len(),
                    t.len()
                )));
                return;
            }
            match grads.get(&name) {
                Some(grad) => {
                    for ((v, p), &g) in vel.iter_mut().zip(t.data_mut()).zip(grad) {
                        *v = mu * *v - lr * g;
                        *p += *v;
                    }
                }
                None => {
                    for (v, p) in vel.iter_mut().zip(t.data_mut()) {
                        *v *= mu;
                        *p += *v;
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
