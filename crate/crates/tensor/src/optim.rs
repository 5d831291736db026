use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{invalid, Result, TensorError};
use crate::store::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam with decoupled weight decay.
///
/// Step counts are kept per parameter, so a parameter that only sometimes
/// receives a gradient (an expert that was not routed to) gets the bias
/// correction of the updates it actually saw.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient. Parameters
    /// without one are left bit-identical. Returns how many were updated.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<usize> {
        let ids: Vec<_> = store
            .trainable()
            .into_iter()
            .filter(|&id| grads.param(id).is_some())
            .collect();
        self.step_params(store, grads, &ids, lr)?;
        Ok(ids.len())
    }

    /// Updates exactly `ids`; each must have a gradient.
    pub fn step_params(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        ids: &[ParamId],
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid("adamw", format!("learning rate {lr}")));
        }
        for &id in ids {
            if grads.param(id).is_none() {
                return Err(TensorError::MissingGrad(store.name(id).to_string()));
            }
        }
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        for &id in ids {
            let g = grads.param(id).expect("checked above");
            let n = g.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let c1 = 1.0 - beta1.powi(st.step as i32);
            let c2 = 1.0 - beta2.powi(st.step as i32);
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                p[i] = p[i] * (1.0 - lr * weight_decay) - lr * mhat / (vhat.sqrt() + eps);
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) {
        self.state.insert(id, moments);
    }

    pub fn state(&self) -> impl Iterator<Item = (ParamId, &Moments)> {
        self.state.iter().map(|(&id, m)| (id, m))
    }
}

/// Linear warm-up to `max_lr`, then half-cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub max_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl WarmupCosine {
    pub fn new(max_lr: f64, warmup_epochs: f64, total_epochs: f64) -> Result<Self> {
        if !(max_lr > 0.0 && warmup_epochs >= 0.0 && total_epochs > warmup_epochs) {
            return Err(invalid(
                "lr_schedule",
                format!("need max_lr > 0 and 0 <= warmup < total, got {max_lr}, {warmup_epochs}, {total_epochs}"),
            ));
        }
        Ok(Self {
            max_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    /// Learning rate at a (possibly fractional) epoch in `[0, total)`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..self.total_epochs).contains(&epoch) {
            return Err(invalid(
                "lr_schedule",
                format!("epoch {epoch} outside [0, {})", self.total_epochs),
            ));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.max_lr * epoch / self.warmup_epochs);
        }
        let progress = (epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs);
        Ok(0.5 * self.max_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
