//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::config::{OptimConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(ps: &ParamStore<T>, cfg: OptimConfig) -> Self {
        let zeros: Vec<Vec<T>> = ps.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            cfg,
            step: 0,
        }
    }

    /// One update. Parameters without a gradient are left alone. A
    /// non-finite gradient aborts before anything is modified.
    pub fn update(&mut self, ps: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != ps.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), ps.len())));
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", ps.name(id))));
                }
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let step = T::from_f64(lr / bc1);
        let rbc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = ps.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + nb1 * gi;
                v[i] = b2 * v[i] + nb2 * gi * gi;
                p[i] = p[i] * decay - step * m[i] / (v[i].sqrt() * rbc2 + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay reaching `min_lr` at the
/// final epoch.
pub fn lr_at(epoch: usize, s: &ScheduleConfig) -> f64 {
    let w = s.warmup_epochs();
    if epoch < w {
        return s.lr * epoch as f64 / w as f64;
    }
    let span = s.epochs.saturating_sub(1).saturating_sub(w);
    let t = if span == 0 {
        1.0
    } else {
        ((epoch - w) as f64 / span as f64).min(1.0)
    };
    s.min_lr + (s.lr - s.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
