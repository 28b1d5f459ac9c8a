use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyper-parameters with a linear learning-rate decay to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are shaped like the
/// parameters they track.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[&Tensor]) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate applied at (0-based) step `t`: `lr * (1 - t / total)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let total = self.cfg.total_steps.max(1) as f64;
        self.cfg.lr * (1.0 - (t as f64 / total).min(1.0))
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if self.step >= self.cfg.total_steps {
            return Err(Error::Contract(format!(
                "AdamW stepped past its schedule ({} steps)",
                self.cfg.total_steps
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} moments, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("param {i}: {:?} / grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j];
                pd[j] -= lr * weight_decay * pd[j];
                md[j] = beta1 * md[j] + (1.0 - beta1) * gj;
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
