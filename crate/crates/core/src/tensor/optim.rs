//! AdamW: Adam with decoupled weight decay.

use crate::error::{CafoError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state: first/second moment per parameter tensor plus a step counter.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameter tensors, in place. The gradient slice
    /// must align with the parameter slice; missing gradients are treated as
    /// zero (moments still decay, matching an all-zero gradient step).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(CafoError::ShapeMismatch {
                op: "AdamW::step",
                detail: format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let zero;
            let gd: &[f64] = match g {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(CafoError::ShapeMismatch {
                            op: "AdamW::step",
                            detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                        });
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; p.len()];
                    &zero
                }
            };
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                md[i] = self.cfg.beta1 * md[i] + (1.0 - self.cfg.beta1) * gd[i];
                vd[i] = self.cfg.beta2 * vd[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.cfg.lr * self.cfg.weight_decay * pd[i];
                pd[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
