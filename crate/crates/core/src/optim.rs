//! Adam optimizer with per-parameter bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidParam(format!("adam lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParam(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidParam("adam eps must be positive".into()));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: vec![0; params.len()],
        })
    }

    /// Applies one update. A `None` gradient leaves the corresponding
    /// parameter (and its moment state) untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: got {} params / {} grads, expected {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            if g.shape() != param.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adam: grad shape {:?} vs param shape {:?} at index {i}",
                    g.shape(),
                    param.shape()
                )));
            }
            self.t[i] += 1;
            let t = self.t[i];
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let pd = param.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
