use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::msfnet::NetParams;

/// lr0 · ½ · (1 + cos(π · epoch / total)).
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Adam coefficients {self:?}")))
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut NetParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            check_shape(name, p, g)?;
        }
        self.apply(params.iter_mut(), grads, lr);
        Ok(())
    }

    /// [`Adam::step`] over a plain map of named tensors.
    pub fn step_tensors(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            check_shape(name, p, g)?;
        }
        self.apply(params.iter_mut(), grads, lr);
        Ok(())
    }

    fn apply<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

fn check_shape(name: &str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "{name}: parameter {:?} vs gradient {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}
