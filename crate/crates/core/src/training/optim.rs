use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor};

use crate::nn::ParamStore;

/// Adam with bias correction, optional L2 weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64, grad_clip: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments by parameter name.
    pub fn moments(&self) -> (&HashMap<String, Tensor>, &HashMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: HashMap<String, Tensor>, v: HashMap<String, Tensor>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g
                    .to_dtype(candle_core::DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Apply one update with learning rate `lr`. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let scale = if self.grad_clip > 0.0 {
            let norm = Self::grad_norm(params, grads)?;
            if norm > self.grad_clip {
                self.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor().detach();
            let mut g = g.detach().affine(scale, 0.0)?;
            if self.weight_decay > 0.0 {
                g = (g + theta.affine(self.weight_decay, 0.0)?)?;
            }
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?;
            let update = m.affine(lr / c1, 0.0)?.div(&denom)?;
            var.set(&(theta - update)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }
}
