use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut count = 0;
        for (i, p) in params.enumerate() {
            let g = grads.get(i).ok_or_else(|| Error::config("fewer gradients than parameters"))?;
            p.expect_same_shape(g, "adam")?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::config("more gradients than parameters"));
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        for (p, g) in params.zip(grads) {
            p.expect_same_shape(g, "sgd")?;
            for (w, g) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.update(params, grads),
            Optimizer::Sgd(s) => s.update(params, grads),
        }
    }
}
