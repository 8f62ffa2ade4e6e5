//! Adam and momentum SGD over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// `lr₀ · 0.5^⌊epoch / halve_every⌋`
pub fn learning_rate(base: f32, halve_every: u32, epoch: u32) -> f32 {
    if halve_every == 0 {
        return base;
    }
    base * 0.5f32.powi((epoch / halve_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// SGD momentum coefficient; unused by Adam.
    pub momentum: f32,
    /// Number of updates applied so far.
    pub steps: u64,
    /// Adam first moments, or SGD velocity.
    pub first: Vec<Tensor>,
    /// Adam second moments; empty for SGD.
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f32, shapes: &[&[usize]]) -> Result<Self> {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Result<Vec<_>>>();
        Ok(Optimizer {
            kind,
            momentum,
            steps: 0,
            first: zeros()?,
            second: if kind == OptimizerKind::Adam { zeros()? } else { Vec::new() },
        })
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::mismatch(
                "optimizer state",
                &[self.first.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::mismatch("optimizer parameter", p.shape(), g.shape()));
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = (1.0 - ADAM_BETA1.powi(t)) as f32;
                let bc2 = (1.0 - ADAM_BETA2.powi(t)) as f32;
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = self.momentum;
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.first) {
                    let buf = buf.data_mut();
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        buf[i] = mu * buf[i] + gi;
                        *w -= lr * buf[i];
                    }
                }
            }
        }
        Ok(())
    }
}
