//! Per-channel batch normalization over (batch, height, width).
//!
//! Forward is read-only on the layer. In train mode it returns the batch
//! statistics inside [`BnCache`]; the caller folds them into the running
//! estimates with [`BatchNorm2d::commit_running_stats`] once the step is done.

use crate::error::{Error, Result};
use crate::tensor::{dot_f64, sum_f64, sum_sq_dev_f64, Tensor};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPSILON: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub epsilon: f32,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    /// Normalized input, NCHW.
    xhat: Vec<f32>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    batch_var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::mismatch(
                "batchnorm input",
                &[s.first().copied().unwrap_or(0), self.channels(), 0, 0],
                s,
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if mode == Mode::Train && b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let data = x.data();

        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        let mut var_unbiased = vec![0f64; c];
        match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut acc = 0f64;
                    for n in 0..b {
                        let start = (n * c + ch) * hw;
                        acc += sum_f64(&data[start..start + hw]);
                    }
                    mean[ch] = acc / count;
                    let mut sq = 0f64;
                    for n in 0..b {
                        let start = (n * c + ch) * hw;
                        sq += sum_sq_dev_f64(&data[start..start + hw], mean[ch]);
                    }
                    var[ch] = sq / count;
                    var_unbiased[ch] = sq / (count - 1.0);
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = self.running_mean.data()[ch] as f64;
                    var[ch] = self.running_var.data()[ch] as f64;
                }
            }
        }
        let eps = self.epsilon as f64;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0f32; data.len()];
        let mut out = vec![0f32; data.len()];
        for n in 0..b {
            for ch in 0..c {
                let start = (n * c + ch) * hw;
                let g = self.gamma.data()[ch];
                let be = self.beta.data()[ch];
                let (m, k) = (mean[ch], inv_std[ch]);
                for ((xh, o), &v) in xhat[start..start + hw]
                    .iter_mut()
                    .zip(&mut out[start..start + hw])
                    .zip(&data[start..start + hw])
                {
                    *xh = ((v as f64 - m) * k) as f32;
                    *o = g * *xh + be;
                }
            }
        }
        let out = Tensor::from_parts(x.shape_obj().clone(), out);
        out.check_finite("batchnorm forward")?;
        Ok((
            out,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        ))
    }

    pub fn backward(&self, grad: &Tensor, cache: &BnCache) -> Result<BnGrads> {
        let s = grad.shape();
        if s.len() != 4 || s[1] != self.channels() || grad.numel() != cache.xhat.len() {
            return Err(Error::mismatch(
                "batchnorm grad",
                &[0, self.channels(), 0, 0],
                s,
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let count = (b * hw) as f64;
        let g = grad.data();

        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for n in 0..b {
            for ch in 0..c {
                let start = (n * c + ch) * hw;
                dbeta[ch] += sum_f64(&g[start..start + hw]);
                dgamma[ch] += dot_f64(&g[start..start + hw], &cache.xhat[start..start + hw]);
            }
        }

        let mut dx = vec![0f32; g.len()];
        for ch in 0..c {
            let gamma = self.gamma.data()[ch] as f64;
            let inv_std = cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
                    let k = gamma * inv_std / count;
                    for n in 0..b {
                        let start = (n * c + ch) * hw;
                        let (sb, sg) = (dbeta[ch], dgamma[ch]);
                        for ((d, &gi), &xh) in dx[start..start + hw]
                            .iter_mut()
                            .zip(&g[start..start + hw])
                            .zip(&cache.xhat[start..start + hw])
                        {
                            *d = (k * (count * gi as f64 - sb - xh as f64 * sg)) as f32;
                        }
                    }
                }
                Mode::Eval => {
                    for n in 0..b {
                        let start = (n * c + ch) * hw;
                        for i in start..start + hw {
                            dx[i] = (gamma * inv_std * g[i] as f64) as f32;
                        }
                    }
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::from_parts(grad.shape_obj().clone(), dx),
            gamma: Tensor::from_parts(
                self.gamma.shape_obj().clone(),
                dgamma.into_iter().map(|v| v as f32).collect(),
            ),
            beta: Tensor::from_parts(
                self.beta.shape_obj().clone(),
                dbeta.into_iter().map(|v| v as f32).collect(),
            ),
        })
    }

    /// Exponential moving average update from a train-mode forward pass.
    /// Eval-mode caches are ignored.
    pub fn commit_running_stats(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum as f64;
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = ((1.0 - m) * *rm as f64 + m * cache.batch_mean[ch]) as f32;
            let rv = &mut self.running_var.data_mut()[ch];
            let updated = ((1.0 - m) * *rv as f64 + m * cache.batch_var_unbiased[ch]) as f32;
            *rv = updated.max(f32::MIN_POSITIVE);
        }
    }
}
