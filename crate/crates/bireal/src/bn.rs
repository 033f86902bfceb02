//! Per-channel batch normalization over [N, C, H, W] feature maps.
//!
//! Normalization uses biased batch variance; running statistics accumulate
//! the same biased quantities so train-time and eval-time statistics agree
//! in expectation. Running statistics are updated by the caller (via
//! [`apply_running_update`]), never as a side effect of the forward pass,
//! which keeps the forward pure for gradient checking.

use crate::error::{Error, Result};
use crate::tensor::{snap_f32, RealTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Everything the backward pass and the running-stat update need.
pub struct BnCache {
    pub xhat: RealTensor,
    /// 1 / sqrt(var + eps) per channel, from the statistics used forward.
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

pub fn batchnorm_forward(
    x: &RealTensor,
    p: &BatchNormParams,
    train: bool,
) -> Result<(RealTensor, BnCache)> {
    let (n, c, h, w) = x.dims4()?;
    if c != p.channels() {
        return Err(Error::ShapeMismatch {
            context: "batchnorm_forward",
            axis: "channels",
            expected: p.channels(),
            got: c,
        });
    }
    let m = (n * h * w) as f64;
    let plane = h * w;
    let xd = x.data();

    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    acc += xd[base + i];
                }
            }
            mean[ci] = acc / m;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    let d = xd[base + i] - mean[ci];
                    sq += d * d;
                }
            }
            var[ci] = sq / m;
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = RealTensor::zeros(x.shape());
    let mut out = RealTensor::zeros(x.shape());
    {
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    let xn = (xd[base + i] - mean[ci]) * inv_std[ci];
                    xh[base + i] = xn;
                    od[base + i] = p.gamma[ci] * xn + p.beta[ci];
                }
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        batch_mean: if train { mean } else { Vec::new() },
        batch_var: if train { var } else { Vec::new() },
        train,
    };
    Ok((out, cache))
}

/// Returns (grad_x, grad_gamma, grad_beta). In train mode the input gradient
/// carries the batch-coupling terms from differentiating through the batch
/// statistics; in eval mode the statistics are constants and the transform is
/// a per-channel affine map.
pub fn batchnorm_backward(
    grad_out: &RealTensor,
    cache: &BnCache,
    p: &BatchNormParams,
) -> Result<(RealTensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch {
            context: "batchnorm_backward",
            axis: "grad_out numel",
            expected: cache.xhat.numel(),
            got: grad_out.numel(),
        });
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let gd = grad_out.data();
    let xh = cache.xhat.data();

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for ci in 0..c {
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                grad_beta[ci] += gd[base + i];
                grad_gamma[ci] += gd[base + i] * xh[base + i];
            }
        }
    }

    let mut grad_x = RealTensor::zeros(grad_out.shape());
    let gx = grad_x.data_mut();
    if cache.train {
        for ci in 0..c {
            let scale = p.gamma[ci] * cache.inv_std[ci];
            let mean_g = grad_beta[ci] / m;
            let mean_gx = grad_gamma[ci] / m;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    gx[base + i] = scale * (gd[base + i] - mean_g - xh[base + i] * mean_gx);
                }
            }
        }
    } else {
        for ci in 0..c {
            let scale = p.gamma[ci] * cache.inv_std[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    gx[base + i] = scale * gd[base + i];
                }
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Fold a train-mode forward's batch statistics into the running estimates:
/// r <- (1 - momentum) * r + momentum * batch. No-op for eval caches.
pub fn apply_running_update(p: &mut BatchNormParams, cache: &BnCache) {
    if !cache.train {
        return;
    }
    for ci in 0..p.channels() {
        p.running_mean[ci] =
            snap_f32((1.0 - p.momentum) * p.running_mean[ci] + p.momentum * cache.batch_mean[ci]);
        p.running_var[ci] =
            snap_f32((1.0 - p.momentum) * p.running_var[ci] + p.momentum * cache.batch_var[ci]);
    }
}
