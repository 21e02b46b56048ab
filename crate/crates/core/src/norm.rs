//! Batch normalization over the channel axis.

use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running statistics.
    Train,
    /// Normalize with the frozen running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
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
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `(outer, channels, inner)` factorization of a tensor for the given layout.
pub(crate) fn channel_split(shape: &[usize], layout: Layout) -> Result<(usize, usize, usize)> {
    match (layout, shape) {
        (Layout::Image, [t, b, c, h, w]) => Ok((t * b, *c, h * w)),
        (Layout::Token, [t, b, n, d]) => Ok((t * b * n, *d, 1)),
        _ => Err(Error::shape(format!(
            "{layout:?} batch norm cannot interpret shape {shape:?}"
        ))),
    }
}

pub(crate) struct BnBatch {
    pub out: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn bn_train_forward(
    x: &[f64],
    dims: (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> BnBatch {
    let (outer, c, inner) = dims;
    let n = (outer * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            *m += x[base..base + inner].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let mu = mean[ch];
            var[ch] += x[base..base + inner]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnBatch {
        out,
        mean,
        var,
        xhat,
        inv_std,
    }
}

pub(crate) fn bn_infer_forward(
    x: &[f64],
    dims: (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = dims;
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let xh = (x[i] - running_mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects whether the mean and
/// variance depended on `x`.
pub(crate) fn bn_backward(
    grad: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: (usize, usize, usize),
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = dims;
    let n = (outer * inner) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                dgamma[ch] += grad[i] * xhat[i];
                dbeta[ch] += grad[i];
            }
        }
    }
    let mut dx = vec![0.0; grad.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let k = gamma[ch] * inv_std[ch];
            for i in base..base + inner {
                dx[i] = if batch_stats {
                    k * (grad[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                } else {
                    k * grad[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Blends batch statistics into the running estimates. The running variance
/// tracks the unbiased estimate.
pub(crate) fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch] * unbias;
    }
}

/// Normalizes `x` per channel. Train mode also updates the running statistics.
pub fn bn_forward(
    x: &Tensor,
    params: &mut BatchNormParams,
    mode: Mode,
    layout: Layout,
) -> Result<Tensor> {
    let dims = channel_split(x.shape(), layout)?;
    if dims.1 != params.channels() {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input has {}",
            params.channels(),
            dims.1
        )));
    }
    x.check_finite("batch norm input")?;
    let out = match mode {
        Mode::Train => {
            let count = dims.0 * dims.2;
            if count == 0 {
                return Err(Error::InvalidValue(
                    "batch norm in train mode needs a non-empty batch".into(),
                ));
            }
            let r = bn_train_forward(x.data(), dims, &params.gamma, &params.beta, params.eps);
            update_running(
                &mut params.running_mean,
                &mut params.running_var,
                &r.mean,
                &r.var,
                count,
                params.momentum,
            );
            r.out
        }
        Mode::Infer => {
            bn_infer_forward(
                x.data(),
                dims,
                &params.gamma,
                &params.beta,
                &params.running_mean,
                &params.running_var,
                params.eps,
            )
            .0
        }
    };
    Tensor::new(x.shape().to_vec(), out)
}
