use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    Training,
    Inference,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: BatchNormMode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: BatchNormMode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Momentum update of the running statistics from one batch's biased
    /// mean/variance over `n` values per channel. The running variance takes
    /// the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Biased per-channel batch statistics over `count` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Saved forward quantities for the backward rule.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub invstd: Vec<f64>,
    pub training: bool,
}

fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::shape(format!(
            "batchnorm over {channels} channels got input {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

pub(crate) fn batch_stats(x: &Tensor, channels: usize) -> Result<BatchStats> {
    let (b, inner) = layout(x, channels)?;
    let n = (b * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for bi in 0..b {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.data()[(bi * channels + c) * inner..][..inner]
                .iter()
                .sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for c in 0..channels {
            let mu = mean[c];
            var[c] += x.data()[(bi * channels + c) * inner..][..inner]
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(BatchStats {
        mean,
        var,
        count: b * inner,
    })
}

/// Normalizes with the given statistics and applies the affine map.
pub(crate) fn bn_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    training: bool,
) -> Result<(Tensor, BnSaved)> {
    let channels = gamma.len();
    if beta.len() != channels || mean.len() != channels || var.len() != channels {
        return Err(Error::shape("batchnorm parameter lengths disagree"));
    }
    let (b, inner) = layout(x, channels)?;
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for c in 0..channels {
            let off = (bi * channels + c) * inner;
            let (g, be, mu, is) = (gamma.data()[c], beta.data()[c], mean[c], invstd[c]);
            for i in off..off + inner {
                let h = (x.data()[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnSaved {
            xhat,
            invstd,
            training,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub(crate) fn bn_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
) -> Result<(Tensor, Tensor, Tensor)> {
    let channels = gamma.len();
    let (b, inner) = layout(grad_out, channels)?;
    let n = (b * inner) as f64;
    let go = grad_out.data();
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for bi in 0..b {
        for c in 0..channels {
            let off = (bi * channels + c) * inner;
            for (g, x) in go[off..off + inner].iter().zip(&saved.xhat[off..off + inner]) {
                sum_g[c] += g;
                sum_gx[c] += g * x;
            }
        }
    }
    let mut gin = vec![0.0; go.len()];
    for bi in 0..b {
        for c in 0..channels {
            let off = (bi * channels + c) * inner;
            let k = gamma.data()[c] * saved.invstd[c];
            for i in off..off + inner {
                gin[i] = if saved.training {
                    k * (go[i] - sum_g[c] / n - saved.xhat[i] * sum_gx[c] / n)
                } else {
                    k * go[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gin)?,
        Tensor::new([channels], sum_gx)?,
        Tensor::new([channels], sum_g)?,
    ))
}

/// Batch normalization over axis 1. Training mode normalizes with batch
/// statistics and folds them into the running statistics; inference mode
/// uses the running statistics.
pub fn batchnorm(input: &Tensor, state: &mut BatchNormState) -> Result<Tensor> {
    match state.mode {
        BatchNormMode::Training => {
            if input.shape().first().copied().unwrap_or(0) < 2 {
                return Err(Error::invalid(
                    "batchnorm training mode needs a batch of at least 2",
                ));
            }
            let stats = batch_stats(input, state.channels())?;
            let (y, _) = bn_apply(
                input,
                &state.gamma,
                &state.beta,
                &stats.mean,
                &stats.var,
                state.epsilon,
                true,
            )?;
            state.update_running(&stats);
            Ok(y)
        }
        BatchNormMode::Inference => {
            let (y, _) = bn_apply(
                input,
                &state.gamma,
                &state.beta,
                &state.running_mean,
                &state.running_var,
                state.epsilon,
                false,
            )?;
            Ok(y)
        }
    }
}
