use serde::{Deserialize, Serialize};

use super::tape::Op;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    #[default]
    Training,
    Inference,
}

/// Per-channel batch normalisation over `(N, T, H, W)` of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    /// False until the running statistics have been written at least once.
    pub stats_ready: bool,
}

/// Batch mean and biased variance per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: BnMode::Training,
            stats_ready: false,
        }
    }

    /// Same as [`BatchNormState::new`] with `gamma` initialised to zero.
    pub fn zero_gamma(channels: usize) -> Self {
        let mut s = Self::new(channels);
        s.gamma = Tensor::zeros(&[channels]);
        s
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        let c = self.channels();
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::dim("set_running_stats", mean.shape(), &[c]));
        }
        if var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("running variance must be non-negative".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.stats_ready = true;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BnVars {
        BnVars {
            gamma: tape.leaf(self.gamma.clone()),
            beta: tape.leaf(self.beta.clone()),
        }
    }

    /// Normalises `x` according to `self.mode`. Training mode also folds the
    /// batch statistics into the running estimates.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, vars: BnVars) -> Result<Var> {
        match self.mode {
            BnMode::Training => {
                let (y, stats) = batch_norm_train(tape, x, vars, self.eps)?;
                self.update_running(&stats);
                Ok(y)
            }
            BnMode::Inference => {
                if !self.stats_ready {
                    return Err(Error::UninitializedStats);
                }
                batch_norm_infer(
                    tape,
                    x,
                    vars,
                    self.running_mean.data(),
                    self.running_var.data(),
                    self.eps,
                )
            }
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        self.stats_ready = true;
    }
}

fn check_channels(tape: &Tape, x: Var, vars: BnVars) -> Result<[usize; 5]> {
    let d = tape.value(x).clip_dims()?;
    let c = d[2];
    if tape.shape(vars.gamma) != [c] || tape.shape(vars.beta) != [c] {
        return Err(Error::dim("batch_norm", tape.shape(x), tape.shape(vars.gamma)));
    }
    Ok(d)
}

/// Batch statistics of a clip per channel.
pub fn channel_stats(x: &Tensor) -> Result<BatchStats> {
    let [n, t, c, h, w] = x.clip_dims()?;
    let p = h * w;
    let count = n * t * p;
    let mut mean = vec![0.0; c];
    for (idx, plane) in x.data().chunks(p).enumerate() {
        mean[idx % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    let mut var = vec![0.0; c];
    for (idx, plane) in x.data().chunks(p).enumerate() {
        let mu = mean[idx % c];
        var[idx % c] += plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok(BatchStats { mean, var, count })
}

fn normalize(
    tape: &mut Tape,
    x: Var,
    vars: BnVars,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    training: bool,
) -> Result<Var> {
    let [_, _, c, h, w] = check_channels(tape, x, vars)?;
    let p = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xv = tape.value(x).data();
    let gamma = tape.value(vars.gamma).data();
    let beta = tape.value(vars.beta).data();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for (idx, ((xp, hp), op)) in xv
        .chunks(p)
        .zip(xhat.chunks_mut(p))
        .zip(out.chunks_mut(p))
        .enumerate()
    {
        let ci = idx % c;
        for ((&xi, hi), oi) in xp.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
            *hi = (xi - mean[ci]) * inv_std[ci];
            *oi = gamma[ci] * *hi + beta[ci];
        }
    }
    let value = Tensor::from_parts(tape.shape(x).to_vec(), out);
    Ok(tape.push(
        value,
        Op::BatchNorm {
            x,
            gamma: vars.gamma,
            beta: vars.beta,
            xhat,
            inv_std,
            training,
        },
        &[x, vars.gamma, vars.beta],
    ))
}

/// Normalises with the batch's own statistics; gradients flow through them.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: Var,
    vars: BnVars,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    check_channels(tape, x, vars)?;
    let stats = channel_stats(tape.value(x))?;
    let y = normalize(tape, x, vars, &stats.mean, &stats.var, eps, true)?;
    Ok((y, stats))
}

/// Normalises with fixed statistics.
pub fn batch_norm_infer(
    tape: &mut Tape,
    x: Var,
    vars: BnVars,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Var> {
    normalize(tape, x, vars, mean, var, eps, false)
}
