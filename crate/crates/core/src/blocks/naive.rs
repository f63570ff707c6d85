//! Untaped composition of the scalar-loop oracles, mirroring
//! [`block_forward`](super::block_forward) and
//! [`network_forward`](super::network_forward) step by step.
//!
//! Batch norm uses batch statistics in training mode and the running
//! estimates in inference mode; running estimates are never updated here.

use super::{BlockParams, ConvBn, Network};
use crate::cme::cme_forward_naive;
use crate::error::{Error, Result};
use crate::reference;
use crate::sme::sme_forward_naive;
use crate::tensor::{BatchNormState, BnMode, Tensor};

fn norm(x: &Tensor, bn: &BatchNormState) -> Result<Tensor> {
    let stats = match bn.mode {
        BnMode::Training => None,
        BnMode::Inference => {
            if !bn.stats_ready {
                return Err(Error::UninitializedStats);
            }
            Some((bn.running_mean.data(), bn.running_var.data()))
        }
    };
    reference::batch_norm(x, bn.gamma.data(), bn.beta.data(), stats, bn.eps)
}

fn conv_bn(x: &Tensor, c: &ConvBn, stride: usize) -> Result<Tensor> {
    let y = if c.is_3x3() {
        reference::conv2d_3x3(x, &c.w, stride)?
    } else {
        let xs = reference::subsample_spatial(x, stride)?;
        reference::pointwise_linear(&xs, &c.w, None)?
    };
    norm(&y, &c.bn)
}

pub fn block_forward_naive(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let mut h = x.clone();
    if let Some(c) = &p.cme {
        h = cme_forward_naive(&h, c)?;
    }
    if let Some(t) = &p.tim {
        h = reference::temporal_conv(&h, &t.wt)?;
    }
    let h = reference::relu(&conv_bn(&h, &p.conv1, 1)?);
    let h = reference::relu(&conv_bn(&h, &p.conv2, p.stride)?);
    let h = conv_bn(&h, &p.conv3, 1)?;
    let res = match &p.proj {
        Some(pr) => conv_bn(x, pr, p.stride)?,
        None => x.clone(),
    };
    let y = reference::relu(&reference::add(&res, &h)?);
    match &p.sme {
        Some(s) => sme_forward_naive(&y, s),
        None => Ok(y),
    }
}

pub fn network_forward_naive(x: &Tensor, net: &Network) -> Result<Tensor> {
    let mut y = reference::relu(&conv_bn(x, &net.stem, 1)?);
    for p in net.stages.iter().flatten() {
        y = block_forward_naive(&y, p)?;
    }
    let [n, t, c, _, _] = y.clip_dims()?;
    let pooled = reference::global_avg_pool_spatial(&y)?;
    let k = net.head_w.shape()[0];
    let mut out = Tensor::zeros(&[n, k]);
    for b in 0..n {
        for o in 0..k {
            let mut s = net.head_b.data()[o];
            for ci in 0..c {
                let mut m = 0.0;
                for ti in 0..t {
                    m += pooled.at(&[b, ti, ci]);
                }
                s += net.head_w.at(&[o, ci]) * m / t as f64;
            }
            out.set(&[b, o], s);
        }
    }
    Ok(out)
}
