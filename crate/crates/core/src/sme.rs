//! Spatial-wise motion enhancement.
//!
//! Adjacent frames are compared position by position with cosine similarity
//! over channels. The weighting map `1 - s_t` scales `x_t`, a 1x1 convolution
//! and batch norm rescale that branch, and the result is added back onto
//! `x_t`. The last similarity slice is duplicated so the map covers all `T`
//! frames. Clips with a single frame pass through unchanged.

use crate::error::{Error, Result};
use crate::tensor::{rng, BatchNormState, BnMode, BnVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SmeParams {
    /// `[C, C]`, no bias.
    pub wc: Tensor,
    /// `gamma` and `beta` start at zero, making the block an identity.
    pub bn: BatchNormState,
}

#[derive(Clone, Copy, Debug)]
pub struct SmeVars {
    pub wc: Var,
    pub bn: BnVars,
}

/// Similarity `[N, T, H, W]` after the last slice has been duplicated.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap(pub Tensor);

impl SimilarityMap {
    /// Entries within `tol` of `[-1, 1]`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        self.0.data().iter().all(|&s| (-1.0 - tol..=1.0 + tol).contains(&s))
    }

    /// `1 - s`, the map that weights the residual branch.
    pub fn weighting(&self) -> Tensor {
        self.0.map(|s| 1.0 - s)
    }
}

impl SmeParams {
    pub fn new(channels: usize, seed: u64, name: &str) -> Self {
        Self {
            wc: rng::kaiming_normal(
                &mut rng::stream(seed, &format!("{name}.wc")),
                &[channels, channels],
                channels,
            ),
            bn: BatchNormState::zero_gamma(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.wc.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.wc.shape() != [c, c] || self.bn.channels() != c {
            return Err(Error::Config(format!(
                "SME weight {:?} and norm width {} disagree",
                self.wc.shape(),
                self.bn.channels()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> SmeVars {
        SmeVars {
            wc: tape.leaf(self.wc.clone()),
            bn: self.bn.bind(tape),
        }
    }

    /// Untaped forward pass (updates running statistics in training mode).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape);
        let v = sme_forward(&mut tape, xv, self, vars)?;
        Ok(tape.value(v).clone())
    }
}

/// Cosine similarity of adjacent frames, `[N, T-1, H, W]`. Needs `T >= 2`.
pub fn pointwise_cosine(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.pointwise_cosine(x)
}

/// Appends a copy of the final similarity slice.
pub fn extend_similarity(tape: &mut Tape, s: Var) -> Result<Var> {
    if tape.shape(s).len() != 4 {
        return Err(Error::Contract(format!(
            "similarity must be [N, T-1, H, W], got {:?}",
            tape.shape(s)
        )));
    }
    tape.extend_last_frame(s)
}

/// Similarity map over all `T` frames for an untaped clip.
pub fn similarity_map(x: &Tensor) -> Result<SimilarityMap> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = pointwise_cosine(&mut tape, xv)?;
    let s = extend_similarity(&mut tape, s)?;
    Ok(SimilarityMap(tape.value(s).clone()))
}

/// Output and the extended similarity handle (`None` when `T = 1`).
pub fn sme_forward_with_map(
    tape: &mut Tape,
    x: Var,
    params: &mut SmeParams,
    vars: SmeVars,
) -> Result<(Var, Option<Var>)> {
    let [_, t, c, _, _] = tape.value(x).clip_dims()?;
    if c != params.channels() {
        return Err(Error::dim("sme_forward", tape.shape(x), params.wc.shape()));
    }
    if t == 1 {
        return Ok((x, None));
    }
    let s = pointwise_cosine(tape, x)?;
    let s = extend_similarity(tape, s)?;
    let weight = tape.affine(s, -1.0, 1.0);
    let masked = tape.scale_positions(x, weight)?;
    let mixed = tape.pointwise_linear(masked, vars.wc, None)?;
    let branch = params.bn.forward(tape, mixed, vars.bn)?;
    Ok((tape.add(branch, x)?, Some(s)))
}

/// `v_t = BN(Conv(x_t * (1 - s_t))) + x_t`.
pub fn sme_forward(tape: &mut Tape, x: Var, params: &mut SmeParams, vars: SmeVars) -> Result<Var> {
    sme_forward_with_map(tape, x, params, vars).map(|(v, _)| v)
}

/// Scalar-loop version of [`sme_forward`]. Training mode normalises with the
/// batch statistics it computes itself and leaves `params` untouched.
pub fn sme_forward_naive(x: &Tensor, params: &SmeParams) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    if c != params.channels() {
        return Err(Error::dim("sme_forward_naive", x.shape(), params.wc.shape()));
    }
    if t == 1 {
        return Ok(x.clone());
    }
    // similarity, last slice copied
    let mut sim = vec![0.0; n * t * h * w];
    let sidx = |b: usize, ti: usize, yi: usize, xi: usize| ((b * t + ti) * h + yi) * w + xi;
    for b in 0..n {
        for ti in 0..t - 1 {
            for yi in 0..h {
                for xi in 0..w {
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for ci in 0..c {
                        let p = x.at(&[b, ti, ci, yi, xi]);
                        let q = x.at(&[b, ti + 1, ci, yi, xi]);
                        dot += p * q;
                        na += p * p;
                        nb += q * q;
                    }
                    let denom = (na * nb).sqrt().max(1e-8);
                    sim[sidx(b, ti, yi, xi)] = if na.sqrt() < 1e-8 && nb.sqrt() < 1e-8 {
                        1.0
                    } else {
                        dot / denom
                    };
                }
            }
        }
        for yi in 0..h {
            for xi in 0..w {
                sim[sidx(b, t - 1, yi, xi)] = sim[sidx(b, t - 2, yi, xi)];
            }
        }
    }
    // 1x1 conv of the weighted input
    let mut conv = Tensor::zeros(x.shape());
    for b in 0..n {
        for ti in 0..t {
            for yi in 0..h {
                for xi in 0..w {
                    let m = 1.0 - sim[sidx(b, ti, yi, xi)];
                    for co in 0..c {
                        let mut s = 0.0;
                        for ci in 0..c {
                            s += params.wc.at(&[co, ci]) * x.at(&[b, ti, ci, yi, xi]) * m;
                        }
                        conv.set(&[b, ti, co, yi, xi], s);
                    }
                }
            }
        }
    }
    let (mean, var) = match params.bn.mode {
        BnMode::Inference => {
            if !params.bn.stats_ready {
                return Err(Error::UninitializedStats);
            }
            (params.bn.running_mean.data().to_vec(), params.bn.running_var.data().to_vec())
        }
        BnMode::Training => {
            let count = (n * t * h * w) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for co in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    for ti in 0..t {
                        for yi in 0..h {
                            for xi in 0..w {
                                s += conv.at(&[b, ti, co, yi, xi]);
                            }
                        }
                    }
                }
                mean[co] = s / count;
                let mut q = 0.0;
                for b in 0..n {
                    for ti in 0..t {
                        for yi in 0..h {
                            for xi in 0..w {
                                let d = conv.at(&[b, ti, co, yi, xi]) - mean[co];
                                q += d * d;
                            }
                        }
                    }
                }
                var[co] = q / count;
            }
            (mean, var)
        }
    };
    let mut out = x.clone();
    for b in 0..n {
        for ti in 0..t {
            for co in 0..c {
                let g = params.bn.gamma.data()[co];
                let beta = params.bn.beta.data()[co];
                let inv = 1.0 / (var[co] + params.bn.eps).sqrt();
                for yi in 0..h {
                    for xi in 0..w {
                        let br = g * (conv.at(&[b, ti, co, yi, xi]) - mean[co]) * inv + beta;
                        out.set(&[b, ti, co, yi, xi], br + x.at(&[b, ti, co, yi, xi]));
                    }
                }
            }
        }
    }
    Ok(out)
}
