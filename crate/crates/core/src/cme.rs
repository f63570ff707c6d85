//! Channel-wise motion enhancement.
//!
//! Each frame's pooled channel statistics are projected to a descriptor `z_t`
//! and a key `k_t`. Pairwise discrepancies `d_tj = -k_t . k_j` are
//! softmax-normalised over `j` and used to mix every frame's descriptor into
//! frame `t` on top of a residual copy of `z_t`. A sigmoid over a final
//! projection gives the per-frame channel gate `a_t`, and the block output is
//! `x_t` scaled channel-wise by `a_t`.

use crate::error::{Error, Result};
use crate::tensor::{rng, Tape, Tensor, Var};

/// Maximum tolerated deviation of a fusion-weight row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CmeParams {
    /// `[C/r1, C]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[C/r2, C]`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[C, C/r1]`
    pub w3: Tensor,
    pub b3: Tensor,
    pub r1: usize,
    pub r2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CmeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Per-frame channel gates `[N, T, C]`, every entry in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector(pub Tensor);

/// Raw discrepancies and their row-softmax, both `[N, T, T]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscrepancyMatrix {
    pub d: Var,
    pub d_hat: Var,
}

/// Checks the reduction-ratio constraints for a `channels`-wide input.
pub fn validate_ratios(channels: usize, r1: usize, r2: usize) -> Result<()> {
    if r1 == 0 || r2 == 0 {
        return Err(Error::Config("reduction ratios must be positive".into()));
    }
    if r1 != r2 {
        return Err(Error::Config(format!(
            "reduction ratios must match, got r1 = {r1}, r2 = {r2}"
        )));
    }
    if channels % r1 != 0 {
        return Err(Error::Config(format!(
            "reduction ratio {r1} does not divide channel width {channels}"
        )));
    }
    Ok(())
}

impl CmeParams {
    /// He-initialised descriptor projections, zero gate projection and zero
    /// biases, so every gate starts at exactly 0.5.
    pub fn new(channels: usize, r1: usize, r2: usize, seed: u64, name: &str) -> Result<Self> {
        validate_ratios(channels, r1, r2)?;
        let (c1, c2) = (channels / r1, channels / r2);
        Ok(Self {
            w1: rng::kaiming_normal(&mut rng::stream(seed, &format!("{name}.w1")), &[c1, channels], channels),
            b1: Tensor::zeros(&[c1]),
            w2: rng::kaiming_normal(&mut rng::stream(seed, &format!("{name}.w2")), &[c2, channels], channels),
            b2: Tensor::zeros(&[c2]),
            w3: Tensor::zeros(&[channels, c1]),
            b3: Tensor::zeros(&[channels]),
            r1,
            r2,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        validate_ratios(c, self.r1, self.r2)?;
        let (c1, c2) = (c / self.r1, c / self.r2);
        let expect: [(&str, &Tensor, Vec<usize>); 6] = [
            ("w1", &self.w1, vec![c1, c]),
            ("b1", &self.b1, vec![c1]),
            ("w2", &self.w2, vec![c2, c]),
            ("b2", &self.b2, vec![c2]),
            ("w3", &self.w3, vec![c, c1]),
            ("b3", &self.b3, vec![c]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "CME parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("CME parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> CmeVars {
        CmeVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w3: tape.leaf(self.w3.clone()),
            b3: tape.leaf(self.b3.clone()),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    /// Untaped forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape);
        let u = cme_forward(&mut tape, xv, &vars)?;
        Ok(tape.value(u).clone())
    }

    /// Untaped gate computation.
    pub fn gates(&self, x: &Tensor) -> Result<GateVector> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape);
        let (_, a) = cme_forward_with_gates(&mut tape, xv, &vars)?;
        Ok(GateVector(tape.value(a).clone()))
    }
}

impl CmeVars {
    pub fn named(&self) -> [(&'static str, Var); 6] {
        [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("w3", self.w3),
            ("b3", self.b3),
        ]
    }
}

impl GateVector {
    /// True when every gate lies strictly inside `(0, 1)`.
    pub fn in_open_unit_interval(&self) -> bool {
        self.0.data().iter().all(|&a| a > 0.0 && a < 1.0)
    }
}

fn projected(tape: &mut Tape, x: Var, w: Var, b: Var, what: &'static str) -> Result<Var> {
    let [n, t, c, _, _] = tape.value(x).clip_dims()?;
    if tape.shape(w).get(1) != Some(&c) {
        return Err(Error::dim(what, tape.shape(x), tape.shape(w)));
    }
    let out = tape.shape(w)[0];
    let pooled = tape.global_avg_pool_spatial(x)?;
    let flat = tape.reshape(pooled, &[n * t, c])?;
    let y = tape.linear(flat, w, Some(b))?;
    tape.reshape(y, &[n, t, out])
}

/// `z_t = W1 GAP(x_t) + b1`, shape `[N, T, C/r1]`.
pub fn channel_descriptor(tape: &mut Tape, x: Var, p: &CmeVars) -> Result<Var> {
    projected(tape, x, p.w1, p.b1, "channel_descriptor")
}

/// `k_t = W2 GAP(x_t) + b2`, shape `[N, T, C/r2]`.
pub fn key_descriptor(tape: &mut Tape, x: Var, p: &CmeVars) -> Result<Var> {
    projected(tape, x, p.w2, p.b2, "key_descriptor")
}

/// `d_tj = -k_t . k_j` and its softmax over `j`, self term included.
pub fn discrepancy(tape: &mut Tape, k: Var) -> Result<DiscrepancyMatrix> {
    if tape.shape(k).len() != 3 {
        return Err(Error::Contract(format!(
            "keys must be [N, T, C/r], got {:?}",
            tape.shape(k)
        )));
    }
    if !tape.value(k).all_finite() {
        return Err(Error::Numeric("discrepancy keys".into()));
    }
    let kt = tape.transpose(k)?;
    let gram = tape.bmm(k, kt)?;
    let d = tape.scale(gram, -1.0);
    let d_hat = tape.softmax_lastdim(d)?;
    Ok(DiscrepancyMatrix { d, d_hat })
}

/// `z_hat_t = z_t + sum_j d_hat_tj z_j`.
pub fn fuse_temporal(tape: &mut Tape, z: Var, d_hat: Var) -> Result<Var> {
    let (sz, sd) = (tape.shape(z), tape.shape(d_hat));
    if sz.len() != 3 || sd.len() != 3 || sd[0] != sz[0] || sd[1] != sz[1] || sd[2] != sz[1] {
        return Err(Error::dim("fuse_temporal", sz, sd));
    }
    let t = sd[2];
    for (row_idx, row) in tape.value(d_hat).data().chunks(t).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!(
                "fusion weights row {row_idx} sums to {s}, expected 1"
            )));
        }
    }
    let mixed = tape.bmm(d_hat, z)?;
    tape.add(z, mixed)
}

/// `a_t = sigmoid(W3 z_hat_t + b3)`, shape `[N, T, C]`.
pub fn channel_gate(tape: &mut Tape, z_hat: Var, p: &CmeVars) -> Result<Var> {
    let s = tape.shape(z_hat).to_vec();
    let sw = tape.shape(p.w3);
    if s.len() != 3 || sw.len() != 2 || sw[1] != s[2] {
        return Err(Error::dim("channel_gate", &s, sw));
    }
    let c = sw[0];
    let flat = tape.reshape(z_hat, &[s[0] * s[1], s[2]])?;
    let pre = tape.linear(flat, p.w3, Some(p.b3))?;
    let a = tape.sigmoid(pre);
    tape.reshape(a, &[s[0], s[1], c])
}

/// Full enhancement, returning both the output and the gate handle.
pub fn cme_forward_with_gates(tape: &mut Tape, x: Var, p: &CmeVars) -> Result<(Var, Var)> {
    let z = channel_descriptor(tape, x, p)?;
    let k = key_descriptor(tape, x, p)?;
    let dm = discrepancy(tape, k)?;
    let z_hat = fuse_temporal(tape, z, dm.d_hat)?;
    let a = channel_gate(tape, z_hat, p)?;
    let u = tape.scale_channels(x, a)?;
    Ok((u, a))
}

/// `u_t = x_t * a_t` channel-wise.
pub fn cme_forward(tape: &mut Tape, x: Var, p: &CmeVars) -> Result<Var> {
    cme_forward_with_gates(tape, x, p).map(|(u, _)| u)
}

/// Scalar-loop version of [`cme_forward`] over `n, t, j, c, h, w`.
pub fn cme_forward_naive(x: &Tensor, p: &CmeParams) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    if p.channels() != c {
        return Err(Error::dim("cme_forward_naive", x.shape(), p.w1.shape()));
    }
    let c1 = p.w1.shape()[0];
    let c2 = p.w2.shape()[0];
    let mut out = x.clone();
    for b in 0..n {
        // pooled[t][c]
        let mut pooled = vec![vec![0.0; c]; t];
        for ti in 0..t {
            for ci in 0..c {
                let mut s = 0.0;
                for yi in 0..h {
                    for xi in 0..w {
                        s += x.at(&[b, ti, ci, yi, xi]);
                    }
                }
                pooled[ti][ci] = s / (h * w) as f64;
            }
        }
        let mut z = vec![vec![0.0; c1]; t];
        let mut k = vec![vec![0.0; c2]; t];
        for ti in 0..t {
            for o in 0..c1 {
                let mut s = p.b1.data()[o];
                for ci in 0..c {
                    s += p.w1.at(&[o, ci]) * pooled[ti][ci];
                }
                z[ti][o] = s;
            }
            for o in 0..c2 {
                let mut s = p.b2.data()[o];
                for ci in 0..c {
                    s += p.w2.at(&[o, ci]) * pooled[ti][ci];
                }
                k[ti][o] = s;
            }
        }
        for ti in 0..t {
            let mut d = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for o in 0..c2 {
                    dot += k[ti][o] * k[j][o];
                }
                d[j] = -dot;
            }
            let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for j in 0..t {
                zsum += (d[j] - m).exp();
            }
            let mut z_hat = z[ti].clone();
            for j in 0..t {
                let wj = (d[j] - m).exp() / zsum;
                for o in 0..c1 {
                    z_hat[o] += wj * z[j][o];
                }
            }
            for ci in 0..c {
                let mut pre = p.b3.data()[ci];
                for o in 0..c1 {
                    pre += p.w3.at(&[ci, o]) * z_hat[o];
                }
                let a = 1.0 / (1.0 + (-pre).exp());
                for yi in 0..h {
                    for xi in 0..w {
                        let v = x.at(&[b, ti, ci, yi, xi]);
                        out.set(&[b, ti, ci, yi, xi], v * a);
                    }
                }
            }
        }
    }
    Ok(out)
}
