//! Scalar-loop reference implementations of the tensor primitives.
//!
//! Nothing here shares code with the vectorised kernels; these functions are
//! the oracles the tests and `selftest` compare against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim("reference::matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    Ok(out)
}

pub fn pointwise_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, t, cin, h, wd] = x.clip_dims()?;
    let cout = w.shape()[0];
    if w.shape()[1] != cin {
        return Err(Error::dim("reference::pointwise_linear", x.shape(), w.shape()));
    }
    let mut out = Tensor::zeros(&[n, t, cout, h, wd]);
    for bi in 0..n {
        for ti in 0..t {
            for yi in 0..h {
                for xi in 0..wd {
                    for co in 0..cout {
                        let mut s = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            s += w.at(&[co, ci]) * x.at(&[bi, ti, ci, yi, xi]);
                        }
                        out.set(&[bi, ti, co, yi, xi], s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Zero-padded 3x3 cross-correlation, independent of im2col.
pub fn conv2d_3x3(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let [n, t, cin, h, wd] = x.clip_dims()?;
    let cout = w.shape()[0];
    if w.shape()[1] != cin {
        return Err(Error::dim("reference::conv2d_3x3", x.shape(), w.shape()));
    }
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Tensor::zeros(&[n, t, cout, ho, wo]);
    for bi in 0..n {
        for ti in 0..t {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.at(&[co, ci, ky, kx])
                                        * x.at(&[bi, ti, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                        out.set(&[bi, ti, co, oy, ox], s);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn subsample_spatial(x: &Tensor, stride: usize) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(&[n, t, c, ho, wo]);
    for bi in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out.set(&[bi, ti, ci, oy, ox], x.at(&[bi, ti, ci, oy * stride, ox * stride]));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn global_avg_pool_spatial(x: &Tensor) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    let mut out = Tensor::zeros(&[n, t, c]);
    for bi in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let mut s = 0.0;
                for yi in 0..h {
                    for xi in 0..w {
                        s += x.at(&[bi, ti, ci, yi, xi]);
                    }
                }
                out.set(&[bi, ti, ci], s / (h * w) as f64);
            }
        }
    }
    Ok(out)
}

/// Softmax over the last axis, computed directly from the definition with
/// max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let rows = x.len() / k;
    let mut out = x.clone();
    for r in 0..rows {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(x.data()[r * k + j]);
        }
        let mut z = 0.0;
        for j in 0..k {
            z += (x.data()[r * k + j] - m).exp();
        }
        for j in 0..k {
            out.data_mut()[r * k + j] = (x.data()[r * k + j] - m).exp() / z;
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Batch normalisation of a clip. With `stats = None` the batch mean and
/// biased variance over `(N, T, H, W)` are computed here.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    let count = (n * t * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match stats {
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        None => {
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..n {
                    for ti in 0..t {
                        for yi in 0..h {
                            for xi in 0..w {
                                s += x.at(&[bi, ti, ci, yi, xi]);
                            }
                        }
                    }
                }
                mean[ci] = s / count;
                let mut q = 0.0;
                for bi in 0..n {
                    for ti in 0..t {
                        for yi in 0..h {
                            for xi in 0..w {
                                let d = x.at(&[bi, ti, ci, yi, xi]) - mean[ci];
                                q += d * d;
                            }
                        }
                    }
                }
                var[ci] = q / count;
            }
        }
    }
    let mut out = x.clone();
    for bi in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let v = x.at(&[bi, ti, ci, yi, xi]);
                        let y = gamma[ci] * (v - mean[ci]) / (var[ci] + eps).sqrt() + beta[ci];
                        out.set(&[bi, ti, ci, yi, xi], y);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depthwise temporal cross-correlation with zero padding.
pub fn temporal_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    let k = kernel.shape()[1];
    if kernel.shape()[0] != c {
        return Err(Error::dim("reference::temporal_conv", x.shape(), kernel.shape()));
    }
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let mut s = 0.0;
                        for tap in 0..k {
                            let src = ti as isize + tap as isize - pad;
                            if src >= 0 && src < t as isize {
                                s += kernel.at(&[ci, tap]) * x.at(&[bi, src as usize, ci, yi, xi]);
                            }
                        }
                        out.set(&[bi, ti, ci, yi, xi], s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjacent-frame cosine similarity `[N, T-1, H, W]`, same conventions as
/// the taped primitive.
pub fn pointwise_cosine(x: &Tensor) -> Result<Tensor> {
    let [n, t, c, h, w] = x.clip_dims()?;
    if t < 2 {
        return Err(Error::Contract("reference::pointwise_cosine needs T >= 2".into()));
    }
    let mut out = Tensor::zeros(&[n, t - 1, h, w]);
    for bi in 0..n {
        for ti in 0..t - 1 {
            for yi in 0..h {
                for xi in 0..w {
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for ci in 0..c {
                        let a = x.at(&[bi, ti, ci, yi, xi]);
                        let b = x.at(&[bi, ti + 1, ci, yi, xi]);
                        dot += a * b;
                        na += a * a;
                        nb += b * b;
                    }
                    let denom = (na * nb).sqrt().max(1e-8);
                    let s = if na.sqrt() < 1e-8 && nb.sqrt() < 1e-8 {
                        1.0
                    } else {
                        dot / denom
                    };
                    out.set(&[bi, ti, yi, xi], s);
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// Mean cross-entropy via the reference softmax followed by `ln`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let p = softmax_lastdim(logits);
    let mut s = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        s -= p.data()[i * k + l].ln();
    }
    s / labels.len() as f64
}
