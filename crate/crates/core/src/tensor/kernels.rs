//! Slice-level forward and backward kernels for the heavier primitives.
//!
//! Per-frame work is split into fixed-size chunks and run on the rayon pool;
//! weight gradients are reduced in chunk order so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

/// Frames handled by one parallel task.
const FRAME_CHUNK: usize = 4;

/// Row-major strided GEMM: `c = alpha * a * b + beta * c`.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with strides
/// `(rsb, csb)`, `c` is dense `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b` for every
    // call site in this module; `c` is dense with exactly `m * n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, 0.0, &mut c);
    c
}

/// Gradients of `c = a b` given `dc`: returns `(da, db)`.
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    // da = dc . b^T
    gemm(m, n, k, 1.0, dc, n, 1, b, 1, n, 0.0, &mut da);
    let mut db = vec![0.0; k * n];
    // db = a^T . dc
    gemm(k, m, n, 1.0, a, 1, k, dc, n, 1, 0.0, &mut db);
    (da, db)
}

/// Sums equally sized partial buffers in order.
fn reduce_ordered(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// 1x1 convolution: every frame `[cin, hw]` is mapped to `[cout, hw]`.
pub(crate) fn pointwise_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    frames: usize,
    cin: usize,
    cout: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; frames * cout * hw];
    out.par_chunks_mut(cout * hw * FRAME_CHUNK)
        .zip(x.par_chunks(cin * hw * FRAME_CHUNK))
        .for_each(|(oc, xc)| {
            for (of, xf) in oc.chunks_mut(cout * hw).zip(xc.chunks(cin * hw)) {
                if let Some(b) = bias {
                    for (row, &bv) in of.chunks_mut(hw).zip(b) {
                        row.fill(bv);
                    }
                    gemm(cout, cin, hw, 1.0, w, cin, 1, xf, hw, 1, 1.0, of);
                } else {
                    gemm(cout, cin, hw, 1.0, w, cin, 1, xf, hw, 1, 0.0, of);
                }
            }
        });
    out
}

/// Returns `(dx, dw, dbias)` for the 1x1 convolution.
pub(crate) fn pointwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    frames: usize,
    cin: usize,
    cout: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; frames * cin * hw];
    dx.par_chunks_mut(cin * hw * FRAME_CHUNK)
        .zip(dy.par_chunks(cout * hw * FRAME_CHUNK))
        .for_each(|(dxc, dyc)| {
            for (dxf, dyf) in dxc.chunks_mut(cin * hw).zip(dyc.chunks(cout * hw)) {
                // dx = w^T dy
                gemm(cin, cout, hw, 1.0, w, 1, cin, dyf, hw, 1, 0.0, dxf);
            }
        });
    let parts: Vec<Vec<f64>> = x
        .par_chunks(cin * hw * FRAME_CHUNK)
        .zip(dy.par_chunks(cout * hw * FRAME_CHUNK))
        .map(|(xc, dyc)| {
            let mut dw = vec![0.0; cout * cin];
            for (xf, dyf) in xc.chunks(cin * hw).zip(dyc.chunks(cout * hw)) {
                // dw += dy x^T
                gemm(cout, hw, cin, 1.0, dyf, hw, 1, xf, 1, hw, 1.0, &mut dw);
            }
            dw
        })
        .collect();
    let dw = reduce_ordered(parts, cout * cin);
    let mut db = vec![0.0; cout];
    for f in dy.chunks(cout * hw) {
        for (d, row) in db.iter_mut().zip(f.chunks(hw)) {
            *d += row.iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Geometry of a padded 3x3 convolution over one frame.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl Conv3 {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }
    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// `col[(ci*9 + ky*3 + kx), oy*wo + ox]` with zero padding of one pixel.
    fn im2col(&self, xf: &[f64], col: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let ohw = ho * wo;
        for ci in 0..self.cin {
            let plane = &xf[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[(ci * 9 + ky * 3 + kx) * ohw..][..ohw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dxf: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let ohw = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut dxf[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[(ci * 9 + ky * 3 + kx) * ohw..][..ohw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], weight: &[f64], frames: usize) -> Vec<f64> {
        let in_f = self.cin * self.h * self.w;
        let out_f = self.cout * self.out_hw();
        let k = self.cin * 9;
        let mut out = vec![0.0; frames * out_f];
        out.par_chunks_mut(out_f * FRAME_CHUNK)
            .zip(x.par_chunks(in_f * FRAME_CHUNK))
            .for_each(|(oc, xc)| {
                let mut col = vec![0.0; k * self.out_hw()];
                for (of, xf) in oc.chunks_mut(out_f).zip(xc.chunks(in_f)) {
                    self.im2col(xf, &mut col);
                    let n = self.out_hw();
                    gemm(self.cout, k, n, 1.0, weight, k, 1, &col, n, 1, 0.0, of);
                }
            });
        out
    }

    /// Returns `(dx, dweight)`.
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        frames: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let in_f = self.cin * self.h * self.w;
        let out_f = self.cout * self.out_hw();
        let k = self.cin * 9;
        let n = self.out_hw();
        let mut dx = vec![0.0; frames * in_f];
        let parts: Vec<Vec<f64>> = dx
            .par_chunks_mut(in_f * FRAME_CHUNK)
            .zip(x.par_chunks(in_f * FRAME_CHUNK))
            .zip(dy.par_chunks(out_f * FRAME_CHUNK))
            .map(|((dxc, xc), dyc)| {
                let mut col = vec![0.0; k * n];
                let mut dcol = vec![0.0; k * n];
                let mut dw = vec![0.0; self.cout * k];
                for ((dxf, xf), dyf) in dxc
                    .chunks_mut(in_f)
                    .zip(xc.chunks(in_f))
                    .zip(dyc.chunks(out_f))
                {
                    self.im2col(xf, &mut col);
                    // dw += dy col^T
                    gemm(self.cout, n, k, 1.0, dyf, n, 1, &col, 1, n, 1.0, &mut dw);
                    // dcol = w^T dy
                    gemm(k, self.cout, n, 1.0, weight, 1, k, dyf, n, 1, 0.0, &mut dcol);
                    self.col2im(&dcol, dxf);
                }
                dw
            })
            .collect();
        (dx, reduce_ordered(parts, self.cout * k))
    }
}

/// Depthwise temporal cross-correlation with zero padding.
///
/// `x` is `[n, t, c, p]` (p = H*W), `kernel` is `[c, k]`, `k` odd.
pub(crate) fn temporal_conv_forward(
    x: &[f64],
    kernel: &[f64],
    dims: [usize; 4],
    k: usize,
) -> Vec<f64> {
    let [n, t, c, p] = dims;
    let pad = k / 2;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ti in 0..t {
            for tap in 0..k {
                let src_t = ti as isize + tap as isize - pad as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = &x[((b * t + src_t as usize) * c) * p..][..c * p];
                let dst = &mut out[((b * t + ti) * c) * p..][..c * p];
                for ci in 0..c {
                    let wv = kernel[ci * k + tap];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &s) in dst[ci * p..(ci + 1) * p]
                        .iter_mut()
                        .zip(&src[ci * p..(ci + 1) * p])
                    {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernel)`.
pub(crate) fn temporal_conv_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dims: [usize; 4],
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let [n, t, c, p] = dims;
    let pad = k / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for b in 0..n {
        for ti in 0..t {
            for tap in 0..k {
                let src_t = ti as isize + tap as isize - pad as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let s_off = ((b * t + src_t as usize) * c) * p;
                let d_off = ((b * t + ti) * c) * p;
                for ci in 0..c {
                    let g = &dy[d_off + ci * p..][..p];
                    let xs = &x[s_off + ci * p..][..p];
                    let wv = kernel[ci * k + tap];
                    let mut acc = 0.0;
                    for ((&gv, &xv), dxv) in g.iter().zip(xs).zip(&mut dx[s_off + ci * p..][..p]) {
                        acc += gv * xv;
                        *dxv += wv * gv;
                    }
                    dk[ci * k + tap] += acc;
                }
            }
        }
    }
    (dx, dk)
}

/// Norms below this are treated as zero vectors by the cosine kernel.
pub(crate) const COSINE_ZERO_NORM: f64 = 1e-8;
/// Floor on the product of norms in the cosine denominator.
pub(crate) const COSINE_EPS: f64 = 1e-8;

/// `sqrt(|a|^2 |b|^2)` floored at [`COSINE_EPS`]. Taking the root of the
/// product keeps `s = 1` exact for identical vectors.
fn cosine_denominator(na2: f64, nb2: f64) -> f64 {
    (na2 * nb2).sqrt().max(COSINE_EPS)
}

/// Cosine similarity between channel vectors of adjacent frames.
///
/// `x` is `[n, t, c, p]`; the result is `[n, t-1, p]`.
pub(crate) fn cosine_forward(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [n, t, c, p] = dims;
    let mut out = vec![0.0; n * (t - 1) * p];
    let mut dot = vec![0.0; p];
    let mut na = vec![0.0; p];
    let mut nb = vec![0.0; p];
    for b in 0..n {
        for ti in 0..t - 1 {
            dot.fill(0.0);
            na.fill(0.0);
            nb.fill(0.0);
            let fa = &x[((b * t + ti) * c) * p..][..c * p];
            let fb = &x[((b * t + ti + 1) * c) * p..][..c * p];
            for ci in 0..c {
                let ra = &fa[ci * p..(ci + 1) * p];
                let rb = &fb[ci * p..(ci + 1) * p];
                for i in 0..p {
                    dot[i] += ra[i] * rb[i];
                    na[i] += ra[i] * ra[i];
                    nb[i] += rb[i] * rb[i];
                }
            }
            let o = &mut out[(b * (t - 1) + ti) * p..][..p];
            for i in 0..p {
                o[i] = if na[i].sqrt() < COSINE_ZERO_NORM && nb[i].sqrt() < COSINE_ZERO_NORM {
                    1.0
                } else {
                    dot[i] / cosine_denominator(na[i], nb[i])
                };
            }
        }
    }
    out
}

pub(crate) fn cosine_backward(x: &[f64], ds: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [n, t, c, p] = dims;
    let mut dx = vec![0.0; x.len()];
    let mut dot = vec![0.0; p];
    let mut na = vec![0.0; p];
    let mut nb = vec![0.0; p];
    // Per position: coefficient on b and on a for d/da, and symmetric for d/db.
    let mut ca_b = vec![0.0; p];
    let mut ca_a = vec![0.0; p];
    let mut cb_a = vec![0.0; p];
    let mut cb_b = vec![0.0; p];
    for b in 0..n {
        for ti in 0..t - 1 {
            dot.fill(0.0);
            na.fill(0.0);
            nb.fill(0.0);
            let a_off = ((b * t + ti) * c) * p;
            let b_off = ((b * t + ti + 1) * c) * p;
            for ci in 0..c {
                let ra = &x[a_off + ci * p..][..p];
                let rb = &x[b_off + ci * p..][..p];
                for i in 0..p {
                    dot[i] += ra[i] * rb[i];
                    na[i] += ra[i] * ra[i];
                    nb[i] += rb[i] * rb[i];
                }
            }
            let g = &ds[(b * (t - 1) + ti) * p..][..p];
            for i in 0..p {
                if na[i].sqrt() < COSINE_ZERO_NORM && nb[i].sqrt() < COSINE_ZERO_NORM {
                    ca_b[i] = 0.0;
                    ca_a[i] = 0.0;
                    cb_a[i] = 0.0;
                    cb_b[i] = 0.0;
                    continue;
                }
                // s = dot / D, D = |a||b| unless floored
                // ds/da = b / D - dot a / (|a|^2 D)
                let d = cosine_denominator(na[i], nb[i]);
                ca_b[i] = g[i] / d;
                cb_a[i] = g[i] / d;
                if d > COSINE_EPS {
                    ca_a[i] = -g[i] * dot[i] / (d * na[i]);
                    cb_b[i] = -g[i] * dot[i] / (d * nb[i]);
                } else {
                    ca_a[i] = 0.0;
                    cb_b[i] = 0.0;
                }
            }
            for ci in 0..c {
                for i in 0..p {
                    let va = x[a_off + ci * p + i];
                    let vb = x[b_off + ci * p + i];
                    dx[a_off + ci * p + i] += ca_b[i] * vb + ca_a[i] * va;
                    dx[b_off + ci * p + i] += cb_a[i] * va + cb_b[i] * vb;
                }
            }
        }
    }
    dx
}
