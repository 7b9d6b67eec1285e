//! Raw slice kernels behind the graph operations.
//!
//! Layouts are row-major. Images are `[N, C, H, W]` with `W` innermost, so for
//! spectrograms `H` is frequency and `W` is time.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Real;

#[inline]
fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y[r, :] = x[r, :] @ w + b` for `rows` rows.
pub fn linear_forward<S: Real>(x: &[S], w: &[S], b: Option<&[S]>, rows: usize, fin: usize, fout: usize) -> Vec<S> {
    let mut y = vec![S::zero(); rows * fout];
    for r in 0..rows {
        let yr = &mut y[r * fout..(r + 1) * fout];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        let xr = &x[r * fin..(r + 1) * fin];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != S::zero() {
                axpy(xi, &w[i * fout..(i + 1) * fout], yr);
            }
        }
    }
    y
}

pub fn linear_backward_input<S: Real>(gy: &[S], w: &[S], rows: usize, fin: usize, fout: usize, gx: &mut [S]) {
    for r in 0..rows {
        let gyr = &gy[r * fout..(r + 1) * fout];
        let gxr = &mut gx[r * fin..(r + 1) * fin];
        for (i, g) in gxr.iter_mut().enumerate() {
            *g += dot(gyr, &w[i * fout..(i + 1) * fout]);
        }
    }
}

pub fn linear_backward_weight<S: Real>(gy: &[S], x: &[S], rows: usize, fin: usize, fout: usize, gw: &mut [S]) {
    for r in 0..rows {
        let gyr = &gy[r * fout..(r + 1) * fout];
        let xr = &x[r * fin..(r + 1) * fin];
        for (i, &xi) in xr.iter().enumerate() {
            if xi != S::zero() {
                axpy(xi, gyr, &mut gw[i * fout..(i + 1) * fout]);
            }
        }
    }
}

pub fn bias_backward<S: Real>(gy: &[S], rows: usize, fout: usize, gb: &mut [S]) {
    for r in 0..rows {
        for (g, &v) in gb.iter_mut().zip(&gy[r * fout..(r + 1) * fout]) {
            *g += v;
        }
    }
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }
    /// Output column range `[lo, hi)` whose input column `ow*sw + b - pw` is in bounds.
    #[inline]
    fn col_range(&self, b: usize, wo: usize) -> (usize, usize) {
        // need ow*sw + b >= pw and ow*sw + b - pw < w
        let lo = if b >= self.pw { 0 } else { (self.pw - b).div_ceil(self.sw) };
        let lim = self.w + self.pw; // ow*sw + b < lim
        let hi = if lim > b { ((lim - b - 1) / self.sw + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<S: Real>(x: &[S], k: &[S], bias: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut y = vec![S::zero(); g.n * g.c_out * ho * wo];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let plane = &mut y[(n * g.c_out + co) * ho * wo..(n * g.c_out + co + 1) * ho * wo];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.c_in {
                let xin = &x[(n * g.c_in + ci) * g.h * g.w..(n * g.c_in + ci + 1) * g.h * g.w];
                let kern = &k[(co * g.c_in + ci) * g.kh * g.kw..(co * g.c_in + ci + 1) * g.kh * g.kw];
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        let wv = kern[a * g.kw + b];
                        if wv == S::zero() {
                            continue;
                        }
                        let (lo, hi) = g.col_range(b, wo);
                        for oh in 0..ho {
                            let ih = oh * g.sh + a;
                            if ih < g.ph || ih - g.ph >= g.h {
                                continue;
                            }
                            let xrow = &xin[(ih - g.ph) * g.w..(ih - g.ph + 1) * g.w];
                            let yrow = &mut plane[oh * wo..(oh + 1) * wo];
                            if g.sw == 1 {
                                let start = lo + b - g.pw;
                                axpy(wv, &xrow[start..start + hi - lo], &mut yrow[lo..hi]);
                            } else {
                                for ow in lo..hi {
                                    yrow[ow] += wv * xrow[ow * g.sw + b - g.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input and kernel gradients of [`conv2d_forward`].
pub fn conv2d_backward<S: Real>(
    gy: &[S],
    x: &[S],
    k: &[S],
    g: &ConvGeom,
    mut gx: Option<&mut [S]>,
    mut gk: Option<&mut [S]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for n in 0..g.n {
        for co in 0..g.c_out {
            let gplane = &gy[(n * g.c_out + co) * ho * wo..(n * g.c_out + co + 1) * ho * wo];
            for ci in 0..g.c_in {
                let xoff = (n * g.c_in + ci) * g.h * g.w;
                let koff = (co * g.c_in + ci) * g.kh * g.kw;
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        let wv = k[koff + a * g.kw + b];
                        let (lo, hi) = g.col_range(b, wo);
                        let mut acc = S::zero();
                        for oh in 0..ho {
                            let ih = oh * g.sh + a;
                            if ih < g.ph || ih - g.ph >= g.h {
                                continue;
                            }
                            let row = xoff + (ih - g.ph) * g.w;
                            let grow = &gplane[oh * wo..(oh + 1) * wo];
                            if g.sw == 1 {
                                let start = row + lo + b - g.pw;
                                if gk.is_some() {
                                    acc += dot(&grow[lo..hi], &x[start..start + hi - lo]);
                                }
                                if let Some(gx) = gx.as_deref_mut() {
                                    axpy(wv, &grow[lo..hi], &mut gx[start..start + hi - lo]);
                                }
                            } else {
                                for ow in lo..hi {
                                    let idx = row + ow * g.sw + b - g.pw;
                                    acc += grow[ow] * x[idx];
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[idx] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[koff + a * g.kw + b] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Sums `gy` over every axis but the channel axis of `[N, C, H*W]`.
pub fn channel_bias_backward<S: Real>(gy: &[S], n: usize, c: usize, hw: usize, gb: &mut [S]) {
    for ni in 0..n {
        for (ci, g) in gb.iter_mut().enumerate() {
            let off = (ni * c + ci) * hw;
            *g += gy[off..off + hw].iter().copied().sum::<S>();
        }
    }
}

/// Geometry of a transposed convolution (no padding). Kernels are `[C_in, C_out, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.sh + self.kh
    }
    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.sw + self.kw
    }
}

pub fn conv_transpose2d_forward<S: Real>(x: &[S], k: &[S], bias: Option<&[S]>, g: &ConvTGeom) -> Vec<S> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut y = vec![S::zero(); g.n * g.c_out * ho * wo];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let plane = &mut y[(n * g.c_out + co) * ho * wo..(n * g.c_out + co + 1) * ho * wo];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.c_in {
                let xin = &x[(n * g.c_in + ci) * g.h * g.w..(n * g.c_in + ci + 1) * g.h * g.w];
                let koff = (ci * g.c_out + co) * g.kh * g.kw;
                for ih in 0..g.h {
                    for a in 0..g.kh {
                        let orow = &mut plane[(ih * g.sh + a) * wo..(ih * g.sh + a + 1) * wo];
                        for b in 0..g.kw {
                            let wv = k[koff + a * g.kw + b];
                            for iw in 0..g.w {
                                orow[iw * g.sw + b] += wv * xin[ih * g.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose2d_backward<S: Real>(
    gy: &[S],
    x: &[S],
    k: &[S],
    g: &ConvTGeom,
    mut gx: Option<&mut [S]>,
    mut gk: Option<&mut [S]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for n in 0..g.n {
        for co in 0..g.c_out {
            let gplane = &gy[(n * g.c_out + co) * ho * wo..(n * g.c_out + co + 1) * ho * wo];
            for ci in 0..g.c_in {
                let xoff = (n * g.c_in + ci) * g.h * g.w;
                let koff = (ci * g.c_out + co) * g.kh * g.kw;
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        let wv = k[koff + a * g.kw + b];
                        let mut acc = S::zero();
                        for ih in 0..g.h {
                            let grow = &gplane[(ih * g.sh + a) * wo..(ih * g.sh + a + 1) * wo];
                            for iw in 0..g.w {
                                let gv = grow[iw * g.sw + b];
                                acc += gv * x[xoff + ih * g.w + iw];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xoff + ih * g.w + iw] += wv * gv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[koff + a * g.kw + b] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel mean and biased variance of `[outer, C, inner]`.
pub fn channel_moments<S: Real>(x: &[S], outer: usize, c: usize, inner: usize) -> (Vec<S>, Vec<S>) {
    let count = S::from_usize(outer * inner);
    let mut mean = vec![S::zero(); c];
    for o in 0..outer {
        for (ci, m) in mean.iter_mut().enumerate() {
            let off = (o * c + ci) * inner;
            *m += x[off..off + inner].iter().copied().sum::<S>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![S::zero(); c];
    for o in 0..outer {
        for ci in 0..c {
            let off = (o * c + ci) * inner;
            let m = mean[ci];
            var[ci] += x[off..off + inner].iter().map(|&v| (v - m) * (v - m)).sum::<S>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
