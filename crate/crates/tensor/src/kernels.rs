//! Forward and backward kernels shared by the tape and the eager helpers.

use crate::element::{matmul, Element};

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ocols = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ocols..(row + 1) * ocols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let ocols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ocols..(row + 1) * ocols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, when `keep_cols`, the per-image column buffers.
pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let (rows, ocols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.n * g.cout * ocols];
    let mut saved = if keep_cols {
        vec![T::zero(); g.n * rows * ocols]
    } else {
        Vec::new()
    };
    let mut scratch = vec![T::zero(); rows * ocols];
    for i in 0..g.n {
        let xi = &x[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w];
        let cols: &mut [T] = if keep_cols {
            &mut saved[i * rows * ocols..(i + 1) * rows * ocols]
        } else {
            &mut scratch
        };
        im2col(g, xi, cols);
        let oi = &mut out[i * g.cout * ocols..(i + 1) * g.cout * ocols];
        for (co, chunk) in oi.chunks_mut(ocols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        matmul(g.cout, rows, ocols, weight, false, cols, false, oi, T::one());
    }
    (out, saved)
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (rows, ocols) = (g.col_rows(), g.col_cols());
    if let Some(dw) = dw {
        for i in 0..g.n {
            let di = &dout[i * g.cout * ocols..(i + 1) * g.cout * ocols];
            let ci = &cols[i * rows * ocols..(i + 1) * rows * ocols];
            matmul(g.cout, ocols, rows, di, false, ci, true, dw, T::one());
        }
    }
    if let Some(db) = db {
        for i in 0..g.n {
            let di = &dout[i * g.cout * ocols..(i + 1) * g.cout * ocols];
            for (co, chunk) in di.chunks(ocols).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum();
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); rows * ocols];
        for i in 0..g.n {
            let di = &dout[i * g.cout * ocols..(i + 1) * g.cout * ocols];
            matmul(rows, g.cout, ocols, weight, true, di, false, &mut dcols, T::zero());
            col2im(g, &dcols, &mut dx[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w]);
        }
    }
}

/// Per-axis interpolation taps for align-corners = false bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct Taps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub wlo: Vec<T>,
    pub whi: Vec<T>,
}

pub(crate) fn taps<T: Element>(input: usize, output: usize) -> Taps<T> {
    let scale = input as f64 / output as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        wlo: Vec::with_capacity(output),
        whi: Vec::with_capacity(output),
    };
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        t.lo.push(lo);
        t.hi.push(hi);
        t.wlo.push(T::cast(1.0 - frac));
        t.whi.push(T::cast(frac));
    }
    t
}

pub(crate) fn resize_forward<T: Element>(
    x: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps::<T>(ih, oh);
    let tx = taps::<T>(iw, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[ty.lo[oy] * iw..(ty.lo[oy] + 1) * iw];
            let r1 = &src[ty.hi[oy] * iw..(ty.hi[oy] + 1) * iw];
            let (a, b) = (ty.wlo[oy], ty.whi[oy]);
            for ox in 0..ow {
                let (l, h) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[l] * tx.wlo[ox] + r0[h] * tx.whi[ox];
                let bot = r1[l] * tx.wlo[ox] + r1[h] * tx.whi[ox];
                dst[oy * ow + ox] = a * top + b * bot;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Element>(
    dout: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = taps::<T>(ih, oh);
    let tx = taps::<T>(iw, ow);
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * ih * iw..(p + 1) * ih * iw];
        for oy in 0..oh {
            let (a, b) = (ty.wlo[oy], ty.whi[oy]);
            let (r0, r1) = (ty.lo[oy] * iw, ty.hi[oy] * iw);
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                let (l, h) = (tx.lo[ox], tx.hi[ox]);
                let (wl, wh) = (tx.wlo[ox] * v, tx.whi[ox] * v);
                d[r0 + l] = d[r0 + l] + a * wl;
                d[r0 + h] = d[r0 + h] + a * wh;
                d[r1 + l] = d[r1 + l] + b * wl;
                d[r1 + h] = d[r1 + h] + b * wh;
            }
        }
    }
}

/// Softmax over the channel axis of an `[N, C, H, W]` buffer, with optional
/// division of the logits by `temperature`.
pub(crate) fn softmax_channels<T: Element>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    temperature: T,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let inv_t = T::one() / temperature;
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(x[base + k * hw + p] * inv_t);
            }
            let mut s = T::zero();
            for k in 0..c {
                let e = (x[base + k * hw + p] * inv_t - m).exp();
                out[base + k * hw + p] = e;
                s = s + e;
            }
            for k in 0..c {
                out[base + k * hw + p] = out[base + k * hw + p] / s;
            }
        }
    }
    out
}

pub(crate) const KL_EPS: f64 = 1e-12;

pub(crate) fn kl_forward<T: Element>(p: &[T], q: &[T], (n, c, hw): (usize, usize, usize)) -> Vec<T> {
    let eps = T::cast(KL_EPS);
    let mut out = vec![T::zero(); n * hw];
    for i in 0..n {
        for px in 0..hw {
            let mut acc = T::zero();
            for k in 0..c {
                let idx = (i * c + k) * hw + px;
                let pv = p[idx];
                // Clamping both sides keeps KL(p, p) exactly zero.
                if pv > T::zero() {
                    acc = acc + pv * (pv.max(eps) / q[idx].max(eps)).ln();
                }
            }
            out[i * hw + px] = acc;
        }
    }
    out
}
