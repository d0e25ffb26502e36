//! Batched CNN kernels: same-padded convolution via im2col, batch norm,
//! ReLU and 2x2 max pooling. Reductions over the batch run in fixed-size
//! chunks summed in order, so results do not depend on the thread count.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::descriptor::pooled;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const BN_EPS: f64 = 1e-5;
const CHUNK: usize = 4;

fn im2col<T: Real>(x: ArrayView3<'_, T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let off = kj as isize - p;
                let j0 = (-off).max(0) as usize;
                let j1 = (w as isize - off).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + ki as isize - p;
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        continue;
                    }
                    let s0 = si as usize * w;
                    let line = &mut dst[i * w..(i + 1) * w];
                    let from = (s0 as isize + j0 as isize + off) as usize;
                    line[j0..j1].copy_from_slice(&plane[from..from + (j1 - j0)]);
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, hw), col).expect("im2col shape")
}

fn col2im<T: Real>(col: ArrayView2<'_, T>, k: usize, mut dx: ArrayViewMut3<'_, T>) {
    let (c, h, w) = dx.dim();
    let hw = h * w;
    let col = col.as_standard_layout();
    let src = col.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    let p = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let line_src = &src[row * hw..(row + 1) * hw];
                let off = kj as isize - p;
                let j0 = (-off).max(0) as usize;
                let j1 = (w as isize - off).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + ki as isize - p;
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        continue;
                    }
                    let base = (si as usize * w) as isize + off;
                    for j in j0..j1 {
                        plane[(base + j as isize) as usize] += line_src[i * w + j];
                    }
                }
            }
        }
    }
}

/// `x`: (B, C, H, W); `w`: (F, C*k*k); output (B, F, H, W).
pub fn conv_forward<T: Real>(x: &Array4<T>, w: ArrayView2<'_, T>, b: &Array1<T>, k: usize) -> Array4<T> {
    let (bs, _, h, wd) = x.dim();
    let f = w.nrows();
    let mut out = Array4::zeros((bs, f, h, wd));
    Zip::from(out.outer_iter_mut())
        .and(x.outer_iter())
        .par_for_each(|o, xs| {
            let col = im2col(xs, k);
            let mut o2 = o.into_shape_with_order((f, h * wd)).expect("contiguous output");
            for (mut row, &bias) in o2.outer_iter_mut().zip(b.iter()) {
                row.fill(bias);
            }
            general_mat_mul(T::one(), &w, &col, T::one(), &mut o2);
        });
    out
}

/// Returns (dW, db, dx). `dx` is skipped for the first layer.
pub fn conv_backward<T: Real>(
    x: &Array4<T>,
    w: ArrayView2<'_, T>,
    k: usize,
    dz: &Array4<T>,
    need_dx: bool,
) -> (Array2<T>, Array1<T>, Option<Array4<T>>) {
    let (bs, c, h, wd) = x.dim();
    let f = w.nrows();
    let hw = h * wd;
    let starts: Vec<usize> = (0..bs).step_by(CHUNK).collect();
    let partials: Vec<(Array2<T>, Array1<T>)> = starts
        .par_iter()
        .map(|&s0| {
            let mut dw = Array2::zeros(w.raw_dim());
            let mut db = Array1::zeros(f);
            for s in s0..(s0 + CHUNK).min(bs) {
                let col = im2col(x.index_axis(Axis(0), s), k);
                let dzs = dz.index_axis(Axis(0), s);
                let dzs = dzs.to_shape((f, hw)).expect("dz layout");
                general_mat_mul(T::one(), &dzs, &col.t(), T::one(), &mut dw);
                for (acc, row) in db.iter_mut().zip(dzs.outer_iter()) {
                    *acc += row.sum();
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Array2::zeros(w.raw_dim());
    let mut db = Array1::zeros(f);
    for (pw, pb) in partials {
        dw += &pw;
        db += &pb;
    }
    let dx = need_dx.then(|| {
        let mut dx = Array4::zeros((bs, c, h, wd));
        Zip::from(dx.outer_iter_mut())
            .and(dz.outer_iter())
            .par_for_each(|dxs, dzs| {
                let dzs = dzs.to_shape((f, hw)).expect("dz layout");
                let dcol = w.t().dot(&dzs);
                col2im(dcol.view(), k, dxs);
            });
        dx
    });
    (dw, db, dx)
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn bn_train_forward<T: Real>(z: &Array4<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array4<T>, BnCache<T>) {
    let f = z.dim().1;
    let mut xhat = Array4::zeros(z.raw_dim());
    let mut y = Array4::zeros(z.raw_dim());
    let mut inv_std = Vec::with_capacity(f);
    let mut means = Vec::with_capacity(f);
    let mut vars = Vec::with_capacity(f);
    for ch in 0..f {
        let zc = z.index_axis(Axis(1), ch);
        let n = zc.len() as f64;
        let mean = zc.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = zc.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        let is = T::of(1.0 / (var + BN_EPS).sqrt());
        let m = T::of(mean);
        Zip::from(xhat.index_axis_mut(Axis(1), ch))
            .and(y.index_axis_mut(Axis(1), ch))
            .and(zc)
            .for_each(|xh, yv, &zv| {
                *xh = (zv - m) * is;
                *yv = gamma[ch] * *xh + beta[ch];
            });
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (y, BnCache { xhat, inv_std, mean: means, var: vars })
}

pub fn bn_eval_forward<T: Real>(
    z: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
) -> Array4<T> {
    let mut y = z.clone();
    for (ch, mut yc) in y.axis_iter_mut(Axis(1)).enumerate() {
        let scale = gamma[ch] / (running_var[ch] + T::of(BN_EPS)).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        yc.mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Returns (dz, dgamma, dbeta) for batch-statistics normalisation.
pub fn bn_backward<T: Real>(dy: &Array4<T>, cache: &BnCache<T>, gamma: &Array1<T>) -> (Array4<T>, Array1<T>, Array1<T>) {
    let f = dy.dim().1;
    let mut dz = Array4::zeros(dy.raw_dim());
    let mut dgamma = Array1::zeros(f);
    let mut dbeta = Array1::zeros(f);
    for ch in 0..f {
        let dyc = dy.index_axis(Axis(1), ch);
        let xh = cache.xhat.index_axis(Axis(1), ch);
        let n = dyc.len() as f64;
        let mut s_dy = 0.0;
        let mut s_dyx = 0.0;
        Zip::from(&dyc).and(&xh).for_each(|&d, &x| {
            s_dy += d.f64();
            s_dyx += (d * x).f64();
        });
        dgamma[ch] = T::of(s_dyx);
        dbeta[ch] = T::of(s_dy);
        let scale = gamma[ch] * cache.inv_std[ch];
        let (m_dy, m_dyx) = (T::of(s_dy / n), T::of(s_dyx / n));
        Zip::from(dz.index_axis_mut(Axis(1), ch))
            .and(&dyc)
            .and(&xh)
            .for_each(|o, &d, &x| *o = scale * (d - m_dy - x * m_dyx));
    }
    (dz, dgamma, dbeta)
}

pub fn relu<T: Real>(mut x: Array4<T>) -> Array4<T> {
    x.mapv_inplace(|v| v.max(T::zero()));
    x
}

/// `da` masked by the positive part of the post-ReLU activation.
pub fn relu_backward<T: Real>(mut da: Array4<T>, act: &Array4<T>) -> Array4<T> {
    Zip::from(&mut da).and(act).for_each(|d, &a| {
        if a <= T::zero() {
            *d = T::zero();
        }
    });
    da
}

fn pool_stride(n: usize) -> usize {
    if n < 2 {
        1
    } else {
        2
    }
}

/// 2x2 max pool; the argmax (first in row-major order on ties) is returned
/// as an in-plane flat index.
pub fn maxpool_forward<T: Real>(a: &Array4<T>) -> (Array4<T>, Array4<u32>) {
    let (bs, f, h, w) = a.dim();
    let (ho, wo) = (pooled(h), pooled(w));
    let (sh, sw) = (pool_stride(h), pool_stride(w));
    let mut out = Array4::zeros((bs, f, ho, wo));
    let mut idx = Array4::zeros((bs, f, ho, wo));
    Zip::from(out.outer_iter_mut())
        .and(idx.outer_iter_mut())
        .and(a.outer_iter())
        .par_for_each(|mut o, mut ix, src| {
            for ch in 0..f {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = (i * sh, j * sw);
                        for di in 0..sh {
                            for dj in 0..sw {
                                let p = (i * sh + di, j * sw + dj);
                                if src[[ch, p.0, p.1]] > src[[ch, best.0, best.1]] {
                                    best = p;
                                }
                            }
                        }
                        o[[ch, i, j]] = src[[ch, best.0, best.1]];
                        ix[[ch, i, j]] = (best.0 * w + best.1) as u32;
                    }
                }
            }
        });
    (out, idx)
}

pub fn maxpool_backward<T: Real>(dp: &Array4<T>, idx: &Array4<u32>, in_shape: (usize, usize, usize, usize)) -> Array4<T> {
    let mut da = Array4::zeros(in_shape);
    let w = in_shape.3;
    Zip::from(da.outer_iter_mut())
        .and(dp.outer_iter())
        .and(idx.outer_iter())
        .par_for_each(|mut d, g, ix| {
            for ((ch, i, j), &flat) in ix.indexed_iter() {
                let flat = flat as usize;
                d[[ch, flat / w, flat % w]] += g[[ch, i, j]];
            }
        });
    da
}
