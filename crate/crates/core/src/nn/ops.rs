//! Forward and backward kernels for the layers used by [`super::Network`].
//!
//! Activations are NCHW `Array4`s in standard layout. Convolutions are
//! lowered to a single GEMM per call through im2col.

use ndarray::{Array2, Array4, ArrayView2, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

pub struct ConvCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize, usize),
}

fn weight_matrix<'a, T: Scalar>(w: &'a ArrayViewD<'a, T>, g: &ConvGeom) -> ArrayView2<'a, T> {
    w.view()
        .into_shape_with_order((g.out_c, g.fan_in()))
        .expect("conv weight is contiguous")
}

fn im2col<T: Scalar>(x: &Array4<T>, g: &ConvGeom) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let rows = c * k * k;
    let cols = b * ho * wo;
    let mut out = vec![T::zero(); rows * cols];
    let xs = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for bi in 0..b {
                    let xbase = (bi * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xs[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                        let dst = &mut orow[bi * ho * wo + oh * wo..bi * ho * wo + (oh + 1) * wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                *d = xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

fn col2im<T: Scalar>(cols: &Array2<T>, g: &ConvGeom, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, c, h, w) = dim;
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let ncols = b * ho * wo;
    let mut out = vec![T::zero(); b * c * h * w];
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let crow = &cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let xbase = (bi * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &crow[bi * ho * wo + oh * wo..bi * ho * wo + (oh + 1) * wo];
                        let xrow = &mut out[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                xrow[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dim, out).expect("col2im shape")
}

pub fn conv_forward<T: Scalar>(
    x: &Array4<T>,
    weight: &ArrayViewD<'_, T>,
    g: &ConvGeom,
) -> (Array4<T>, ConvCache<T>) {
    let (b, _, h, w) = x.dim();
    let (ho, wo) = g.out_hw(h, w);
    let cols = im2col(x, g);
    let wm = weight_matrix(weight, g);
    let prod = wm.dot(&cols);
    let hw = ho * wo;
    let ps = prod.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); b * g.out_c * hw];
    for o in 0..g.out_c {
        for bi in 0..b {
            out[(bi * g.out_c + o) * hw..(bi * g.out_c + o + 1) * hw]
                .copy_from_slice(&ps[o * b * hw + bi * hw..o * b * hw + (bi + 1) * hw]);
        }
    }
    (
        Array4::from_shape_vec((b, g.out_c, ho, wo), out).expect("conv output shape"),
        ConvCache {
            cols,
            in_dim: x.dim(),
        },
    )
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub fn conv_backward<T: Scalar>(
    dout: &Array4<T>,
    weight: &ArrayViewD<'_, T>,
    g: &ConvGeom,
    cache: &ConvCache<T>,
    want_input: bool,
    want_weight: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>) {
    let (b, co, ho, wo) = dout.dim();
    let hw = ho * wo;
    let ds = dout.as_slice().expect("standard layout");
    let mut d2 = vec![T::zero(); co * b * hw];
    for o in 0..co {
        for bi in 0..b {
            d2[o * b * hw + bi * hw..o * b * hw + (bi + 1) * hw]
                .copy_from_slice(&ds[(bi * co + o) * hw..(bi * co + o + 1) * hw]);
        }
    }
    let d2 = Array2::from_shape_vec((co, b * hw), d2).expect("grad shape");
    let dw = want_weight.then(|| {
        let dwm = d2.dot(&cache.cols.t());
        let [a, bb, c, d] = g.weight_shape();
        dwm.into_shape_with_order((a, bb, c, d)).expect("weight grad shape")
    });
    let dx = want_input.then(|| {
        let wm = weight_matrix(weight, g);
        let dcols = wm.t().dot(&d2);
        col2im(&dcols.as_standard_layout().to_owned(), g, cache.in_dim)
    });
    (dx, dw)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    /// Per-channel batch mean and unbiased variance; only in batch-stat mode.
    pub stats: Option<(Vec<T>, Vec<T>)>,
}

/// Batch normalisation. With `running = None` batch statistics are used;
/// otherwise the supplied running mean and variance.
pub fn bn_forward<T: Scalar>(
    x: &Array4<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Array4<T>, BnCache<T>) {
    let (b, c, h, w) = x.dim();
    let hw = h * w;
    let n = b * hw;
    let xs = x.as_slice().expect("standard layout");
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut stats = None;
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            let nn = T::lit(n as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / nn;
                let mut v = T::zero();
                for bi in 0..b {
                    for &xv in &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                        let d = xv - m;
                        v += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = v / nn;
            }
            let unbiased = if n > 1 {
                var.iter()
                    .map(|&v| v * nn / T::lit((n - 1) as f64))
                    .collect()
            } else {
                var.clone()
            };
            stats = Some((mean.clone(), unbiased));
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
            let (m, is, gm, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for ((xh, o), &xv) in xhat[r.clone()]
                .iter_mut()
                .zip(out[r.clone()].iter_mut())
                .zip(&xs[r])
            {
                *xh = (xv - m) * is;
                *o = gm * *xh + bt;
            }
        }
    }
    (
        Array4::from_shape_vec((b, c, h, w), out).expect("bn shape"),
        BnCache {
            xhat,
            inv_std,
            batch_stats: running.is_none(),
            stats,
        },
    )
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn bn_backward<T: Scalar>(
    dout: &Array4<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    want_input: bool,
) -> (Option<Array4<T>>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = dout.dim();
    let hw = h * w;
    let n = T::lit((b * hw) as f64);
    let ds = dout.as_slice().expect("standard layout");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
            for (&d, &xh) in ds[r.clone()].iter().zip(&cache.xhat[r]) {
                dgamma[ci] += d * xh;
                dbeta[ci] += d;
            }
        }
    }
    let dx = want_input.then(|| {
        let mut dx = vec![T::zero(); ds.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                let g = gamma[ci];
                let is = cache.inv_std[ci];
                if cache.batch_stats {
                    // d/dx of (x - mean) * inv_std with batch statistics.
                    let sum_dxhat = dbeta[ci] * g;
                    let sum_dxhat_xhat = dgamma[ci] * g;
                    for ((o, &d), &xh) in dx[r.clone()]
                        .iter_mut()
                        .zip(&ds[r.clone()])
                        .zip(&cache.xhat[r])
                    {
                        *o = is / n * (n * d * g - sum_dxhat - xh * sum_dxhat_xhat);
                    }
                } else {
                    for (o, &d) in dx[r.clone()].iter_mut().zip(&ds[r]) {
                        *o = d * g * is;
                    }
                }
            }
        }
        Array4::from_shape_vec((b, c, h, w), dx).expect("bn grad shape")
    });
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut Array4<T>, out: &Array4<T>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let hw = T::lit((h * w) as f64);
    let xs = x.as_slice().expect("standard layout");
    Array2::from_shape_fn((b, c), |(bi, ci)| {
        xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w]
            .iter()
            .copied()
            .sum::<T>()
            / hw
    })
}

pub fn global_avg_pool_backward<T: Scalar>(d: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (_, _, h, w) = dim;
    let hw = T::lit((h * w) as f64);
    Array4::from_shape_fn(dim, |(bi, ci, _, _)| d[[bi, ci]] / hw)
}
