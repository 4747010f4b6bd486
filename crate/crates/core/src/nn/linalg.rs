//! Dense kernels over row-major slices. Weights are stored out x in.

use crate::tensor::Mat;

/// out[t] = W x[t] + b for every row of `x`.
pub fn affine_rows(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out_dim = b.len();
    debug_assert_eq!(w.len(), out_dim * x.cols);
    let mut out = Mat::zeros(x.rows, out_dim);
    for t in 0..x.rows {
        let xr = x.row(t);
        for (o, dst) in out.row_mut(t).iter_mut().enumerate() {
            *dst = b[o] + dot(&w[o * x.cols..(o + 1) * x.cols], xr);
        }
    }
    out
}

/// Accumulates dW += dy^T x, db += sum_t dy, and returns dx = dy W.
pub fn affine_rows_backward(
    x: &Mat,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Mat> {
    let in_dim = x.cols;
    let mut dx = want_dx.then(|| Mat::zeros(x.rows, in_dim));
    for t in 0..x.rows {
        let xr = x.row(t);
        let dyr = dy.row(t);
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
            if let Some(dx) = dx.as_mut() {
                axpy(g, &w[o * in_dim..(o + 1) * in_dim], dx.row_mut(t));
            }
        }
    }
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// y = W x + b with W stored out x in.
#[inline]
pub fn matvec_bias(w: &[f64], x: &[f64], b: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * n..(o + 1) * n], x);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn reversed_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for t in 0..m.rows {
        out.row_mut(t).copy_from_slice(m.row(m.rows - 1 - t));
    }
    out
}
