//! Single-direction GRU with explicit backpropagation through time.
//!
//! Gate order in the stacked weights is (reset, update, candidate):
//!
//! ```text
//! gx = Wx x_t + bx,  gh = Wh h_{t-1} + bh          (3H each)
//! r  = sigmoid(gx_r + gh_r)
//! z  = sigmoid(gx_z + gh_z)
//! n  = tanh(gx_n + r * gh_n)
//! h_t = (1 - z) * n + z * h_{t-1}
//! ```

use super::linalg::{axpy, matvec_bias, sigmoid};
use crate::tensor::Mat;

pub struct GruParams<'a> {
    pub wx: &'a [f64],
    pub wh: &'a [f64],
    pub bx: &'a [f64],
    pub bh: &'a [f64],
}

pub struct GruGrads<'a> {
    pub wx: &'a mut [f64],
    pub wh: &'a mut [f64],
    pub bx: &'a mut [f64],
    pub bh: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct GruCache {
    /// h_0 .. h_T, h_0 = 0.
    states: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
    gh_n: Mat,
}

impl GruCache {
    /// Hidden states h_1 .. h_T as a T x H matrix.
    pub fn outputs(&self) -> Mat {
        let h = self.states.cols;
        Mat {
            rows: self.states.rows - 1,
            cols: h,
            data: self.states.data[h..].to_vec(),
        }
    }
}

pub fn forward(p: &GruParams<'_>, x: &Mat, hidden: usize) -> GruCache {
    let t_len = x.rows;
    let h3 = 3 * hidden;
    let mut states = Mat::zeros(t_len + 1, hidden);
    let mut r = Mat::zeros(t_len, hidden);
    let mut z = Mat::zeros(t_len, hidden);
    let mut n = Mat::zeros(t_len, hidden);
    let mut gh_n = Mat::zeros(t_len, hidden);
    let mut gx = vec![0.0; h3];
    let mut gh = vec![0.0; h3];
    for t in 0..t_len {
        matvec_bias(p.wx, x.row(t), p.bx, &mut gx);
        let (prev, next) = states.data.split_at_mut((t + 1) * hidden);
        let h_prev = &prev[t * hidden..];
        let h_next = &mut next[..hidden];
        matvec_bias(p.wh, h_prev, p.bh, &mut gh);
        for j in 0..hidden {
            let rj = sigmoid(gx[j] + gh[j]);
            let zj = sigmoid(gx[hidden + j] + gh[hidden + j]);
            let ghn = gh[2 * hidden + j];
            let nj = (gx[2 * hidden + j] + rj * ghn).tanh();
            h_next[j] = (1.0 - zj) * nj + zj * h_prev[j];
            r.row_mut(t)[j] = rj;
            z.row_mut(t)[j] = zj;
            n.row_mut(t)[j] = nj;
            gh_n.row_mut(t)[j] = ghn;
        }
    }
    GruCache { states, r, z, n, gh_n }
}

/// Backpropagates `d_out` (gradient w.r.t. h_1..h_T) and returns the
/// gradient w.r.t. the inputs.
pub fn backward(p: &GruParams<'_>, g: &mut GruGrads<'_>, x: &Mat, cache: &GruCache, d_out: &Mat) -> Mat {
    let t_len = x.rows;
    let hidden = cache.r.cols;
    let in_dim = x.cols;
    let mut dx = Mat::zeros(t_len, in_dim);
    let mut dh_next = vec![0.0; hidden];
    let mut dgx = vec![0.0; 3 * hidden];
    let mut dgh = vec![0.0; 3 * hidden];
    for t in (0..t_len).rev() {
        let h_prev = cache.states.row(t);
        let (r, z, n, ghn) = (cache.r.row(t), cache.z.row(t), cache.n.row(t), cache.gh_n.row(t));
        let mut dh_prev = vec![0.0; hidden];
        for j in 0..hidden {
            let dh = d_out.row(t)[j] + dh_next[j];
            let dn = dh * (1.0 - z[j]);
            let dz = dh * (h_prev[j] - n[j]);
            dh_prev[j] = dh * z[j];
            let da_n = dn * (1.0 - n[j] * n[j]);
            let dr = da_n * ghn[j];
            let da_r = dr * r[j] * (1.0 - r[j]);
            let da_z = dz * z[j] * (1.0 - z[j]);
            dgx[j] = da_r;
            dgx[hidden + j] = da_z;
            dgx[2 * hidden + j] = da_n;
            dgh[j] = da_r;
            dgh[hidden + j] = da_z;
            dgh[2 * hidden + j] = da_n * r[j];
        }
        let xr = x.row(t);
        let dxr = dx.row_mut(t);
        for o in 0..3 * hidden {
            let gxo = dgx[o];
            if gxo != 0.0 {
                g.bx[o] += gxo;
                axpy(gxo, xr, &mut g.wx[o * in_dim..(o + 1) * in_dim]);
                axpy(gxo, &p.wx[o * in_dim..(o + 1) * in_dim], dxr);
            }
            let gho = dgh[o];
            if gho != 0.0 {
                g.bh[o] += gho;
                axpy(gho, h_prev, &mut g.wh[o * hidden..(o + 1) * hidden]);
                axpy(gho, &p.wh[o * hidden..(o + 1) * hidden], &mut dh_prev);
            }
        }
        dh_next = dh_prev;
    }
    dx
}
