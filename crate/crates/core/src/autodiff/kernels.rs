//! Slice-level forward/backward kernels used by the graph ops.

use crate::real::{gemm, Layout, Real};

pub(crate) fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// `dx = p * (dy - <dy, p>)` row by row, written over `dy`.
pub(crate) fn softmax_rows_backward<T: Real>(p: &[T], dy: &mut [T], cols: usize) {
    for (prow, grow) in p.chunks(cols).zip(dy.chunks_mut(cols)) {
        let dot: T = prow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
        for (g, &pv) in grow.iter_mut().zip(prow) {
            *g = pv * (*g - dot);
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Returns `(y, mean, rstd)` per row.
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::of(cols as f64);
    let eps = T::of(LN_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

/// Accumulates into whichever of `dx`, `dgain`, `dbias` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    cols: usize,
    mut dx: Option<&mut [T]>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let n = T::of(cols as f64);
    let mut xhat = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for (row, (xr, gr)) in x.chunks(cols).zip(dy.chunks(cols)).enumerate() {
        let (mean, rstd) = (means[row], rstds[row]);
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gain[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..cols {
                dg[j] += gr[j] * xhat[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..cols {
                db[j] += gr[j];
            }
        }
        if let Some(dxa) = dx.as_deref_mut() {
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat
                .iter()
                .zip(&xhat)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                / n;
            let out = &mut dxa[row * cols..(row + 1) * cols];
            for j in 0..cols {
                out[j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
}

/// 3x3, stride 1, zero padding 1. `cols` is `[c_in*9, h*w]`.
pub(crate) fn im2col3<T: Real>(x: &[T], c_in: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * 9 * hw];
    for ci in 0..c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`], accumulating into `dx`.
pub(crate) fn col2im3<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[lq, d]`, `k` and `v` are `[lk, d]`; head `h` owns columns
/// `h*dh..(h+1)*dh`. Returns the `[lq, d]` output and the stacked
/// `[heads, lq, lk]` probabilities.
pub(crate) fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let alpha = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); lq * d];
    let mut probs = vec![T::zero(); heads * lq * lk];
    let rm = Layout::row_major(d);
    let sm = Layout::row_major(lk);
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(lq, dh, lk, alpha, q, rm.at(h * dh), k, rm.at(h * dh).t(), T::zero(), p, sm);
        softmax_rows(p, lk);
        gemm(lq, lk, dh, T::one(), p, sm, v, rm.at(h * dh), T::zero(), &mut out, rm.at(h * dh));
    }
    (out, probs)
}

/// Gradients of [`attention`]. Each target is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = d / heads;
    let alpha = T::one() / T::of(dh as f64).sqrt();
    let rm = Layout::row_major(d);
    let sm = Layout::row_major(lk);
    let mut ds = vec![T::zero(); lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        let col = rm.at(h * dh);
        if let Some(dv) = dv.as_deref_mut() {
            // dV_h += P^T dO_h
            gemm(lk, lq, dh, T::one(), p, sm.t(), dout, col, T::one(), dv, col);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP = dO_h V_h^T, then dS = softmax backward.
        gemm(lq, dh, lk, T::one(), dout, col, v, col.t(), T::zero(), &mut ds, sm);
        softmax_rows_backward(p, &mut ds, lk);
        if let Some(dq) = dq.as_deref_mut() {
            gemm(lq, lk, dh, alpha, &ds, sm, k, col, T::one(), dq, col);
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(lk, lq, dh, alpha, &ds, sm.t(), q, col, T::one(), dk, col);
        }
    }
}
