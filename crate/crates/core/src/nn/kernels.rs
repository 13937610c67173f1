//! Raw loops behind the differentiable ops. All buffers are row-major.

use crate::scalar::Scalar;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * *bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * *bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Fixed-order dot product with eight partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    acc.iter().fold(s, |t, v| t + *v)
}

/// 3×3 depth-wise convolution, zero padding 1, stride 1. `x`: `[C,H,W]`,
/// `w`: `[C,3,3]`.
pub fn dwconv3<T: Scalar>(x: &[T], w: &[T], c: usize, h: usize, wd: usize, out: &mut [T]) {
    for ch in 0..c {
        let xc = &x[ch * h * wd..(ch + 1) * h * wd];
        let oc = &mut out[ch * h * wd..(ch + 1) * h * wd];
        let k = &w[ch * 9..ch * 9 + 9];
        oc.iter_mut().for_each(|v| *v = T::zero());
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = k[ky * 3 + kx];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (wd as isize - dx).min(wd as isize) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let orow = &mut oc[y * wd + x0..y * wd + x1];
                    let srow = &xc[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                    for (o, s) in orow.iter_mut().zip(srow) {
                        *o += kv * *s;
                    }
                }
            }
        }
    }
}

/// Gradients of [`dwconv3`] with respect to input and weights, accumulated.
#[allow(clippy::too_many_arguments)]
pub fn dwconv3_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    c: usize,
    h: usize,
    wd: usize,
    dx_out: Option<&mut [T]>,
    dw_out: Option<&mut [T]>,
) {
    let mut dx_out = dx_out;
    let mut dw_out = dw_out;
    for ch in 0..c {
        let base = ch * h * wd;
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = w[ch * 9 + ky * 3 + kx];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (wd as isize - dx).min(wd as isize) as usize;
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let goff = base + y * wd;
                    let soff = base + sy * wd;
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        let gv = g[goff + xx];
                        acc += gv * x[soff + sx];
                        if let Some(d) = dx_out.as_deref_mut() {
                            d[soff + sx] += kv * gv;
                        }
                    }
                }
                if let Some(d) = dw_out.as_deref_mut() {
                    d[ch * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Output extent of a 3×3, padding-1 convolution.
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Unfolds `[C,H,W]` into `[C*9, Ho*Wo]` patches for a 3×3 padding-1 conv.
pub fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize) -> Vec<T> {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let mut cols = vec![T::zero(); c * 9 * ho * wo];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[ch * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`], accumulated into `dx`.
pub fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[ch * h * w + iy as usize * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, n, k, &a, ta, &b, tb, &mut c, false);
                let want = naive(m, n, k, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dwconv_center_tap_is_identity() {
        let x: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64).collect();
        let mut w = vec![0.0; 18];
        w[4] = 1.0;
        w[13] = 1.0;
        let mut out = vec![0.0; 40];
        dwconv3(&x, &w, 2, 4, 5, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn im2col_center_row_is_input_at_stride_one() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let cols = im2col3(&x, 1, 3, 4, 1);
        assert_eq!(&cols[4 * 12..5 * 12], &x[..]);
    }
}
