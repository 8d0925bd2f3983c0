//! Raw numeric kernels behind the tensor ops.
//!
//! Everything here works on flat `f64` slices. Parallel paths split the
//! OUTPUT into disjoint chunks whose values do not depend on the schedule,
//! so results are bitwise identical at any thread count.

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which the serial path is used.
const PAR_THRESHOLD: usize = 64 * 1024;

/// C\[m,n\] = A\[m,k\] * B\[k,n\], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
            matmul_row(&a[i * k..(i + 1) * k], b, k, n, crow);
        });
    } else {
        for i in 0..m {
            matmul_row(&a[i * k..(i + 1) * k], b, k, n, &mut c[i * n..(i + 1) * n]);
        }
    }
}

#[inline]
fn matmul_row(arow: &[f64], b: &[f64], k: usize, n: usize, crow: &mut [f64]) {
    crow.fill(0.0);
    for p in 0..k {
        let av = arow[p];
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..p * n + n];
        for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
            *cv += av * bv;
        }
    }
}

/// C = A^T * B where A is \[k,m\], B is \[k,n\] -> C \[m,n\].
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    c.fill(0.0);
    // accumulate rank-1 updates in fixed p order; deterministic
    for p in 0..k {
        let arow = &a[p * m..p * m + m];
        let brow = &b[p * n..p * n + n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..i * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// C = A * B^T where A is \[m,k\], B is \[n,k\] -> C \[m,n\].
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for i in 0..m {
            body(i, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = inp + 2 * pad;
    if span < k {
        return None;
    }
    let steps = span - k;
    if steps % stride != 0 {
        return None;
    }
    Some(steps / stride + 1)
}

/// im2col for one image \[C,H,W\] -> \[C*kh*kw, OH*OW\] (row-major).
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let ospatial = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * ospatial..][..ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let orow = &mut row[oy * ow..oy * ow + ow];
                    if iy < 0 || iy >= h as isize {
                        orow.fill(0.0);
                        continue;
                    }
                    let irow = &plane[iy as usize * w..iy as usize * w + w];
                    for (ox, ov) in orow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *ov = if ix < 0 || ix >= w as isize { 0.0 } else { irow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column representation back to image layout (gradient of im2col).
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    debug_assert_eq!(x.len(), c * h * w);
    x.fill(0.0);
    let ospatial = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * ospatial..][..ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &mut plane[iy as usize * w..iy as usize * w + w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            irow[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv2d forward: x \[B,C,H,W\], w \[O,C,kh,kw\] -> y \[B,O,OH,OW\].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    y: &mut [f64],
) {
    let ckk = c * kh * kw;
    let ospatial = oh * ow;
    let xstride = c * h * wd;
    let ystride = o * ospatial;
    let work = |bi: usize, yimg: &mut [f64]| {
        let mut cols = vec![0.0; ckk * ospatial];
        im2col(&x[bi * xstride..(bi + 1) * xstride], c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
        matmul(w, &cols, o, ckk, ospatial, yimg);
    };
    if b > 1 {
        y.par_chunks_mut(ystride).enumerate().for_each(|(bi, yimg)| work(bi, yimg));
    } else {
        work(0, y);
    }
}

/// Batched conv2d backward. Returns (dx, dw).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ckk = c * kh * kw;
    let ospatial = oh * ow;
    let xstride = c * h * wd;
    let ystride = o * ospatial;

    // per-item contributions computed in parallel, reduced in fixed order
    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut cols = vec![0.0; ckk * ospatial];
            im2col(&x[bi * xstride..(bi + 1) * xstride], c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
            let dyi = &dy[bi * ystride..(bi + 1) * ystride];
            // dW_i = dY_i [o, os] * cols^T [os, ckk]
            let mut dwi = vec![0.0; o * ckk];
            matmul_nt(dyi, &cols, o, ospatial, ckk, &mut dwi);
            // dcols = W^T [ckk, o] * dY_i [o, os]
            let mut dcols = vec![0.0; ckk * ospatial];
            matmul_tn(w, dyi, o, ckk, ospatial, &mut dcols);
            let mut dxi = vec![0.0; xstride];
            col2im(&dcols, c, h, wd, kh, kw, stride, pad, oh, ow, &mut dxi);
            (dxi, dwi)
        })
        .collect();

    let mut dx = vec![0.0; b * xstride];
    let mut dw = vec![0.0; o * ckk];
    for (bi, (dxi, dwi)) in per_item.into_iter().enumerate() {
        dx[bi * xstride..(bi + 1) * xstride].copy_from_slice(&dxi);
        for (acc, v) in dw.iter_mut().zip(dwi.iter()) {
            *acc += v;
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut c = vec![0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_small_hand() {
        // [1,2] * [[3],[4]] = [11]
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![0.0; 1];
        matmul(&a, &b, 1, 2, 1, &mut c);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        // cross the parallel threshold and compare against the naive triple loop
        let m = 70;
        let k = 40;
        let n = 50;
        let mut rng = crate::tensor::rng::RngState::new(5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1), None); // (8+2-3)=7 not divisible by 2
        assert_eq!(conv_out_dim(16, 3, 2, 1), None);
        assert_eq!(conv_out_dim(9, 3, 2, 1), Some(5));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let (c, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 1, 1);
        let oh = conv_out_dim(h, kh, s, p).unwrap();
        let ow = conv_out_dim(w, kw, s, p).unwrap();
        let mut rng = crate::tensor::rng::RngState::new(11);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..c * kh * kw * oh * ow).map(|_| rng.normal()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, oh, ow, &mut cols);
        let mut xband = vec![0.0; x.len()];
        col2im(&y, c, h, w, kh, kw, s, p, oh, ow, &mut xband);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(xband.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
