//! Row-major matrix products on top of `matrixmultiply`, plus the im2col
//! lowering used by the convolution layers.

use super::Batch;

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] += a^T * b` with `a` stored as `[k x m]`.
pub(crate) fn matmul_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above, `a` is read column-wise.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] += a * b^T` with `b` stored as `[n x k]`.
pub(crate) fn matmul_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above, `b` is read column-wise.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows are output pixels, columns are `(ky, kx, channel)` taps.
pub(crate) fn im2col(x: &Batch, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let c = x.c;
    let kk = k * k * c;
    let mut col = vec![0.0; x.n * x.h * x.w * kk];
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let row = ((b * x.h + y) * x.w + xx) * kk;
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let src = ((b * x.h + iy as usize) * x.w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        col[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to pixels.
pub(crate) fn col2im(dcol: &[f64], x: &Batch, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let c = x.c;
    let kk = k * k * c;
    let mut gx = vec![0.0; x.data.len()];
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let row = ((b * x.h + y) * x.w + xx) * kk;
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let dst = ((b * x.h + iy as usize) * x.w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            gx[dst + ch] += dcol[src + ch];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * cols];
        for i in 0..r {
            for j in 0..cols {
                t[j * r + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn products_match_naive_loops() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        matmul_acc(m, k, n, &a, &b, &mut c);
        let mut c_tn = vec![0.0; m * n];
        matmul_tn_acc(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);
        let mut c_nt = vec![0.0; m * n];
        matmul_nt_acc(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        for i in 0..m * n {
            assert!((c[i] - expect[i]).abs() < 1e-12);
            assert!((c_tn[i] - expect[i]).abs() < 1e-12);
            assert!((c_nt[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = Batch::new(2, 3, 4, 2, (0..48).map(|i| i as f64 * 0.1 - 2.0).collect()).unwrap();
        let col = im2col(&x, 3);
        let y: Vec<f64> = (0..col.len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &x, 3);
        let rhs: f64 = x.data.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
