//! Dense kernels shared by the tape primitives.
//!
//! Accumulation order inside every kernel is fixed (the vectorizable loop
//! runs over independent output elements), so results are bitwise
//! reproducible regardless of thread count or SIMD width.

use crate::scalar::Scalar;

/// c[m,n] = a[m,k] * b[k,n], row-major.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// c[m,n] += a[m,k] * b[k,n]. The j-loop is the vector axis.
pub fn matmul_acc<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Patch extraction for cross-correlation: one image (C,H,W) into a
/// (C*kh*kw) x (out_h*out_w) matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<S> {
    let patch = out_h * out_w;
    let mut cols = vec![S::zero(); c * kh * kw * patch];
    for ch in 0..c {
        let img_ch = &img[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * patch;
                for oy in 0..out_h {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * out_w;
                    if stride == 1 {
                        // Contiguous span of valid ox values.
                        let ix0 = v as isize - pad as isize;
                        let ox_start = (-ix0).max(0) as usize;
                        let ox_end = ((w as isize - ix0).min(out_w as isize)).max(0) as usize;
                        if ox_start < ox_end {
                            let src = src_row as isize + ix0 + ox_start as isize;
                            cols[dst_row + ox_start..dst_row + ox_end].copy_from_slice(
                                &img_ch[src as usize..src as usize + (ox_end - ox_start)],
                            );
                        }
                    } else {
                        for ox in 0..out_w {
                            let ix = (ox * stride + v) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst_row + ox] = img_ch[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patch gradients back to image layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    img: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) {
    let patch = out_h * out_w;
    debug_assert_eq!(cols.len(), c * kh * kw * patch);
    debug_assert_eq!(img.len(), c * h * w);
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * patch;
                for oy in 0..out_h {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ch * h * w + iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[dst_row + ix as usize] += cols[row + oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_rect() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> makes the pair a valid
        // linear-op/adjoint pair; check on small random-ish data.
        let (c, h, w, kh, kw, stride, pad) = (2usize, 5usize, 4usize, 3usize, 3usize, 2usize, 1usize);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> =
            (0..c * kh * kw * out_h * out_w).map(|i| (i as f64 * 0.3).cos()).collect();
        let cols = im2col(&x, c, h, w, kh, kw, stride, pad, out_h, out_w);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0f64; x.len()];
        col2im_acc(&y, &mut back, c, h, w, kh, kw, stride, pad, out_h, out_w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn im2col_stride1_matches_naive() {
        let (c, h, w, kh, kw, stride, pad) = (1usize, 4usize, 4usize, 3usize, 3usize, 1usize, 1usize);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
        let cols = im2col(&x, c, h, w, kh, kw, stride, pad, out_h, out_w);
        // Naive reference.
        for u in 0..kh {
            for v in 0..kw {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        let ix = (ox * stride + v) as isize - pad as isize;
                        let want = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        let got = cols[((u * kw + v) * out_h + oy) * out_w + ox];
                        assert_eq!(got, want, "u={u} v={v} oy={oy} ox={ox}");
                    }
                }
            }
        }
    }
}
