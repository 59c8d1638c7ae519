//! Dense inner kernels shared by convolution and matrix ops. Summation
//! order is fixed, so results are reproducible across runs and thread counts.

use super::Scalar;

/// Row-major matrix view with arbitrary strides, so a transpose is free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m, n] += a[m, k] * b[k, n]`, `b` and `c` row-major and contiguous.
pub(crate) fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: MatRef<'_, T>, b: &[T], c: &mut [T]) {
    assert!(b.len() >= k * n && c.len() >= m * n);
    if k == 0 || n == 0 {
        return;
    }
    let b = &b[..k * n];
    let mut apack = vec![T::zero(); k * MR];
    for i in (0..m).step_by(MR) {
        let mr = MR.min(m - i);
        // Rows past `m` stay zero and their results are dropped.
        for p in 0..k {
            for r in 0..MR {
                apack[p * MR + r] = if r < mr { a.at(i + r, p) } else { T::zero() };
            }
        }
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (ap, brow) in apack.chunks_exact(MR).zip(b.chunks_exact(n)) {
                let ap: &[T; MR] = ap.try_into().expect("chunk of MR");
                let bp: &[T; NR] = brow[j..j + NR].try_into().expect("chunk of NR");
                for r in 0..MR {
                    for l in 0..NR {
                        acc[r][l] += ap[r] * bp[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(mr) {
                let cr = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, av) in cr.iter_mut().zip(acc_r) {
                    *cv += *av;
                }
            }
            j += NR;
        }
        for jj in j..n {
            for r in 0..mr {
                let mut s = T::zero();
                for (p, brow) in b.chunks_exact(n).enumerate() {
                    s += apack[p * MR + r] * brow[jj];
                }
                c[(i + r) * n + jj] += s;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`, all row-major and contiguous.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += super::tape::dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Unfolds `x[c, h, w]` into `cols[c * k * k, h * w]` for a same-padded
/// stride-1 `k x k` convolution.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * plane + sy as usize * w..][..w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `dx[c, h, w]`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                let (dy, dxx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[ci * plane + sy as usize * w..][..w];
                    for xx in 0..w {
                        let sx = xx as isize + dxx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + xx];
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

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn seq(len: usize, s: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 * s).sin() * 3.0).round() / 2.0).collect()
    }

    #[test]
    fn gemm_matches_naive_on_ragged_sizes() {
        for &(m, n, k) in &[(1, 1, 1), (5, 9, 3), (4, 8, 7), (7, 17, 2), (3, 3, 11)] {
            let a = seq(m * k, 0.7);
            let b = seq(k * n, 1.3);
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, MatRef::rows(&a, k), &b, &mut c);
            assert_eq!(c, naive(m, n, k, &a, &b));

            let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
            let mut c2 = vec![0.0; m * n];
            gemm(m, n, k, MatRef::transposed(&at, m), &b, &mut c2);
            assert_eq!(c2, c);

            let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
            let mut c3 = vec![0.0; m * n];
            gemm_nt(m, n, k, &a, &bt, &mut c3);
            assert_eq!(c3, c);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 5, 4, 3);
        let x = seq(c * h * w, 0.3);
        let y = seq(c * k * k * h * w, 0.9);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
