//! Dense inner loops shared by the forward and backward passes.

use crate::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn matmul_at_b_acc<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub(crate) fn matmul_a_bt_acc<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the reduction order is fixed, so results are deterministic.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a strided 2-D window sweep without padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window2d {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub k_rows: usize,
    pub k_cols: usize,
    pub stride: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl Window2d {
    pub fn patch_len(&self) -> usize {
        self.channels * self.k_rows * self.k_cols
    }

    pub fn positions(&self) -> usize {
        self.out_rows * self.out_cols
    }
}

/// Unfolds `x[C×H×W]` into `cols[(C·KH·KW) × (OH·OW)]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Window2d, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.k_rows {
            for kx in 0..g.k_cols {
                let row = (c * g.k_rows + ky) * g.k_cols + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_rows {
                    let src_row = c * g.rows * g.cols + (oy * g.stride + ky) * g.cols + kx;
                    let d = &mut dst[oy * g.out_cols..(oy + 1) * g.out_cols];
                    if g.stride == 1 {
                        d.copy_from_slice(&x[src_row..src_row + g.out_cols]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = x[src_row + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `x`.
pub(crate) fn col2im_acc<T: Real>(cols: &[T], g: &Window2d, x: &mut [T]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ky in 0..g.k_rows {
            for kx in 0..g.k_cols {
                let row = (c * g.k_rows + ky) * g.k_cols + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_rows {
                    let dst_row = c * g.rows * g.cols + (oy * g.stride + ky) * g.cols + kx;
                    let s = &src[oy * g.out_cols..(oy + 1) * g.out_cols];
                    for (ox, &v) in s.iter().enumerate() {
                        x[dst_row + ox * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Mean over every `k×k` window (stride 1, no padding), per channel.
pub(crate) fn box_mean<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let oh = h + 1 - k;
    let ow = w + 1 - k;
    let area = T::of((k * k) as f64);
    let mut colsum = vec![T::zero(); w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            colsum.iter_mut().for_each(|v| *v = T::zero());
            for dy in 0..k {
                let r = &plane[(oy + dy) * w..(oy + dy + 1) * w];
                for (s, &v) in colsum.iter_mut().zip(r) {
                    *s += v;
                }
            }
            let orow = &mut out[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
            for (ox, o) in orow.iter_mut().enumerate() {
                let mut s = T::zero();
                for v in &colsum[ox..ox + k] {
                    s += *v;
                }
                *o = s / area;
            }
        }
    }
}

/// Adjoint of [`box_mean`].
pub(crate) fn box_mean_backward<T: Real>(
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    grad_in: &mut [T],
) {
    let oh = h + 1 - k;
    let ow = w + 1 - k;
    let area = T::of((k * k) as f64);
    let mut rowspread = vec![T::zero(); w];
    for ch in 0..c {
        for oy in 0..oh {
            rowspread.iter_mut().for_each(|v| *v = T::zero());
            let g = &grad_out[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
            for (ox, &gv) in g.iter().enumerate() {
                let gv = gv / area;
                for s in &mut rowspread[ox..ox + k] {
                    *s += gv;
                }
            }
            for dy in 0..k {
                let base = ch * h * w + (oy + dy) * w;
                for (d, &s) in grad_in[base..base + w].iter_mut().zip(&rowspread) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut reference = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    reference[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_at_b_acc(&at, &b, &mut c2, m, k, n);
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        matmul_a_bt_acc(&a, &bt, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - reference[i]).abs() < 1e-12);
            assert!((c2[i] - reference[i]).abs() < 1e-12);
            assert!((c3[i] - reference[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let x = vec![0.75f64; 2 * 9 * 8];
        let mut out = vec![0.0; 2 * 3 * 2];
        box_mean(&x, 2, 9, 8, 7, &mut out);
        assert!(out.iter().all(|&v| v == 0.75));
    }
}
