//! Dense matrix kernels on row-major slices.
//!
//! Summation order is fixed, so results are bit-reproducible.

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let mut rows = c.chunks_exact_mut(n).zip(a.chunks_exact(k.max(1)));
    // Four output rows share each streamed row of `b`.
    loop {
        let Some((c0, a0)) = rows.next() else { break };
        let Some((c1, a1)) = rows.next() else {
            row_kernel(c0, a0, b, n);
            break;
        };
        let Some((c2, a2)) = rows.next() else {
            row_kernel(c0, a0, b, n);
            row_kernel(c1, a1, b, n);
            break;
        };
        let Some((c3, a3)) = rows.next() else {
            row_kernel(c0, a0, b, n);
            row_kernel(c1, a1, b, n);
            row_kernel(c2, a2, b, n);
            break;
        };
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
}

#[inline]
fn row_kernel(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    for (p, &x) in a.iter().enumerate() {
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in c.iter_mut().zip(brow) {
            *cv += x * bv;
        }
    }
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}
