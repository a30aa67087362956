//! Slice-level matrix kernels. All of them accumulate into `c`.
//!
//! Each output element is reduced over the shared dimension in increasing
//! index order, independent of tiling. Zero entries of the left operand are
//! skipped, which pays off on binary spike inputs.

const COL_BLOCK: usize = 128;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut nz = Vec::with_capacity(k);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            nz.clear();
            nz.extend(a_row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(p, _)| p));
            let c_row = &mut c[i * n + j0..i * n + j1];
            for &p in &nz {
                let s = a_row[p];
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += s * bv;
                }
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`; the reduction runs over rows of `a` in order.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n + j0..i * n + j1];
            for (p, &s) in a_row.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let c_row = &mut c[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += s * bv;
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        if a_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        let o = q * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
