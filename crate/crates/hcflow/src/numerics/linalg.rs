//! Small dense f64 linear algebra for the invertible 1×1 convolutions:
//! log-determinant and inverse via LU with partial pivoting. Channel counts
//! stay below ~50 at desk scale, so O(n³) is negligible.

/// Log absolute determinant of a row-major n×n matrix, together with |det|.
/// Returns None when a pivot underflows (numerically singular).
pub fn logabsdet(mat: &[f64], n: usize) -> Option<(f64, f64)> {
    debug_assert_eq!(mat.len(), n * n);
    let mut a = mat.to_vec();
    let mut log_abs = 0.0f64;
    for col in 0..n {
        // partial pivot
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
        }
        let d = a[col * n + col];
        log_abs += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col + 1..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    Some((log_abs, log_abs.exp()))
}

/// Inverse of a row-major n×n matrix by Gauss-Jordan with partial pivoting.
pub fn invert(mat: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(mat.len(), n * n);
    let mut a = mat.to_vec();
    let mut inv: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Some(inv)
}

/// Transpose of a row-major n×n matrix.
pub fn transpose(mat: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = mat[r * n + c];
        }
    }
    t
}

/// C = A·B for row-major n×n matrices.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[k * n + j];
            }
        }
    }
    c
}

pub fn identity(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect()
}
