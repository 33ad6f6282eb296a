//! Tiny dense solvers for the normal equations (5x5 at most).

use crate::scalar::Real;

/// Solve `a * x = b` in place by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when the matrix is singular to working
/// precision.
pub(crate) fn solve<F: Real>(mut a: Vec<Vec<F>>, mut b: Vec<F>) -> Option<Vec<F>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() <= F::zero() {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let inv = F::one() / a[col][col];
        for v in a[col].iter_mut() {
            *v = *v * inv;
        }
        b[col] = b[col] * inv;
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == F::zero() {
                continue;
            }
            for k in 0..n {
                let d = a[col][k] * factor;
                a[row][k] = a[row][k] - d;
            }
            b[row] = b[row] - b[col] * factor;
        }
    }
    Some(b)
}

/// Invert a small matrix; `None` when singular.
pub(crate) fn invert<F: Real>(a: &[Vec<F>]) -> Option<Vec<Vec<F>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![F::zero(); n];
        e[j] = F::one();
        cols.push(solve(a.to_vec(), e)?);
    }
    // cols[j] is the j-th column of the inverse
    let mut inv = vec![vec![F::zero(); n]; n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            inv[i][j] = v;
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_system() {
        let a = vec![vec![2.0f64, 1.0], vec![1.0, 3.0]];
        let x = solve(a, vec![5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inverts_and_detects_singular() {
        let a = vec![vec![4.0f64, 7.0], vec![2.0, 6.0]];
        let inv = invert(&a).unwrap();
        assert!((inv[0][0] - 0.6).abs() < 1e-12);
        assert!((inv[0][1] - -0.7).abs() < 1e-12);
        assert!((inv[1][0] - -0.2).abs() < 1e-12);
        assert!((inv[1][1] - 0.4).abs() < 1e-12);

        let s = vec![vec![1.0f64, 2.0], vec![2.0, 4.0]];
        assert!(invert(&s).is_none());
    }
}
