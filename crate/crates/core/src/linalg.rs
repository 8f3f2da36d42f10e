//! Dense elimination for the tiny fixed-size systems that appear in Newton steps.

/// Solves `a · z = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot is zero or not finite.
#[inline]
pub fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let mut piv = col;
        let mut best = a[col][col].abs();
        for (r, row) in a.iter().enumerate().skip(col + 1) {
            if row[col].abs() > best {
                best = row[col].abs();
                piv = r;
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return None;
        }
        if piv != col {
            a.swap(piv, col);
            b.swap(piv, col);
        }
        let inv = 1.0 / a[col][col];
        for r in col + 1..N {
            let f = a[r][col] * inv;
            if f != 0.0 {
                for k in col..N {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut z = [0.0; N];
    for r in (0..N).rev() {
        let mut acc = b[r];
        for k in r + 1..N {
            acc -= a[r][k] * z[k];
        }
        z[r] = acc / a[r][r];
    }
    Some(z)
}

#[inline]
pub fn max_abs<const N: usize>(v: &[f64; N]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[inline]
pub fn norm2<const N: usize>(v: &[f64; N]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_permuted_system() {
        let a = [[0.0, 2.0, 1.0], [1.0, 0.0, 0.0], [3.0, 1.0, 4.0]];
        let z_true = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i] += a[i][j] * z_true[j];
            }
        }
        let z = solve(a, b).unwrap();
        for i in 0..3 {
            assert!((z[i] - z_true[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_is_none() {
        assert!(solve([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0]).is_none());
    }
}
