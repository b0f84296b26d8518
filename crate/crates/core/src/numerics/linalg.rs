use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest pivot magnitude accepted before a matrix is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
///
/// `a` must be square; `b` may carry any number of right-hand-side columns.
/// Not differentiable.
pub fn linear_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("linear_solve")?;
    b.require_matrix("linear_solve")?;
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape("linear_solve", a.shape(), b.shape()));
    }
    let k = b.cols();
    let mut m = a.data().to_vec();
    let mut x = b.data().to_vec();

    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, m[r * n + col]))
            .max_by(|(_, u), (_, v)| u.abs().total_cmp(&v.abs()))
            .expect("non-empty pivot range");
        if !(pivot.abs() >= PIVOT_TOLERANCE) {
            return Err(Error::Singular { column: col, pivot });
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..k {
                x.swap(col * k + j, pivot_row * k + j);
            }
        }
        for r in col + 1..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
            for j in 0..k {
                x[r * k + j] -= factor * x[col * k + j];
            }
        }
    }

    for row in (0..n).rev() {
        for j in 0..k {
            let mut acc = x[row * k + j];
            for c in row + 1..n {
                acc -= m[row * n + c] * x[c * k + j];
            }
            x[row * k + j] = acc / m[row * n + row];
        }
    }
    Tensor::matrix(n, k, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_solve() {
        let b = Tensor::from_rows(&[[1.0], [2.0], [3.0]]);
        assert_eq!(linear_solve(&Tensor::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn diagonal_inverse() {
        let a = Tensor::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let x = linear_solve(&a, &Tensor::identity(2)).unwrap();
        assert_eq!(x, Tensor::from_rows(&[[0.5, 0.0], [0.0, 0.25]]));
    }

    #[test]
    fn needs_pivoting() {
        let a = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let b = Tensor::from_rows(&[[3.0], [5.0]]);
        assert_eq!(linear_solve(&a, &b).unwrap().data(), &[5.0, 3.0]);
    }

    #[test]
    fn singular_is_rejected() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        let err = linear_solve(&a, &Tensor::identity(2)).unwrap_err();
        assert!(matches!(err, Error::Singular { column: 1, .. }), "{err}");
    }

    #[test]
    fn non_square_is_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            linear_solve(&a, &Tensor::zeros(&[2, 1])),
            Err(Error::Shape { .. })
        ));
    }

    fn diag_dominant(n: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i != j {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    off += v.abs();
                    a.set(i, j, v);
                }
            }
            a.set(i, i, off + rng.random_range(0.5..2.0));
        }
        a
    }

    #[test]
    fn residual_on_diag_dominant_16() {
        let a = diag_dominant(16, 7);
        let b = Tensor::matrix(16, 3, (0..48).map(|i| (i as f64).sin()).collect()).unwrap();
        let x = linear_solve(&a, &b).unwrap();
        let residual = a.matmul(&x).unwrap().max_abs_diff(&b);
        assert!(residual <= 1e-8, "residual {residual}");
    }

    proptest! {
        #[test]
        fn round_trip_recovers_x(n in 1usize..24, k in 1usize..5, seed in any::<u64>()) {
            let a = diag_dominant(n, seed);
            let x = Tensor::matrix(n, k, (0..n * k).map(|i| ((i as f64) * 0.71 + seed as f64).cos()).collect()).unwrap();
            let b = a.matmul(&x).unwrap();
            let got = linear_solve(&a, &b).unwrap();
            prop_assert!(got.max_abs_diff(&x) <= 1e-8);
        }
    }
}
