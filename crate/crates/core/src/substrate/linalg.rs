//! Symmetric eigendecomposition and feature covariance.

use ndarray::{Array1, Array2, Axis};

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-6;

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
///
/// Column `k` of `vectors` is the unit eigenvector for `values[k]`.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl SymEig {
    /// `E · diag(g(λ)) · Eᵀ` for a spectral function `g`.
    pub fn spectral_map(&self, g: impl Fn(f64) -> f64) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.mapv(g);
        scaled.dot(&self.vectors.t())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-10 · ‖A‖_F` or 100 sweeps have run.
pub fn sym_eig(a: &Array2<f64>) -> Result<SymEig> {
    let (n, m) = a.dim();
    if n != m {
        return Err(Error::ContractViolation(format!(
            "sym_eig needs a square matrix, got {n}x{m}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("sym_eig input has non-finite entries".into()));
    }
    let max_abs = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_TOL * max_abs {
                return Err(Error::ContractViolation(format!(
                    "sym_eig input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    // Row-major working copies; `v` accumulates the rotations.
    let mut w: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = OFF_DIAGONAL_TOL * frob;

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&w, n) <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                w[p * n + p] = app - t * apq;
                w[q * n + q] = aqq + t * apq;
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let g = w[r * n + p];
                    let h = w[r * n + q];
                    let rp = g - s * (h + g * tau);
                    let rq = h + s * (g - h * tau);
                    w[r * n + p] = rp;
                    w[p * n + r] = rp;
                    w[r * n + q] = rq;
                    w[q * n + r] = rq;
                }
                for r in 0..n {
                    let g = v[r * n + p];
                    let h = v[r * n + q];
                    v[r * n + p] = g - s * (h + g * tau);
                    v[r * n + q] = h + s * (g - h * tau);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].total_cmp(&w[i * n + i]));
    let values = Array1::from_iter(order.iter().map(|&k| w[k * n + k]));
    let vectors = Array2::from_shape_fn((n, n), |(r, k)| v[r * n + order[k]]);
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm(w: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += w[i * n + j] * w[i * n + j];
            }
        }
    }
    acc.sqrt()
}

/// Per-channel spatial mean and the population covariance of the centered map.
pub fn covariance(f: &FeatureMap) -> (Array1<f64>, Array2<f64>) {
    let x = f.as_matrix();
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / n;
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / n;
    let sym = (&cov + &cov.t()) * 0.5;
    (mean, sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random orthogonal matrix by modified Gram-Schmidt on Gaussian columns.
    fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        for k in 0..n {
            for j in 0..k {
                let d: f64 = (0..n).map(|r| q[[r, k]] * q[[r, j]]).sum();
                for r in 0..n {
                    q[[r, k]] -= d * q[[r, j]];
                }
            }
            let norm: f64 = (0..n).map(|r| q[[r, k]] * q[[r, k]]).sum::<f64>().sqrt();
            for r in 0..n {
                q[[r, k]] /= norm;
            }
        }
        q
    }

    fn reconstruct(e: &SymEig) -> Array2<f64> {
        e.spectral_map(|l| l)
    }

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&Array2::eye(3)).unwrap();
        assert_eq!(e.values.to_vec(), vec![1.0, 1.0, 1.0]);
        let gram = e.vectors.t().dot(&e.vectors);
        assert!(frob(&(gram - Array2::<f64>::eye(3))) < 1e-12);
    }

    #[test]
    fn diagonal_matrix_is_axis_aligned() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, 4.0]]);
        let e = sym_eig(&a).unwrap();
        assert_eq!(e.values.to_vec(), vec![4.0, 1.0]);
        assert!((e.vectors[[1, 0]].abs() - 1.0).abs() < 1e-12);
        assert!((e.vectors[[0, 1]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_constructed_spectrum() {
        let n = 8;
        let q = random_orthogonal(n, 11);
        let lambda: Vec<f64> = (0..n).map(|k| 10.0 - k as f64 * 1.25).collect();
        let a = (&q * &Array1::from(lambda.clone())).dot(&q.t());
        let e = sym_eig(&a).unwrap();
        for (got, want) in e.values.iter().zip(&lambda) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        let err = frob(&(reconstruct(&e) - &a));
        assert!(err <= 1e-5 * frob(&a));
        let gram = e.vectors.t().dot(&e.vectors);
        assert!(frob(&(gram - Array2::<f64>::eye(n))) < 1e-6);
    }

    #[test]
    fn reconstructs_large_random_symmetric() {
        let n = 512;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        let a = &b + &b.t();
        let e = sym_eig(&a).unwrap();
        assert!(frob(&(reconstruct(&e) - &a)) <= 1e-5 * frob(&a));
        assert!(e.values.windows(2).into_iter().all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_asymmetric_and_non_finite() {
        let a = ndarray::arr2(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(Error::ContractViolation(_))));
        let b = ndarray::arr2(&[[1.0, f64::NAN], [f64::NAN, 1.0]]);
        assert!(matches!(sym_eig(&b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn covariance_examples() {
        let constant = FeatureMap::from_fn(2, 3, 3, |_| 5.0);
        let (mean, cov) = covariance(&constant);
        assert_eq!(mean.to_vec(), vec![5.0, 5.0]);
        assert!(cov.iter().all(|&v| v == 0.0));

        let pair = FeatureMap::from_vec(1, 1, 2, vec![1.0, -1.0]).unwrap();
        let (mean, cov) = covariance(&pair);
        assert_eq!(mean[0], 0.0);
        assert_eq!(cov[[0, 0]], 1.0);

        let twin = FeatureMap::from_fn(2, 4, 4, |(_, y, x)| (y * 4 + x) as f64);
        let (_, cov) = covariance(&twin);
        let e = sym_eig(&cov).unwrap();
        assert!(e.values[1].abs() < 1e-9 * e.values[0]);
    }

    proptest::proptest! {
        #[test]
        fn covariance_ignores_position_order(seed in 0u64..200, shift in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::from_fn(3, 4, 4, |_| rng.random::<f64>());
            let g = FeatureMap::from_fn(3, 4, 4, |(c, y, x)| {
                let p = (y * 4 + x + shift) % 16;
                f.data()[[c, p / 4, p % 4]]
            });
            let (ma, ca) = covariance(&f);
            let (mb, cb) = covariance(&g);
            for (a, b) in ma.iter().zip(mb.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in ca.iter().zip(cb.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            // PSD within tolerance
            let e = sym_eig(&ca).unwrap();
            proptest::prop_assert!(e.values.iter().all(|&l| l > -1e-8));
        }

        #[test]
        fn eigendecomposition_reconstructs(seed in 0u64..500, n in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
            let a = &b + &b.t();
            let e = sym_eig(&a).unwrap();
            proptest::prop_assert!(frob(&(reconstruct(&e) - &a)) <= 1e-5 * frob(&a).max(1e-300));
            let gram = e.vectors.t().dot(&e.vectors);
            proptest::prop_assert!(frob(&(gram - Array2::<f64>::eye(n))) < 1e-9);
        }
    }
}
