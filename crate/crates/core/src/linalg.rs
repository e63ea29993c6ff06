//! Dense symmetric eigendecomposition (cyclic Jacobi) and helpers built on it:
//! singular values via the Gram matrix and the symmetric PSD matrix square
//! root used by the Frechet distance.
//!
//! These routines are exact-arithmetic simple and deliberately independent of
//! the power-iteration path in `blocks::spectral_normalize`, so tests can use
//! them as an oracle for it.

use ndarray::{Array1, Array2, ArrayView2};

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns (eigenvalues, eigenvectors as columns), unordered.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen: matrix must be square");
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j] ] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Singular values of an arbitrary rectangular matrix, descending, computed
/// as square roots of the Gram-matrix eigenvalues.
pub fn singular_values(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let gram = if a.nrows() <= a.ncols() {
        a.dot(&a.t())
    } else {
        a.t().dot(&a)
    };
    let (vals, _) = symmetric_eigen(gram.view());
    let mut sv: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Largest singular value.
pub fn spectral_norm_exact(a: ArrayView2<'_, f64>) -> f64 {
    singular_values(a)[0]
}

/// Symmetric PSD matrix square root; negative eigenvalues produced by
/// round-off are clamped to zero.
pub fn sqrtm_psd(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let (vals, vecs) = symmetric_eigen(a);
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        let col = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * col[i] * col[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn eigen_of_diagonal() {
        let a = arr2(&[[3.0, 0.0], [0.0, -1.0]]);
        let (vals, _) = symmetric_eigen(a.view());
        let mut v: Vec<f64> = vals.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((v[0] + 1.0).abs() < 1e-12);
        assert!((v[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_squares_back() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let b = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>() - 0.5);
        let a = b.dot(&b.t()); // PSD
        let r = sqrtm_psd(a.view());
        let back = r.dot(&r);
        let err = (&back - &a).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-10, "sqrtm residual {err}");
    }

    #[test]
    fn singular_values_of_known_matrix() {
        let a = arr2(&[[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let sv = singular_values(a.view());
        assert!((sv[0] - 2.0).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_from_eigen_pairs() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let b = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>() - 0.5);
        let a = &b + &b.t(); // symmetric
        let (vals, vecs) = symmetric_eigen(a.view());
        // A = V diag(vals) V^T
        let mut recon = Array2::<f64>::zeros((6, 6));
        for k in 0..6 {
            let col = vecs.column(k);
            for i in 0..6 {
                for j in 0..6 {
                    recon[[i, j]] += vals[k] * col[i] * col[j];
                }
            }
        }
        let err = (&recon - &a).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-10, "eigen reconstruction residual {err}");
    }
}
