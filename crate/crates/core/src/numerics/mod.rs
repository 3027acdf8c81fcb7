//! Small dense linear algebra kit: matrices, thin QR, 3×3 determinants, Gram
//! volumes, layer normalization, Gaussian densities and a central-difference
//! gradient oracle.

mod matrix;
mod qr;

pub use matrix::{cross, dot, norm3, sub3, Matrix};
pub use qr::{qr_thin, QrResult};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cofactor expansion along the first row.
pub fn det3(a: &Matrix) -> f64 {
    debug_assert_eq!(a.shape(), (3, 3));
    a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)])
}

/// Inverse of a 3×3 matrix through the adjugate. `None` when singular.
pub fn inverse3(a: &Matrix) -> Option<Matrix> {
    let d = det3(a);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let c = |i: usize, j: usize| a[(i % 3, j % 3)];
    // adj(A)[j][i] = cofactor(i, j); cyclic indexing folds in the sign.
    Some(Matrix::from_fn(3, 3, |j, i| {
        (c(i + 1, j + 1) * c(i + 2, j + 2) - c(i + 1, j + 2) * c(i + 2, j + 1)) / d
    }))
}

/// `sqrt(det(wᵀw))`, the volume scale of a `d × 3` projection.
///
/// Returns 0 when the Gram determinant falls below `1e-14` relative to the
/// cube of the mean squared column norm, which covers both genuine rank
/// deficiency and round-off on the wrong side of zero.
pub fn gram_sqrt_det(w: &Matrix) -> Result<f64> {
    if w.cols() != 3 {
        return Err(Error::Shape(format!("expected d×3, got {}×{}", w.rows(), w.cols())));
    }
    if !w.is_finite() {
        return Err(Error::Input("non-finite projection".into()));
    }
    let g = w.t_matmul(w);
    let d = det3(&g);
    let scale = ((g[(0, 0)] + g[(1, 1)] + g[(2, 2)]) / 3.0).powi(3);
    if d <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Ok(0.0);
    }
    Ok(d.sqrt())
}

/// Standard layer normalization of one vector (population variance).
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    assert!(x.len() == gamma.len() && x.len() == beta.len());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Normal density with mean `mu` and standard deviation `sigma`.
pub fn gaussian(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    Ok(INV_SQRT_2PI / sigma * (-0.5 * z * z).exp())
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = f(&point);
        point[i] = theta[i] - h;
        let minus = f(&point);
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against the finite-difference oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst_index: usize,
    pub passed: bool,
}

/// Per-coordinate relative error `|a − n| / max(|a|, |n|, floor)`, where the
/// floor is `1e-5 · max(1, ‖n‖∞)` so coordinates whose true gradient is zero
/// are judged against the overall gradient scale rather than round-off.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = numeric.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-5 * scale;
    let mut worst = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = if a.is_finite() {
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        } else {
            f64::INFINITY
        };
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_index,
        passed: worst < tol,
    }
}

/// Matrix with independent standard-normal entries.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniformly distributed rotation (Haar measure on SO(3)) from a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = dot(&q, &q).sqrt();
        if n > 1e-8 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    Matrix::from_rows(&[
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Leibniz sum over the six permutations of {0, 1, 2}.
    fn leibniz(a: &Matrix) -> f64 {
        const PERMS: [([usize; 3], f64); 6] = [
            ([0, 1, 2], 1.0),
            ([1, 2, 0], 1.0),
            ([2, 0, 1], 1.0),
            ([0, 2, 1], -1.0),
            ([2, 1, 0], -1.0),
            ([1, 0, 2], -1.0),
        ];
        PERMS
            .iter()
            .map(|(p, s)| s * a[(0, p[0])] * a[(1, p[1])] * a[(2, p[2])])
            .sum()
    }

    #[test]
    fn det3_examples() {
        assert_eq!(det3(&Matrix::identity(3)), 1.0);
        let d = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, -1.0]]);
        assert_eq!(det3(&d), -6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_matrix(&mut rng, 3, 3);
        assert!((det3(&a) - leibniz(&a)).abs() < 1e-12);
    }

    #[test]
    fn det3_of_upper_triangular_is_diagonal_product() {
        let a = Matrix::from_rows(&[[1.5, 7.0, -2.0], [0.0, -2.0, 4.0], [0.0, 0.0, 0.25]]);
        assert!((det3(&a) - 1.5 * -2.0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn inverse3_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 3, 3);
        let inv = inverse3(&a).unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(3)) < 1e-12);
        assert!(inverse3(&Matrix::zeros(3, 3)).is_none());
    }

    #[test]
    fn gram_volume_examples() {
        let padded = Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!((gram_sqrt_det(&padded).unwrap() - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dup = random_matrix(&mut rng, 6, 3);
        for i in 0..6 {
            dup[(i, 2)] = dup[(i, 0)];
        }
        assert_eq!(gram_sqrt_det(&dup).unwrap(), 0.0);
    }

    #[test]
    fn gram_volume_matches_qr_route_seed_19() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let w = random_matrix(&mut rng, 16, 3);
        let m = random_matrix(&mut rng, 3, 3);
        let qr = qr_thin(&w.matmul(&m)).unwrap();
        let via_qr = qr.det_r().abs() / det3(&m).abs();
        let alpha = gram_sqrt_det(&w).unwrap();
        assert!((alpha - via_qr).abs() / alpha < 1e-10);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], 1e-5);
        assert!(out.iter().all(|v| *v == 0.0));
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0);
        assert_eq!(out, vec![1.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let y = layer_norm(&x, &[1.0; 32], &[0.0; 32], 0.0);
        let mean = y.iter().sum::<f64>() / 32.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_examples() {
        assert!((gaussian(0.3, 0.3, 1.0).unwrap() - 0.398_942_280_4).abs() < 1e-10);
        let peak = gaussian(1.0, 1.0, 0.5).unwrap();
        assert!((gaussian(1.5, 1.0, 0.5).unwrap() - peak * (-0.5f64).exp()).abs() < 1e-15);
        let direct = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.7)
            * (-0.5 * ((2.0 - 0.5) / 0.7f64).powi(2)).exp();
        assert!((gaussian(2.0, 0.5, 0.7).unwrap() - direct).abs() < 1e-12);
        assert!(gaussian(0.0, 0.0, 0.0).is_err());
        assert!(gaussian(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|t| dot(t, t), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));

        assert!(matches!(
            finite_diff_grad(|t| if t[0] > 1.0 { f64::NAN } else { 0.0 }, &[1.0], 1e-3),
            Err(Error::Oracle { index: 0 })
        ));
    }

    #[test]
    fn finite_difference_of_det_matches_adjugate_seed_23() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 3, 3);
        let numeric = finite_diff_grad(
            |t| det3(&Matrix::from_vec(3, 3, t.to_vec())),
            a.data(),
            1e-5,
        )
        .unwrap();
        // ∂det/∂A = adj(A)ᵀ = det(A)·A⁻ᵀ
        let analytic = inverse3(&a).unwrap().transpose().scaled(det3(&a));
        let report = compare_gradients(analytic.data(), &numeric, 1e-6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn random_rotation_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            assert!(r.t_matmul(&r).max_abs_diff(&Matrix::identity(3)) < 1e-12);
            assert!((det3(&r) - 1.0).abs() < 1e-12);
        }
    }
}
