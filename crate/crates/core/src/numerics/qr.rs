use super::matrix::{dot, Matrix};
use super::det3;
use crate::error::{Error, Result};

/// Thin QR factors of a `d × n` matrix: `q` is `d × n` with orthonormal columns,
/// `r` is `n × n` upper triangular. Diagonal entries of `r` keep whatever sign
/// the reflections produce.
#[derive(Debug, Clone, PartialEq)]
pub struct QrResult {
    pub q: Matrix,
    pub r: Matrix,
}

impl QrResult {
    /// Flips the last column of `q` and the last row of `r` when the basis in
    /// `q` is negatively oriented with respect to `frame` (a `d × 3` matrix
    /// spanning the same column space). The product `q·r` is unchanged.
    ///
    /// With this convention `det(r)` becomes a signed volume measured against a
    /// fixed orientation of the column space, instead of depending on the
    /// pivot signs the reflections happened to pick.
    pub fn oriented(mut self, frame: &Matrix) -> Self {
        assert_eq!(self.r.rows(), 3, "orientation is defined for three columns");
        if det3(&self.q.t_matmul(frame)) < 0.0 {
            for i in 0..self.q.rows() {
                self.q[(i, 2)] = -self.q[(i, 2)];
            }
            for j in 0..3 {
                self.r[(2, j)] = -self.r[(2, j)];
            }
        }
        self
    }

    pub fn det_r(&self) -> f64 {
        (0..self.r.rows()).map(|i| self.r[(i, i)]).product()
    }
}

/// Householder thin QR of a `d × 3` matrix.
pub fn qr_thin(a: &Matrix) -> Result<QrResult> {
    if a.cols() != 3 || a.rows() < 3 {
        return Err(Error::Shape(format!(
            "qr_thin expects d×3 with d ≥ 3, got {}×{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(householder(a))
}

/// Householder thin QR for any `m × n` with `m ≥ n`.
pub(crate) fn householder(a: &Matrix) -> QrResult {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut work = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);

    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| work[(i, k)]).collect();
        let norm = dot(&x, &x).sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            reflectors.push(None);
            continue;
        }
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * work[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                work[(i, j)] -= s * v[i - k];
            }
        }
        work[(k, k)] = alpha;
        for i in k + 1..m {
            work[(i, k)] = 0.0;
        }
        reflectors.push(Some(v));
    }

    let r = Matrix::from_fn(n, n, |i, j| if i <= j { work[(i, j)] } else { 0.0 });

    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for (k, v) in reflectors.iter().enumerate().rev() {
        let Some(v) = v else { continue };
        let vnorm2 = dot(v, v);
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                q[(i, j)] -= s * v[i - k];
            }
        }
    }

    QrResult { q, r }
}
