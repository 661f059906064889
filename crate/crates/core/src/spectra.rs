//! Singular values, finite-time Lyapunov exponents and ellipsoid geometry
//! for small square matrices.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{FtmeError, Result};

/// Largest supported matrix dimension.
pub const MAX_DIM: usize = 4;

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 60;

/// Singular values `Lambda_1 >= ... >= Lambda_n > 0`, their exponents
/// `lambda_i = log(Lambda_i) / T`, and the right singular vectors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub singular_values: Vec<f64>,
    pub exponents: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub horizon: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.singular_values.len()
    }

    /// Right singular vector `xi_i`.
    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    pub fn largest_exponent(&self) -> f64 {
        self.exponents[0]
    }

    pub fn smallest_exponent(&self) -> f64 {
        self.exponents[self.exponents.len() - 1]
    }

    /// `||M u||` for unit `u`, predicted from `(Lambda, xi)`.
    pub fn predicted_stretch(&self, u: &DVector<f64>) -> f64 {
        self.singular_values
            .iter()
            .enumerate()
            .map(|(i, s)| (s * self.vectors.column(i).dot(u)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn normalize_sign(v: &mut DVector<f64>) {
    if let Some(first) = v.iter().copied().find(|c| *c != 0.0) {
        if first < 0.0 {
            *v *= -1.0;
        }
    }
}

/// Singular value decomposition of a square matrix with `n <= 4`.
///
/// `n = 2` uses the closed-form eigenproblem of `M^T M`; larger `n` uses
/// cyclic one-sided Jacobi rotations, which diagonalise `M^T M` without
/// forming it.
pub fn svd_small(m: &DMatrix<f64>, horizon: f64) -> Result<SpectralData> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 || n > MAX_DIM {
        return Err(FtmeError::invalid(format!(
            "svd_small needs a square matrix of size 1..={MAX_DIM}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FtmeError::invalid("matrix has non-finite entries"));
    }
    let det = m.determinant();
    if !(det.abs() > 1e-300) {
        return Err(FtmeError::DegenerateMatrix { det });
    }
    let (singular_values, vectors) = match n {
        1 => (vec![m[(0, 0)].abs()], DMatrix::identity(1, 1)),
        2 => svd2(m, det),
        _ => svd_jacobi(m)?,
    };
    let exponents = singular_values.iter().map(|s| s.ln() / horizon).collect();
    Ok(SpectralData {
        singular_values,
        exponents,
        vectors,
        horizon,
    })
}

fn svd2(m: &DMatrix<f64>, det: f64) -> (Vec<f64>, DMatrix<f64>) {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    // S = M^T M = [[p, q], [q, r]]
    let p = a * a + c * c;
    let q = a * b + c * d;
    let r = b * b + d * d;
    let half_gap = 0.5 * (p - r);
    let disc = half_gap.hypot(q);
    let top = 0.5 * (p + r) + disc;
    let s1 = top.sqrt();
    // Lambda_1 Lambda_2 = |det M| keeps the small singular value accurate.
    let s2 = det.abs() / s1;

    if disc <= 1e-15 * top {
        return (vec![s1, s2], DMatrix::identity(2, 2));
    }
    // Eigenvector of S for `top`, from whichever row of S - top I is better conditioned.
    let mut v1 = if p >= r {
        DVector::from_vec(vec![half_gap + disc, q])
    } else {
        DVector::from_vec(vec![q, disc - half_gap])
    };
    v1.normalize_mut();
    let mut v2 = DVector::from_vec(vec![-v1[1], v1[0]]);
    normalize_sign(&mut v1);
    normalize_sign(&mut v2);
    let mut vectors = DMatrix::zeros(2, 2);
    vectors.set_column(0, &v1);
    vectors.set_column(1, &v2);
    (vec![s1, s2], vectors)
}

fn svd_jacobi(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = u.column(i).norm_squared();
                let beta = u.column(j).norm_squared();
                let gamma = u.column(i).dot(&u.column(j));
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for mat in [&mut u, &mut v] {
                    for k in 0..n {
                        let xi = mat[(k, i)];
                        let xj = mat[(k, j)];
                        mat[(k, i)] = cs * xi - sn * xj;
                        mat[(k, j)] = sn * xi + cs * xj;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FtmeError::Inconsistent("Jacobi SVD did not converge".into()));
    }
    let norms: Vec<f64> = (0..n).map(|k| u.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        normalize_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok((order.iter().map(|&k| norms[k]).collect(), vectors))
}

/// Operator 2-norm of a small square matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(svd_small(m, 1.0)?.singular_values[0])
}

/// `E(A) = A^{-1} B(0, 1) = { x : <x, A^T A x> <= 1 }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    generator: DMatrix<f64>,
}

/// Relative slack on the membership test so that exact boundary points
/// survive rounding.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

impl Ellipsoid {
    pub fn new(generator: DMatrix<f64>) -> Result<Self> {
        if generator.nrows() != generator.ncols() {
            return Err(FtmeError::invalid("ellipsoid generator must be square"));
        }
        let det = generator.determinant();
        if !(det.abs() > 1e-300) {
            return Err(FtmeError::DegenerateMatrix { det });
        }
        Ok(Ellipsoid { generator })
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let ax = &self.generator * x;
        ax.norm_squared() <= 1.0 + MEMBERSHIP_SLACK
    }

    pub fn volume(&self) -> f64 {
        unit_ball_volume(self.generator.nrows()) / self.generator.determinant().abs()
    }
}

pub fn ellipsoid_membership(e: &Ellipsoid, x: &DVector<f64>) -> bool {
    e.contains(x)
}

/// Lebesgue measure of the unit ball, `pi^{n/2} / Gamma(n/2 + 1)`.
pub fn unit_ball_volume(n: usize) -> f64 {
    let half = n as f64 / 2.0;
    std::f64::consts::PI.powf(half) / gamma(half + 1.0)
}

/// `log Gamma(n/2 + 1)`.
pub fn ln_gamma_half_plus_one(n: usize) -> f64 {
    ln_gamma(n as f64 / 2.0 + 1.0)
}
