use ftme::dynamics::{BuiltinSystem, VectorField};
use ftme::lcs::saddle_eigenpairs;
use nalgebra::{DMatrix, DVector};

use crate::CliError;

/// Parses `a,b;c,d` (rows separated by `;`) into a square matrix.
pub fn parse_matrix(s: &str) -> Result<DMatrix<f64>, CliError> {
    let bad = || CliError::Config(format!("matrix `{s}` is not of the form a,b;c,d"));
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|r| r.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(bad());
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.into_iter().flatten()))
}

pub fn build_system(
    name: &str,
    beta: f64,
    gamma: f64,
    matrix: Option<&str>,
) -> Result<BuiltinSystem, CliError> {
    let sys = match name {
        "linear-saddle" => BuiltinSystem::LinearSaddle,
        "parabola" => BuiltinSystem::parabola(beta, gamma)?,
        "linear" => {
            let m = matrix.ok_or_else(|| CliError::Config("--matrix is required for --system linear".into()))?;
            BuiltinSystem::linear(parse_matrix(m)?)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown system `{other}` (expected linear-saddle, parabola or linear)"
            )))
        }
    };
    if sys.dim() != 2 {
        return Err(CliError::Config("fields and cone checks need a planar system".into()));
    }
    Ok(sys)
}

/// Points sampled on the local stable and unstable manifolds of the origin.
pub struct Manifolds {
    pub xstar: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    unstable: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
    stable: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
}

impl Manifolds {
    /// Point at signed arc parameter `s` on the unstable manifold.
    pub fn unstable_point(&self, s: f64) -> DVector<f64> {
        (self.unstable)(s)
    }

    pub fn stable_point(&self, s: f64) -> DVector<f64> {
        (self.stable)(s)
    }
}

/// Saddle at the origin with its invariant manifolds, for the systems whose
/// manifolds are known in closed form.
pub fn origin_manifolds(sys: &BuiltinSystem) -> Result<Manifolds, CliError> {
    let xstar = DVector::zeros(2);
    let jac = sys.jacobian(0.0, &xstar);
    let ((lambda1, e1), (lambda2, e2)) = saddle_eigenpairs(&jac)?;
    let (unstable, stable): (Box<dyn Fn(f64) -> DVector<f64> + Sync>, Box<dyn Fn(f64) -> DVector<f64> + Sync>) =
        match sys {
            BuiltinSystem::Parabola { beta, gamma } => {
                let k = -beta / (2.0 + gamma);
                (
                    Box::new(|s| DVector::from_vec(vec![0.0, s])),
                    Box::new(move |s| DVector::from_vec(vec![s, k * s * s])),
                )
            }
            _ => {
                let (u, v) = (e1.clone(), e2.clone());
                (Box::new(move |s| &u * s), Box::new(move |s| &v * s))
            }
        };
    Ok(Manifolds {
        xstar,
        lambda1,
        lambda2,
        e1,
        e2,
        unstable,
        stable,
    })
}
