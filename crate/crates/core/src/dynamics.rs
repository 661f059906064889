//! Vector fields, RK4 integration of the flow map together with its
//! variational equation, and closed-form flows for the built-in systems.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{FtmeError, Result};

/// Trajectories whose state norm exceeds this are treated as blown up.
pub const BLOWUP_NORM: f64 = 1e12;

/// Default RK4 resolution, in steps per unit of integration time.
pub const DEFAULT_STEPS_PER_UNIT: f64 = 100.0;

/// Right-hand side `f(t, x)` of an ODE together with its spatial Jacobian.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64>;

    fn is_autonomous(&self) -> bool;

    /// Allocation-free evaluation for planar fields.
    fn eval2(&self, t: f64, x: &Vector2<f64>) -> Vector2<f64> {
        let v = self.eval(t, &DVector::from_column_slice(x.as_slice()));
        Vector2::new(v[0], v[1])
    }

    fn jacobian2(&self, t: f64, x: &Vector2<f64>) -> Matrix2<f64> {
        let m = self.jacobian(t, &DVector::from_column_slice(x.as_slice()));
        Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
    }
}

/// A vector field assembled from closures.
pub struct FnField<F, J> {
    dim: usize,
    f: F,
    jac: J,
    autonomous: bool,
}

impl<F, J> FnField<F, J>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    pub fn new(dim: usize, autonomous: bool, f: F, jac: J) -> Self {
        FnField {
            dim,
            f,
            jac,
            autonomous,
        }
    }
}

impl<F, J> VectorField for FnField<F, J>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
    J: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }

    fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jac)(t, x)
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

/// The example systems with known flows.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinSystem {
    /// `x' = A x` for a square matrix `A`.
    LinearGeneral(DMatrix<f64>),
    /// `x' = A x` with `A = [[1, -1], [0, -1]]`.
    LinearSaddle,
    /// `x1' = -x1`, `x2' = beta x1^2 + gamma x2`.
    Parabola { beta: f64, gamma: f64 },
    /// `x' = a x` on the real line.
    Scalar1D { a: f64 },
}

impl BuiltinSystem {
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(FtmeError::invalid("linear system matrix must be square"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(FtmeError::invalid("linear system matrix must be finite"));
        }
        Ok(BuiltinSystem::LinearGeneral(a))
    }

    pub fn parabola(beta: f64, gamma: f64) -> Result<Self> {
        if !beta.is_finite() || !gamma.is_finite() {
            return Err(FtmeError::invalid("parabola parameters must be finite"));
        }
        if gamma <= 0.0 {
            return Err(FtmeError::invalid("parabola system requires gamma > 0"));
        }
        Ok(BuiltinSystem::Parabola { beta, gamma })
    }

    pub fn saddle_matrix() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, -1.0])
    }

    /// Coefficient matrix for the linear systems, `None` otherwise.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match self {
            BuiltinSystem::LinearGeneral(a) => Some(a.clone()),
            BuiltinSystem::LinearSaddle => Some(Self::saddle_matrix()),
            BuiltinSystem::Scalar1D { a } => Some(DMatrix::from_element(1, 1, *a)),
            BuiltinSystem::Parabola { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinSystem::LinearGeneral(_) => "linear",
            BuiltinSystem::LinearSaddle => "linear-saddle",
            BuiltinSystem::Parabola { .. } => "parabola",
            BuiltinSystem::Scalar1D { .. } => "scalar",
        }
    }
}

impl VectorField for BuiltinSystem {
    fn dim(&self) -> usize {
        match self {
            BuiltinSystem::LinearGeneral(a) => a.nrows(),
            BuiltinSystem::LinearSaddle | BuiltinSystem::Parabola { .. } => 2,
            BuiltinSystem::Scalar1D { .. } => 1,
        }
    }

    fn eval(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            BuiltinSystem::LinearGeneral(a) => a * x,
            BuiltinSystem::LinearSaddle => DVector::from_vec(vec![x[0] - x[1], -x[1]]),
            BuiltinSystem::Parabola { beta, gamma } => {
                DVector::from_vec(vec![-x[0], beta * x[0] * x[0] + gamma * x[1]])
            }
            BuiltinSystem::Scalar1D { a } => DVector::from_element(1, a * x[0]),
        }
    }

    fn jacobian(&self, _t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            BuiltinSystem::LinearGeneral(a) => a.clone(),
            BuiltinSystem::LinearSaddle => Self::saddle_matrix(),
            BuiltinSystem::Parabola { beta, gamma } => {
                DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 2.0 * beta * x[0], *gamma])
            }
            BuiltinSystem::Scalar1D { a } => DMatrix::from_element(1, 1, *a),
        }
    }

    fn is_autonomous(&self) -> bool {
        true
    }

    fn eval2(&self, _t: f64, x: &Vector2<f64>) -> Vector2<f64> {
        match self {
            BuiltinSystem::LinearSaddle => Vector2::new(x[0] - x[1], -x[1]),
            BuiltinSystem::Parabola { beta, gamma } => Vector2::new(-x[0], beta * x[0] * x[0] + gamma * x[1]),
            BuiltinSystem::LinearGeneral(a) => {
                Vector2::new(a[(0, 0)] * x[0] + a[(0, 1)] * x[1], a[(1, 0)] * x[0] + a[(1, 1)] * x[1])
            }
            BuiltinSystem::Scalar1D { .. } => panic!("scalar system is not planar"),
        }
    }

    fn jacobian2(&self, _t: f64, x: &Vector2<f64>) -> Matrix2<f64> {
        match self {
            BuiltinSystem::LinearSaddle => Matrix2::new(1.0, -1.0, 0.0, -1.0),
            BuiltinSystem::Parabola { beta, gamma } => Matrix2::new(-1.0, 0.0, 2.0 * beta * x[0], *gamma),
            BuiltinSystem::LinearGeneral(a) => Matrix2::new(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]),
            BuiltinSystem::Scalar1D { .. } => panic!("scalar system is not planar"),
        }
    }
}

/// End state and fundamental matrix of a flow from `t0` to `t1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub x_end: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
    pub step_count: usize,
}

/// Number of fixed RK4 steps used to cover `duration` at `steps_per_unit`.
pub fn steps_for(duration: f64, steps_per_unit: f64) -> usize {
    ((duration.abs() * steps_per_unit).ceil() as usize).max(1)
}

fn check_state(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite()) && x.norm() <= BLOWUP_NORM
}

fn check_dims<V: VectorField + ?Sized>(field: &V, x0: &DVector<f64>, steps: usize) -> Result<()> {
    if x0.len() != field.dim() {
        return Err(FtmeError::invalid(format!(
            "state has dimension {} but field has dimension {}",
            x0.len(),
            field.dim()
        )));
    }
    if steps == 0 {
        return Err(FtmeError::invalid("steps must be at least 1"));
    }
    Ok(())
}

/// Integrates `x' = f(t, x)` together with `Phi' = D_x f(t, x) Phi`,
/// `Phi(t0) = I`, by classical RK4 with `steps` equal steps.
/// `t1 < t0` integrates backward in time.
pub fn integrate_flow<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<FlowResult> {
    check_dims(field, x0, steps)?;
    let n = field.dim();
    let mut x = x0.clone();
    let mut phi = DMatrix::<f64>::identity(n, n);
    if t1 == t0 {
        return Ok(FlowResult {
            x_end: x,
            phi,
            t0,
            t1,
            step_count: steps,
        });
    }
    let h = (t1 - t0) / steps as f64;
    if n == 2 {
        return planar_flow(field, x0, t0, t1, steps);
    }
    for k in 0..steps {
        let t = t0 + k as f64 * h;

        let k1x = field.eval(t, &x);
        let k1p = field.jacobian(t, &x) * &phi;

        let x2 = &x + &k1x * (0.5 * h);
        let p2 = &phi + &k1p * (0.5 * h);
        let k2x = field.eval(t + 0.5 * h, &x2);
        let k2p = field.jacobian(t + 0.5 * h, &x2) * &p2;

        let x3 = &x + &k2x * (0.5 * h);
        let p3 = &phi + &k2p * (0.5 * h);
        let k3x = field.eval(t + 0.5 * h, &x3);
        let k3p = field.jacobian(t + 0.5 * h, &x3) * &p3;

        let x4 = &x + &k3x * h;
        let p4 = &phi + &k3p * h;
        let k4x = field.eval(t + h, &x4);
        let k4p = field.jacobian(t + h, &x4) * &p4;

        let next_x = &x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        let next_phi = &phi + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        if !check_state(&next_x) || next_phi.iter().any(|v| !v.is_finite()) {
            return Err(FtmeError::BlowUp { last_finite_time: t });
        }
        x = next_x;
        phi = next_phi;
    }
    Ok(FlowResult {
        x_end: x,
        phi,
        t0,
        t1,
        step_count: steps,
    })
}

fn planar_flow<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<FlowResult> {
    let h = (t1 - t0) / steps as f64;
    let mut x = Vector2::new(x0[0], x0[1]);
    let mut phi = Matrix2::<f64>::identity();
    for k in 0..steps {
        let t = t0 + k as f64 * h;

        let k1x = field.eval2(t, &x);
        let k1p = field.jacobian2(t, &x) * phi;

        let x2 = x + k1x * (0.5 * h);
        let k2x = field.eval2(t + 0.5 * h, &x2);
        let k2p = field.jacobian2(t + 0.5 * h, &x2) * (phi + k1p * (0.5 * h));

        let x3 = x + k2x * (0.5 * h);
        let k3x = field.eval2(t + 0.5 * h, &x3);
        let k3p = field.jacobian2(t + 0.5 * h, &x3) * (phi + k2p * (0.5 * h));

        let x4 = x + k3x * h;
        let k4x = field.eval2(t + h, &x4);
        let k4p = field.jacobian2(t + h, &x4) * (phi + k3p * h);

        let next_x = x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        let next_phi = phi + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        let finite = next_x.iter().chain(next_phi.iter()).all(|v| v.is_finite());
        if !finite || next_x.norm() > BLOWUP_NORM {
            return Err(FtmeError::BlowUp { last_finite_time: t });
        }
        x = next_x;
        phi = next_phi;
    }
    Ok(FlowResult {
        x_end: DVector::from_column_slice(x.as_slice()),
        phi: DMatrix::from_column_slice(2, 2, phi.as_slice()),
        t0,
        t1,
        step_count: steps,
    })
}

fn planar_state<V: VectorField + ?Sized>(field: &V, x0: &DVector<f64>, t0: f64, t1: f64, steps: usize) -> Result<DVector<f64>> {
    let h = (t1 - t0) / steps as f64;
    let mut x = Vector2::new(x0[0], x0[1]);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = field.eval2(t, &x);
        let k2 = field.eval2(t + 0.5 * h, &(x + k1 * (0.5 * h)));
        let k3 = field.eval2(t + 0.5 * h, &(x + k2 * (0.5 * h)));
        let k4 = field.eval2(t + h, &(x + k3 * h));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|v| v.is_finite()) || next.norm() > BLOWUP_NORM {
            return Err(FtmeError::BlowUp { last_finite_time: t });
        }
        x = next;
    }
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// RK4 for the state alone; same grid and arithmetic as [`integrate_flow`].
pub fn integrate_state<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    check_dims(field, x0, steps)?;
    let mut x = x0.clone();
    if t1 == t0 {
        return Ok(x);
    }
    if field.dim() == 2 {
        return planar_state(field, x0, t0, t1, steps);
    }
    let h = (t1 - t0) / steps as f64;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = field.eval(t, &x);
        let k2 = field.eval(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = field.eval(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = field.eval(t + h, &(&x + &k3 * h));
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !check_state(&next) {
            return Err(FtmeError::BlowUp { last_finite_time: t });
        }
        x = next;
    }
    Ok(x)
}

/// `exp(int_{t0}^{t1} tr D_x f(s, x(s)) ds)`, the Liouville value of
/// `det Phi`, with the trace integral carried as an extra RK4 component.
pub fn liouville_det<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<f64> {
    check_dims(field, x0, steps)?;
    if t1 == t0 {
        return Ok(1.0);
    }
    let h = (t1 - t0) / steps as f64;
    let trace = |t: f64, x: &DVector<f64>| field.jacobian(t, x).trace();
    let mut x = x0.clone();
    let mut log_det = 0.0;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = field.eval(t, &x);
        let l1 = trace(t, &x);
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = field.eval(t + 0.5 * h, &x2);
        let l2 = trace(t + 0.5 * h, &x2);
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = field.eval(t + 0.5 * h, &x3);
        let l3 = trace(t + 0.5 * h, &x3);
        let x4 = &x + &k3 * h;
        let k4 = field.eval(t + h, &x4);
        let l4 = trace(t + h, &x4);
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !check_state(&next) {
            return Err(FtmeError::BlowUp { last_finite_time: t });
        }
        x = next;
        log_det += (l1 + 2.0 * l2 + 2.0 * l3 + l4) * (h / 6.0);
    }
    Ok(log_det.exp())
}

/// States of the trajectory through `(base, x0)` at each of `times`,
/// integrating forward and backward from `base` piece by piece.
pub fn states_at_times<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    base: f64,
    times: &[f64],
    steps_per_unit: f64,
) -> Result<Vec<DVector<f64>>> {
    let mut out: Vec<Option<DVector<f64>>> = vec![None; times.len()];
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let forward = order.iter().copied().filter(|&i| times[i] >= base);
    let (mut t, mut x) = (base, x0.clone());
    for i in forward {
        let target = times[i];
        if target != t {
            x = integrate_state(field, &x, t, target, steps_for(target - t, steps_per_unit))?;
            t = target;
        }
        out[i] = Some(x.clone());
    }

    let backward = order.iter().rev().copied().filter(|&i| times[i] < base);
    let (mut t, mut x) = (base, x0.clone());
    for i in backward {
        let target = times[i];
        x = integrate_state(field, &x, t, target, steps_for(target - t, steps_per_unit))?;
        t = target;
        out[i] = Some(x.clone());
    }

    Ok(out.into_iter().map(|s| s.expect("every time visited")).collect())
}

/// `exp(A t)` for a 2x2 matrix, from `exp(A t) = e^{mu t} (C I + S (A - mu I))`
/// with `mu = tr A / 2` and `d = mu^2 - det A`. Covers real, complex and
/// defective spectra without an eigenbasis.
pub fn expm2(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let mu = 0.5 * a.trace();
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let d = mu * mu - det;
    let (c, s) = if (d * t * t).abs() < 1e-6 {
        // Taylor series of cosh(q t) and sinh(q t)/q in q^2 = d.
        let z = d * t * t;
        let c = 1.0 + z / 2.0 + z * z / 24.0 + z * z * z / 720.0 + z.powi(4) / 40320.0;
        let s = t * (1.0 + z / 6.0 + z * z / 120.0 + z * z * z / 5040.0 + z.powi(4) / 362880.0);
        (c, s)
    } else if d > 0.0 {
        let q = d.sqrt();
        ((q * t).cosh(), (q * t).sinh() / q)
    } else {
        let q = (-d).sqrt();
        ((q * t).cos(), (q * t).sin() / q)
    };
    let shifted = a - DMatrix::<f64>::identity(2, 2) * mu;
    (DMatrix::<f64>::identity(2, 2) * c + shifted * s) * (mu * t).exp()
}

/// Exact flow of a built-in system over `[0, t]`.
pub fn closed_form_flow(system: &BuiltinSystem, x0: &DVector<f64>, t: f64) -> Result<FlowResult> {
    if x0.len() != system.dim() {
        return Err(FtmeError::invalid("state dimension does not match system"));
    }
    let phi = match system {
        BuiltinSystem::Parabola { beta, gamma } => {
            if *gamma == -2.0 {
                return Err(FtmeError::NoClosedForm("parabola with gamma = -2".into()));
            }
            let a = (-t).exp();
            let c = (gamma * t).exp();
            let spread = c - (-2.0 * t).exp();
            let k = beta / (2.0 + gamma);
            let x_end = DVector::from_vec(vec![a * x0[0], k * x0[0] * x0[0] * spread + c * x0[1]]);
            let b = 2.0 * k * x0[0] * spread;
            return Ok(FlowResult {
                x_end,
                phi: DMatrix::from_row_slice(2, 2, &[a, 0.0, b, c]),
                t0: 0.0,
                t1: t,
                step_count: 0,
            });
        }
        BuiltinSystem::Scalar1D { a } => DMatrix::from_element(1, 1, (a * t).exp()),
        BuiltinSystem::LinearSaddle => expm2(&BuiltinSystem::saddle_matrix(), t),
        BuiltinSystem::LinearGeneral(a) => match a.nrows() {
            1 => DMatrix::from_element(1, 1, (a[(0, 0)] * t).exp()),
            2 => expm2(a, t),
            n => {
                return Err(FtmeError::NoClosedForm(format!(
                    "{n}-dimensional linear system"
                )))
            }
        },
    };
    Ok(FlowResult {
        x_end: &phi * x0,
        phi,
        t0: 0.0,
        t1: t,
        step_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn mat_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn central_jacobian(field: &dyn VectorField, x: &DVector<f64>) -> DMatrix<f64> {
        let n = field.dim();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let step = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let col = (field.eval(0.0, &xp) - field.eval(0.0, &xm)) / (2.0 * step);
            jac.set_column(j, &col);
        }
        jac
    }

    #[test]
    fn zero_duration_is_identity() {
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let x0 = v(&[0.3, -0.7]);
        let flow = integrate_flow(&sys, &x0, 1.5, 1.5, 1).unwrap();
        assert_eq!(flow.x_end, x0);
        assert_eq!(flow.phi, DMatrix::identity(2, 2));
    }

    #[test]
    fn saddle_stable_eigenvector_contracts() {
        let flow = integrate_flow(&BuiltinSystem::LinearSaddle, &v(&[1.0, 2.0]), 0.0, 1.0, 1000).unwrap();
        let expected = v(&[1.0, 2.0]) * (-1.0f64).exp();
        assert!(rel_err(&flow.x_end, &expected) < 1e-12);
    }

    #[test]
    fn parabola_rk4_matches_closed_form() {
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let x0 = v(&[1.0, 0.0]);
        let num = integrate_flow(&sys, &x0, 0.0, 2.0, 2000).unwrap();
        let exact = closed_form_flow(&sys, &x0, 2.0).unwrap();
        assert!(rel_err(&num.x_end, &exact.x_end) < 1e-8);
        assert!(mat_rel_err(&num.phi, &exact.phi) < 1e-8);
    }

    #[test]
    fn parabola_origin_is_diagonal() {
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let flow = closed_form_flow(&sys, &v(&[0.0, 0.0]), 2.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[(-2.0f64).exp(), 0.0, 0.0, 2.0f64.exp()]);
        assert_eq!(flow.phi, expected);
    }

    #[test]
    fn saddle_unstable_eigenvector_grows() {
        let t = 3.0;
        let flow = closed_form_flow(&BuiltinSystem::LinearSaddle, &v(&[1.0, 0.0]), t).unwrap();
        assert_relative_eq!(flow.x_end[0], t.exp(), max_relative = 1e-14);
        assert_eq!(flow.x_end[1], 0.0);
    }

    #[test]
    fn parabola_stable_manifold_is_invariant() {
        // W^s = { x2 + beta/(2+gamma) x1^2 = 0 } = { x2 = -x1^2/3 } for beta = gamma = 1.
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let flow = closed_form_flow(&sys, &v(&[1.0, -1.0 / 3.0]), 5.0).unwrap();
        let x = &flow.x_end;
        assert_relative_eq!(x[1], -x[0] * x[0] / 3.0, max_relative = 1e-9);
        assert!(x.norm() < 1e-2);
    }

    #[test]
    fn closed_form_rejects_higher_dimensional_linear() {
        let sys = BuiltinSystem::linear(DMatrix::identity(3, 3)).unwrap();
        let err = closed_form_flow(&sys, &v(&[1.0, 0.0, 0.0]), 1.0).unwrap_err();
        assert!(matches!(err, FtmeError::NoClosedForm(_)));
    }

    #[test]
    fn parabola_requires_positive_gamma() {
        assert!(BuiltinSystem::parabola(1.0, 0.0).is_err());
        assert!(BuiltinSystem::parabola(1.0, -1.0).is_err());
    }

    #[test]
    fn expm2_handles_complex_and_defective_spectra() {
        // rotation generator: exp = [[cos, -sin], [sin, cos]]
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = expm2(&rot, 0.7);
        let expected = DMatrix::from_row_slice(2, 2, &[0.7f64.cos(), -0.7f64.sin(), 0.7f64.sin(), 0.7f64.cos()]);
        assert!(mat_rel_err(&e, &expected) < 1e-14);

        // Jordan block: exp = e^{2t} [[1, t], [0, 1]]
        let jordan = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let e = expm2(&jordan, 1.3);
        let s = (2.6f64).exp();
        let expected = DMatrix::from_row_slice(2, 2, &[s, 1.3 * s, 0.0, s]);
        assert!(mat_rel_err(&e, &expected) < 1e-14);
    }

    #[test]
    fn liouville_examples() {
        let x0 = v(&[0.4, -1.1]);
        let det = liouville_det(&BuiltinSystem::LinearSaddle, &x0, 0.0, 3.0, 300).unwrap();
        assert_eq!(det, 1.0);
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let det = liouville_det(&sys, &x0, 0.0, 3.0, 300).unwrap();
        assert_eq!(det, 1.0);
        let det = liouville_det(&BuiltinSystem::Scalar1D { a: 0.3 }, &v(&[2.0]), 0.0, 2.0, 200).unwrap();
        assert_relative_eq!(det, 0.6f64.exp(), max_relative = 1e-14);
    }

    #[test]
    fn blow_up_is_reported() {
        let field = FnField::new(
            1,
            true,
            |_t, x: &DVector<f64>| DVector::from_element(1, x[0] * x[0]),
            |_t, x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 * x[0]),
        );
        // x' = x^2 from x0 = 1 blows up at t = 1.
        let err = integrate_flow(&field, &v(&[1.0]), 0.0, 2.0, 2000).unwrap_err();
        match err {
            FtmeError::BlowUp { last_finite_time } => {
                assert!(last_finite_time > 0.9 && last_finite_time < 1.05, "{last_finite_time}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let x0 = v(&[0.5, 0.2]);
        let fwd = integrate_flow(&sys, &x0, 0.0, 1.0, 400).unwrap();
        let back = integrate_flow(&sys, &fwd.x_end, 1.0, 0.0, 400).unwrap();
        assert!(rel_err(&back.x_end, &x0) < 1e-9);
        let prod = &back.phi * &fwd.phi;
        assert!(mat_rel_err(&prod, &DMatrix::identity(2, 2)) < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
        let x0 = v(&[1.2, -0.4]);
        let exact = closed_form_flow(&sys, &x0, 3.0).unwrap();
        let err = |steps| {
            let f = integrate_flow(&sys, &x0, 0.0, 3.0, steps).unwrap();
            (f.x_end - &exact.x_end).norm()
        };
        for steps in [30, 60, 120] {
            let ratio = err(steps) / err(2 * steps);
            assert!(ratio >= 12.0, "steps {steps}: ratio {ratio}");
        }
    }

    #[test]
    fn states_at_times_visits_both_directions() {
        let sys = BuiltinSystem::Scalar1D { a: 0.5 };
        let times = [-1.0, 0.0, 2.0, 1.0];
        let states = states_at_times(&sys, &v(&[1.0]), 0.0, &times, 200.0).unwrap();
        for (t, s) in times.iter().zip(&states) {
            assert_relative_eq!(s[0], (0.5 * t).exp(), max_relative = 1e-10);
        }
    }

    fn arb_point(scale: f64) -> impl Strategy<Value = DVector<f64>> {
        (-scale..scale, -scale..scale).prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn builtin_jacobians_match_finite_differences(x in arb_point(3.0), beta in -2.0..2.0f64, gamma in 0.1..2.0f64) {
            let systems = [
                BuiltinSystem::LinearSaddle,
                BuiltinSystem::parabola(beta, gamma).unwrap(),
                BuiltinSystem::linear(DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.8, beta])).unwrap(),
            ];
            for sys in &systems {
                let fd = central_jacobian(sys, &x);
                let an = sys.jacobian(0.0, &x);
                prop_assert!((&fd - &an).norm() <= 1e-5 * an.norm().max(1.0));
            }
        }

        #[test]
        fn cocycle_property(x in arb_point(1.5), split in 0.1..0.9f64) {
            let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
            let (t0, t1) = (0.2, 2.2);
            let u = t0 + split * (t1 - t0);
            let direct = integrate_flow(&sys, &x, t0, t1, steps_for(t1 - t0, 100.0)).unwrap();
            let a = integrate_flow(&sys, &x, t0, u, steps_for(u - t0, 100.0)).unwrap();
            let b = integrate_flow(&sys, &a.x_end, u, t1, steps_for(t1 - u, 100.0)).unwrap();
            prop_assert!(rel_err(&b.x_end, &direct.x_end) <= 1e-7);
            prop_assert!(mat_rel_err(&(&b.phi * &a.phi), &direct.phi) <= 1e-6);
        }

        #[test]
        fn tangent_propagation(x in arb_point(2.0)) {
            let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
            let flow = integrate_flow(&sys, &x, 0.0, 2.0, 200).unwrap();
            let lhs = &flow.phi * sys.eval(0.0, &x);
            let rhs = sys.eval(2.0, &flow.x_end);
            prop_assume!(rhs.norm() > 1e-9);
            prop_assert!(rel_err(&lhs, &rhs) <= 1e-6);
        }

        #[test]
        fn det_matches_liouville(x in arb_point(2.0), beta in -1.0..1.0f64, gamma in 0.2..1.5f64) {
            let sys = BuiltinSystem::parabola(beta, gamma).unwrap();
            let flow = integrate_flow(&sys, &x, 0.0, 1.5, 150).unwrap();
            let liou = liouville_det(&sys, &x, 0.0, 1.5, 150).unwrap();
            prop_assert!((flow.phi.determinant() - liou).abs() <= 1e-6 * liou);
            prop_assert!(flow.phi.determinant() > 0.0);
        }
    }
}
