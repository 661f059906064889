//! Stretching rates, weighted entropy and FTLE fields on planar grids,
//! extrema of sampled fields, and cone checks near hyperbolic equilibria.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate_flow, integrate_state, steps_for, FlowResult, VectorField};
use crate::entropy::ftme_2d_exact;
use crate::error::{FtmeError, Result};
use crate::fieldio::{FieldKind, FieldMeta, Grid2D, ScalarField2D};
use crate::spectra::{spectral_norm, svd_small};

/// Below this speed a point is treated as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-12;

const EIGEN_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct StretchingRate {
    /// NaN at an equilibrium.
    pub alpha: f64,
    pub direction: DVector<f64>,
    pub at_equilibrium: bool,
}

fn require_autonomous<V: VectorField + ?Sized>(field: &V) -> Result<()> {
    if field.is_autonomous() {
        Ok(())
    } else {
        Err(FtmeError::NotAutonomous)
    }
}

fn require_horizon(horizon: f64) -> Result<()> {
    if horizon > 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(FtmeError::invalid("T must be positive"))
    }
}

/// Stretching rate along the vector field,
/// `(1/T) log(|f(phi(T, x0))| / |f(x0)|)`.
pub fn stretching_rate<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    horizon: f64,
    steps_per_unit: f64,
) -> Result<StretchingRate> {
    require_autonomous(field)?;
    require_horizon(horizon)?;
    let f0 = field.eval(0.0, x0);
    let speed = f0.norm();
    if speed < EQUILIBRIUM_TOL {
        return Ok(StretchingRate {
            alpha: f64::NAN,
            direction: f0,
            at_equilibrium: true,
        });
    }
    let x_end = integrate_state(field, x0, 0.0, horizon, steps_for(horizon, steps_per_unit))?;
    let alpha = (field.eval(horizon, &x_end).norm() / speed).ln() / horizon;
    Ok(StretchingRate {
        alpha,
        direction: f0,
        at_equilibrium: false,
    })
}

/// `(1/T) log(|Phi(T) v| / |v|)` for an arbitrary direction `v`.
pub fn directional_stretching_rate<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    v: &DVector<f64>,
    horizon: f64,
    steps_per_unit: f64,
) -> Result<f64> {
    require_horizon(horizon)?;
    let vn = v.norm();
    if !(vn > 0.0) || v.len() != field.dim() {
        return Err(FtmeError::invalid("direction must be a nonzero vector of the field's dimension"));
    }
    let flow = integrate_flow(field, x0, 0.0, horizon, steps_for(horizon, steps_per_unit))?;
    Ok(((&flow.phi * v).norm() / vn).ln() / horizon)
}

/// How the weight `alpha` is chosen at each node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaPolicy {
    Fixed(f64),
    /// Stretching rate along the vector field; equilibria are masked.
    Stretching,
    /// Smallest FTLE at the node.
    Lambda2,
}

impl fmt::Display for AlphaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaPolicy::Fixed(a) => write!(f, "fixed:{a}"),
            AlphaPolicy::Stretching => f.write_str("stretching"),
            AlphaPolicy::Lambda2 => f.write_str("lambda2"),
        }
    }
}

impl FromStr for AlphaPolicy {
    type Err = FtmeError;

    /// `stretching`, `lambda2`, or a number / `fixed:<number>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stretching" => Ok(AlphaPolicy::Stretching),
            "lambda2" => Ok(AlphaPolicy::Lambda2),
            _ => {
                let v = s.strip_prefix("fixed:").unwrap_or(s);
                v.parse::<f64>()
                    .ok()
                    .filter(|a| a.is_finite())
                    .map(AlphaPolicy::Fixed)
                    .ok_or_else(|| FtmeError::invalid(format!("unknown alpha policy `{s}`")))
            }
        }
    }
}

/// Everything computed at one point for the weighted entropy field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeEntropy {
    pub h: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn flow_over<V: VectorField + ?Sized>(field: &V, x0: &DVector<f64>, t1: f64, steps_per_unit: f64) -> Result<FlowResult> {
    integrate_flow(field, x0, 0.0, t1, steps_for(t1, steps_per_unit))
}

/// `h^alpha(x0)` over `J = {0, T}` with `alpha` chosen by `policy`.
/// Returns `None` at an equilibrium under [`AlphaPolicy::Stretching`].
pub fn node_entropy<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    horizon: f64,
    steps_per_unit: f64,
    policy: AlphaPolicy,
) -> Result<Option<NodeEntropy>> {
    require_horizon(horizon)?;
    if field.dim() != 2 {
        return Err(FtmeError::invalid("entropy fields need a planar system"));
    }
    let f0 = field.eval(0.0, x0).norm();
    if policy == AlphaPolicy::Stretching && f0 < EQUILIBRIUM_TOL {
        return Ok(None);
    }
    let flow = flow_over(field, x0, horizon, steps_per_unit)?;
    let sd = svd_small(&flow.phi, horizon)?;
    let (lambda1, lambda2) = (sd.exponents[0], sd.exponents[1]);
    let alpha = match policy {
        AlphaPolicy::Fixed(a) => a,
        AlphaPolicy::Lambda2 => lambda2,
        AlphaPolicy::Stretching => (field.eval(horizon, &flow.x_end).norm() / f0).ln() / horizon,
    };
    if !alpha.is_finite() {
        return Err(FtmeError::Inconsistent(format!("non-finite weight at {x0:?}")));
    }
    let h = ftme_2d_exact(lambda1, lambda2, alpha, horizon)?.h;
    Ok(Some(NodeEntropy { h, alpha, lambda1, lambda2 }))
}

fn is_numerical(e: &FtmeError) -> bool {
    matches!(
        e,
        FtmeError::BlowUp { .. } | FtmeError::DegenerateMatrix { .. } | FtmeError::Inconsistent(_)
    )
}

/// Evaluates `node` at every grid point in parallel. `Ok(None)` marks an
/// equilibrium (value 0, masked); numerical failures are masked too.
fn grid_map<F>(grid: &Grid2D, meta: FieldMeta, node: F) -> Result<ScalarField2D>
where
    F: Fn(&DVector<f64>) -> Result<Option<f64>> + Sync,
{
    let results: Vec<Result<(f64, bool)>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = grid.coords(k);
            let (x, y) = grid.node(i, j);
            match node(&DVector::from_vec(vec![x, y])) {
                Ok(Some(v)) if v.is_finite() => Ok((v, true)),
                Ok(_) => Ok((0.0, false)),
                Err(e) if is_numerical(&e) => Ok((0.0, false)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for r in results {
        let (v, m) = r?;
        values.push(v);
        mask.push(m);
    }
    ScalarField2D::new(*grid, values, mask, meta)
}

/// Entropy field `x -> h^{alpha(x)}(x)` over `{0, T}`.
pub fn ftme_field<V: VectorField + ?Sized>(
    field: &V,
    grid: &Grid2D,
    horizon: f64,
    steps_per_unit: f64,
    policy: AlphaPolicy,
) -> Result<ScalarField2D> {
    require_autonomous(field)?;
    require_horizon(horizon)?;
    if field.dim() != 2 {
        return Err(FtmeError::invalid("entropy fields need a planar system"));
    }
    let meta = FieldMeta {
        kind: FieldKind::FtmeWeighted,
        horizon: Some(horizon),
        alpha_policy: Some(policy.to_string()),
        seed: None,
    };
    grid_map(grid, meta, |x| {
        Ok(node_entropy(field, x, horizon, steps_per_unit, policy)?.map(|n| n.h))
    })
}

/// Weighted entropy field `H(x)` with the weight given by the stretching
/// rate along the vector field.
pub fn weighted_ftme_field<V: VectorField + ?Sized>(
    field: &V,
    grid: &Grid2D,
    horizon: f64,
    steps_per_unit: f64,
) -> Result<ScalarField2D> {
    ftme_field(field, grid, horizon, steps_per_unit, AlphaPolicy::Stretching)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Largest FTLE over `[0, T]` (forward) or `[0, -T]` (backward).
pub fn ftle_field<V: VectorField + ?Sized>(
    field: &V,
    grid: &Grid2D,
    horizon: f64,
    steps_per_unit: f64,
    direction: Direction,
) -> Result<ScalarField2D> {
    require_horizon(horizon)?;
    if field.dim() != 2 {
        return Err(FtmeError::invalid("FTLE fields need a planar system"));
    }
    let (t1, kind) = match direction {
        Direction::Forward => (horizon, FieldKind::FtleForward),
        Direction::Backward => (-horizon, FieldKind::FtleBackward),
    };
    let meta = FieldMeta {
        kind,
        horizon: Some(horizon),
        alpha_policy: None,
        seed: None,
    };
    grid_map(grid, meta, |x| {
        let flow = flow_over(field, x, t1, steps_per_unit)?;
        Ok(Some(svd_small(&flow.phi, horizon)?.exponents[0]))
    })
}

/// Stretching rate along the vector field at every node.
pub fn stretching_rate_field<V: VectorField + ?Sized>(
    field: &V,
    grid: &Grid2D,
    horizon: f64,
    steps_per_unit: f64,
) -> Result<ScalarField2D> {
    require_autonomous(field)?;
    require_horizon(horizon)?;
    let meta = FieldMeta {
        kind: FieldKind::StretchingRate,
        horizon: Some(horizon),
        alpha_policy: None,
        seed: None,
    };
    grid_map(grid, meta, |x| {
        let s = stretching_rate(field, x, horizon, steps_per_unit)?;
        Ok((!s.at_equilibrium).then_some(s.alpha))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremumKind {
    Max,
    Min,
    Saddle,
    /// Hessian (numerically) singular.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extremum {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub kind: ExtremumKind,
}

/// Interior nodes whose central-difference gradient vanishes to within
/// `tol` (default `1e-2 * range / spacing`), classified by the discrete
/// Hessian. Nodes touching a masked neighbour are skipped.
pub fn extract_extrema(field: &ScalarField2D, tol: Option<f64>) -> Result<Vec<Extremum>> {
    let g = *field.grid();
    if g.nx < 3 || g.ny < 3 {
        return Err(FtmeError::invalid("extrema need at least a 3x3 grid"));
    }
    let (dx, dy) = (g.dx(), g.dy());
    let Some((lo, hi)) = field.range() else {
        return Ok(Vec::new());
    };
    let tol = tol.unwrap_or(1e-2 * (hi - lo) / dx.min(dy));
    let curv_tol = 1e-9 * ((hi - lo) / (dx * dy)).max(f64::MIN_POSITIVE);
    let mut out = Vec::new();
    for j in 1..g.ny - 1 {
        for i in 1..g.nx - 1 {
            let ok = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
                .iter()
                .all(|&(a, b): &(i64, i64)| field.is_valid((i as i64 + a) as usize, (j as i64 + b) as usize));
            if !ok {
                continue;
            }
            let v = |a: i64, b: i64| field.value((i as i64 + a) as usize, (j as i64 + b) as usize);
            let gx = (v(1, 0) - v(-1, 0)) / (2.0 * dx);
            let gy = (v(0, 1) - v(0, -1)) / (2.0 * dy);
            if gx.abs() > tol || gy.abs() > tol {
                continue;
            }
            let fxx = (v(1, 0) - 2.0 * v(0, 0) + v(-1, 0)) / (dx * dx);
            let fyy = (v(0, 1) - 2.0 * v(0, 0) + v(0, -1)) / (dy * dy);
            let fxy = (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / (4.0 * dx * dy);
            let mean = 0.5 * (fxx + fyy);
            let rad = (0.25 * (fxx - fyy).powi(2) + fxy * fxy).sqrt();
            let (e1, e2) = (mean + rad, mean - rad);
            let kind = if e1.abs() <= curv_tol || e2.abs() <= curv_tol {
                ExtremumKind::Degenerate
            } else if e1 < 0.0 {
                ExtremumKind::Max
            } else if e2 > 0.0 {
                ExtremumKind::Min
            } else {
                ExtremumKind::Saddle
            };
            let (x, y) = g.node(i, j);
            out.push(Extremum { i, j, x, y, kind });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrestKind {
    Ridge,
    Trough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrestNode {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub kind: CrestKind,
}

/// Ridge and trough nodes: strict local maxima (minima) along whichever
/// grid axis has the larger second difference. Unlike [`extract_extrema`]
/// this also finds crests where the field has a kink rather than a
/// vanishing gradient.
pub fn ridges_and_troughs(field: &ScalarField2D) -> Result<Vec<CrestNode>> {
    let g = *field.grid();
    if g.nx < 3 || g.ny < 3 {
        return Err(FtmeError::invalid("crest detection needs at least a 3x3 grid"));
    }
    let Some((lo, hi)) = field.range() else {
        return Ok(Vec::new());
    };
    let thr = 1e-12 * (hi - lo);
    let mut out = Vec::new();
    for j in 1..g.ny - 1 {
        for i in 1..g.nx - 1 {
            let nodes = [(i, j), (i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)];
            if !nodes.iter().all(|&(a, b)| field.is_valid(a, b)) {
                continue;
            }
            let v = field.value(i, j);
            let (l, r) = (field.value(i - 1, j), field.value(i + 1, j));
            let (d, u) = (field.value(i, j - 1), field.value(i, j + 1));
            let (a, b) = if (l - 2.0 * v + r).abs() >= (d - 2.0 * v + u).abs() {
                (l, r)
            } else {
                (d, u)
            };
            let kind = if v - a > thr && v - b > thr {
                CrestKind::Ridge
            } else if a - v > thr && b - v > thr {
                CrestKind::Trough
            } else {
                continue;
            };
            let (x, y) = g.node(i, j);
            out.push(CrestNode { i, j, x, y, kind });
        }
    }
    Ok(out)
}

/// Unit eigenvectors `(lambda1, e1), (lambda2, e2)` of a real 2x2 matrix
/// with eigenvalues `lambda1 > 0 > lambda2`.
pub fn saddle_eigenpairs(a: &DMatrix<f64>) -> Result<((f64, DVector<f64>), (f64, DVector<f64>))> {
    if a.nrows() != 2 || a.ncols() != 2 {
        return Err(FtmeError::invalid("saddle eigenpairs need a 2x2 matrix"));
    }
    let tr = a.trace();
    let det = a.determinant();
    let disc = 0.25 * tr * tr - det;
    if !(disc > 0.0) {
        return Err(FtmeError::invalid("equilibrium is not a saddle"));
    }
    let l1 = 0.5 * tr + disc.sqrt();
    let l2 = 0.5 * tr - disc.sqrt();
    if !(l1 > 0.0 && l2 < 0.0) {
        return Err(FtmeError::invalid("equilibrium is not a saddle"));
    }
    let vec_for = |l: f64| {
        let r0 = DVector::from_vec(vec![a[(0, 1)], l - a[(0, 0)]]);
        let r1 = DVector::from_vec(vec![l - a[(1, 1)], a[(1, 0)]]);
        let mut v = if r0.norm() >= r1.norm() { r0 } else { r1 };
        v /= v.norm();
        if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
            v = -v;
        }
        v
    };
    Ok(((l1, vec_for(l1)), (l2, vec_for(l2))))
}

/// Which manifold a test point was drawn from, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldTag {
    Unstable,
    Stable,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeMembership {
    UnstableCone,
    StableCone,
    Neither,
}

#[derive(Debug, Clone)]
pub struct ConeSetup {
    pub xstar: DVector<f64>,
    pub e1: DVector<f64>,
    pub e2: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps: f64,
    pub horizon: f64,
    pub delta: f64,
    pub steps_per_unit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeReport {
    pub point: Vec<f64>,
    pub tag: ManifoldTag,
    pub membership: ConeMembership,
    pub h: f64,
    pub sin_angle: f64,
    /// `2 e^{-eps T / 4}`
    pub unstable_threshold: f64,
    /// `(eps / 4) e^{(lambda2 - lambda1) T}`
    pub stable_threshold: f64,
    /// `H in [0, lambda1 - lambda2 + eps)`
    pub range_ok: bool,
    /// `H < eps` in the unstable cone and on the unstable manifold.
    pub unstable_ok: bool,
    /// `H > lambda1 - eps` in the stable cone, and
    /// `|H - (lambda1 - lambda2)| < eps` on the stable manifold.
    pub stable_ok: bool,
}

impl ConeReport {
    pub fn ok(&self) -> bool {
        self.range_ok && self.unstable_ok && self.stable_ok
    }
}

/// Evaluates the weighted entropy at test points near a saddle `x*` and
/// checks the cone bounds.
pub fn cone_check<V: VectorField + ?Sized>(
    field: &V,
    setup: &ConeSetup,
    points: &[(DVector<f64>, ManifoldTag)],
) -> Result<Vec<ConeReport>> {
    require_autonomous(field)?;
    require_horizon(setup.horizon)?;
    if field.dim() != 2 {
        return Err(FtmeError::invalid("cone checks need a planar system"));
    }
    if !(setup.eps > 0.0 && setup.delta > 0.0) {
        return Err(FtmeError::invalid("eps and delta must be positive"));
    }
    if !(setup.lambda1 > 0.0 && setup.lambda2 < 0.0) {
        return Err(FtmeError::invalid("need lambda1 > 0 > lambda2"));
    }
    if field.eval(0.0, &setup.xstar).norm() >= EQUILIBRIUM_TOL {
        return Err(FtmeError::invalid("x* is not an equilibrium"));
    }
    let jac = field.jacobian(0.0, &setup.xstar);
    for (e, l) in [(&setup.e1, setup.lambda1), (&setup.e2, setup.lambda2)] {
        if (e.norm() - 1.0).abs() > EIGEN_RESIDUAL_TOL {
            return Err(FtmeError::invalid("eigenvectors must have unit length"));
        }
        let residual = (&jac * e - e * l).norm();
        if residual > EIGEN_RESIDUAL_TOL {
            return Err(FtmeError::invalid(format!(
                "eigenpair residual {residual:e} exceeds {EIGEN_RESIDUAL_TOL:e}"
            )));
        }
    }
    let unstable_threshold = 2.0 * (-setup.eps * setup.horizon / 4.0).exp();
    let stable_threshold = setup.eps / 4.0 * ((setup.lambda2 - setup.lambda1) * setup.horizon).exp();
    let spread = setup.lambda1 - setup.lambda2;

    points
        .par_iter()
        .map(|(p, tag)| {
            let d = p - &setup.xstar;
            let r = d.norm();
            if !(r > 0.0 && r <= setup.delta) {
                return Err(FtmeError::invalid(format!(
                    "test point {:?} is not in B(x*, delta) minus x*",
                    p.as_slice()
                )));
            }
            let u = &d / r;
            let sin_angle = (u[0] * setup.e2[1] - u[1] * setup.e2[0]).abs().min(1.0);
            let membership = if sin_angle >= unstable_threshold {
                ConeMembership::UnstableCone
            } else if sin_angle <= stable_threshold {
                ConeMembership::StableCone
            } else {
                ConeMembership::Neither
            };
            let h = node_entropy(field, p, setup.horizon, setup.steps_per_unit, AlphaPolicy::Stretching)?
                .ok_or_else(|| FtmeError::Inconsistent("test point is an equilibrium".into()))?
                .h;
            let range_ok = h >= 0.0 && h < spread + setup.eps;
            let unstable_ok = (membership != ConeMembership::UnstableCone && *tag != ManifoldTag::Unstable)
                || h < setup.eps;
            let stable_ok = (membership != ConeMembership::StableCone || h > setup.lambda1 - setup.eps)
                && (*tag != ManifoldTag::Stable || (h - spread).abs() < setup.eps);
            Ok(ConeReport {
                point: p.iter().copied().collect(),
                tag: *tag,
                membership,
                h,
                sin_angle,
                unstable_threshold,
                stable_threshold,
                range_ok,
                unstable_ok,
                stable_ok,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub point: Vec<f64>,
    pub gap: f64,
    pub bound: f64,
}

/// Compares the stretching rate near `x*` with the growth of `x0 - x*`
/// under the linearization at `x*`.
pub fn stretching_rate_near_equilibrium_gap<V: VectorField + ?Sized>(
    field: &V,
    xstar: &DVector<f64>,
    points: &[DVector<f64>],
    horizon: f64,
    steps_per_unit: f64,
) -> Result<Vec<GapReport>> {
    require_autonomous(field)?;
    require_horizon(horizon)?;
    let jac = field.jacobian(0.0, xstar);
    let inv = jac
        .clone()
        .try_inverse()
        .ok_or(FtmeError::DegenerateMatrix { det: jac.determinant() })?;
    let bound = (spectral_norm(&jac)?.ln() + spectral_norm(&inv)?.ln()) / horizon;
    let linear = flow_over(field, xstar, horizon, steps_per_unit)?.phi;
    points
        .iter()
        .map(|p| {
            let d = p - xstar;
            if d.norm() == 0.0 {
                return Err(FtmeError::invalid("points must differ from x*"));
            }
            let s = stretching_rate(field, p, horizon, steps_per_unit)?;
            if s.at_equilibrium {
                return Err(FtmeError::invalid("point is an equilibrium"));
            }
            let lin = ((&linear * &d).norm() / d.norm()).ln() / horizon;
            Ok(GapReport {
                point: p.iter().copied().collect(),
                gap: (s.alpha - lin).abs(),
                bound,
            })
        })
        .collect()
}
