//! Finite-time metric entropy: exact formulas in one and two dimensions,
//! Monte Carlo estimation of ellipsoid intersections, and the bounds and
//! identities relating it to finite-time Lyapunov exponents.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{states_at_times, VectorField};
use crate::error::{FtmeError, Result};
use crate::sampling::{count_hits, MAX_DIM};
use crate::spectra::{ln_gamma_half_plus_one, svd_small, MEMBERSHIP_SLACK};

/// Tolerance for branch selection when comparing `kappa_i` against 1.
pub const KAPPA_TOL: f64 = 1e-12;

/// Finite set of times `J` with a distinguished base time `t0 in J`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSet {
    base: f64,
    times: Vec<f64>,
}

impl TimeSet {
    pub fn new(base: f64, times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite()) || !base.is_finite() {
            return Err(FtmeError::invalid("time set entries must be finite"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FtmeError::invalid("times must be strictly ascending"));
        }
        if !times.contains(&base) {
            return Err(FtmeError::invalid("base time must belong to the time set"));
        }
        if times.len() < 2 {
            return Err(FtmeError::invalid("time set must have positive duration"));
        }
        Ok(TimeSet { base, times })
    }

    /// `J = {t0, t0 + T}`.
    pub fn two_point(t0: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(FtmeError::invalid("horizon must be positive"));
        }
        TimeSet::new(t0, vec![t0, t0 + horizon])
    }

    /// Same times, different base time.
    pub fn rebased(&self, base: f64) -> Result<Self> {
        TimeSet::new(base, self.times.clone())
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `|J| = max J - min J`.
    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact1d,
    Exact2d,
    Incompressible,
    MonteCarlo,
    LowerBound,
    UpperBound,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact1d => "exact_1d",
            Method::Exact2d => "exact_2d",
            Method::Incompressible => "incompressible",
            Method::MonteCarlo => "monte_carlo",
            Method::LowerBound => "lower_bound",
            Method::UpperBound => "upper_bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyResult {
    pub h: f64,
    pub alpha: f64,
    pub method: Method,
    /// Monte Carlo standard error of `h`, zero for exact values.
    pub stderr: f64,
    pub sample_count: u64,
    /// Set when no sample survived; `h` is then `+inf`.
    pub empty_intersection: bool,
}

impl EntropyResult {
    fn exact(h: f64, alpha: f64, method: Method) -> Self {
        EntropyResult {
            h,
            alpha,
            method,
            stderr: 0.0,
            sample_count: 0,
            empty_intersection: false,
        }
    }

    /// Builds a Monte Carlo result from a hit count, with the binomial
    /// standard error pushed through `-log(p) / |J|` to first order.
    pub fn from_hits(hits: u64, samples: u64, duration: f64, alpha: f64) -> Self {
        if hits == 0 {
            return EntropyResult {
                h: f64::INFINITY,
                alpha,
                method: Method::MonteCarlo,
                stderr: f64::INFINITY,
                sample_count: samples,
                empty_intersection: true,
            };
        }
        let n = samples as f64;
        let p = hits as f64 / n;
        let sigma_p = (p * (1.0 - p) / n).sqrt();
        EntropyResult {
            h: -p.ln() / duration,
            alpha,
            method: Method::MonteCarlo,
            stderr: sigma_p / (p * duration),
            sample_count: samples,
            empty_intersection: false,
        }
    }

    /// Fraction of the ball retained, `exp(-h |J|)`.
    pub fn retained_fraction(&self, duration: f64) -> f64 {
        (-self.h * duration).exp()
    }
}

/// Scalar case: `h = (lambda_1 - alpha)^+`.
pub fn ftme_1d(lambda1: f64, alpha: f64) -> EntropyResult {
    EntropyResult::exact((lambda1 - alpha).max(0.0), alpha, Method::Exact1d)
}

/// Exact entropy of a planar system over a two-point time set, from the
/// area of the unit disk intersected with the ellipse whose semi-axes are
/// `1/kappa_i`, `kappa_i = exp((lambda_i - alpha) T)`.
pub fn ftme_2d_exact(lambda1: f64, lambda2: f64, alpha: f64, horizon: f64) -> Result<EntropyResult> {
    if !(lambda1.is_finite() && lambda2.is_finite() && alpha.is_finite()) {
        return Err(FtmeError::invalid("exponents and weight must be finite"));
    }
    if !(horizon > 0.0) {
        return Err(FtmeError::invalid("horizon must be positive"));
    }
    if lambda1 < lambda2 {
        return Err(FtmeError::UnsortedExponents { lambda1, lambda2 });
    }
    let l1 = (lambda1 - alpha) * horizon;
    let l2 = (lambda2 - alpha) * horizon;
    let k1 = l1.exp();
    let k2 = l2.exp();
    let h = if k1 <= 1.0 + KAPPA_TOL {
        0.0
    } else if k2 >= 1.0 - KAPPA_TOL {
        (lambda1 - alpha).max(0.0) + (lambda2 - alpha).max(0.0)
    } else {
        mixed_branch(k1, k2, horizon)?
    };
    Ok(EntropyResult::exact(h.max(0.0), alpha, Method::Exact2d))
}

/// `kappa_1 > 1 > kappa_2`:
/// `-(1/T) log (2/pi) [ acos sqrt((k1^2-1)/(k1^2-k2^2))
///                      + acos(k1 sqrt((1-k2^2)/(k1^2-k2^2))) / (k1 k2) ]`.
///
/// Each `acos(c)` is evaluated as `atan2(sqrt(1 - c^2), c)` with both
/// arguments formed without cancellation; near `c = 1` the direct form
/// loses most of its significant digits once `k1` is large.
fn mixed_branch(k1: f64, k2: f64, horizon: f64) -> Result<f64> {
    let k1sq = k1 * k1;
    let k2sq = k2 * k2;
    if !k1sq.is_finite() {
        return Err(FtmeError::Inconsistent(format!("kappa1 = {k1} overflows")));
    }
    let spread = k1sq - k2sq;
    let above = k1sq - 1.0;
    let below = 1.0 - k2sq;

    let c1 = (above / spread).sqrt();
    let c2 = k1 * (below / spread).sqrt();
    for c in [c1, c2] {
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
            return Err(FtmeError::Inconsistent(format!("arccos argument {c} out of range")));
        }
    }
    let first = below.sqrt().atan2(above.sqrt());
    let second = (k2 * above.sqrt()).atan2(k1 * below.sqrt());
    let ratio = (2.0 / PI) * (first + second / (k1 * k2));
    Ok(-ratio.ln() / horizon)
}

/// Incompressible planar case (`lambda_2 = -lambda_1`, `alpha = 0`):
/// `h = -(1/T) log((4/pi) acos sqrt(e^{2 lambda T} / (e^{2 lambda T} + 1)))`,
/// evaluated through `acos sqrt(s / (s + 1)) = atan(s^{-1/2})`.
pub fn ftme_2d_incompressible(lambda1: f64, horizon: f64) -> Result<EntropyResult> {
    if !(lambda1 >= 0.0) {
        return Err(FtmeError::invalid("lambda1 must be non-negative"));
    }
    if !(horizon > 0.0) {
        return Err(FtmeError::invalid("horizon must be positive"));
    }
    let angle = (-lambda1 * horizon).exp().atan();
    let h = -((4.0 / PI) * angle).ln() / horizon;
    Ok(EntropyResult::exact(h.max(0.0), 0.0, Method::Incompressible))
}

/// Row-major generator matrices, padded to the sampler's maximum dimension.
struct Generators {
    n: usize,
    mats: Vec<[f64; MAX_DIM * MAX_DIM]>,
}

impl Generators {
    fn new(mats: &[DMatrix<f64>]) -> Self {
        let n = mats[0].nrows();
        let mats = mats
            .iter()
            .map(|m| {
                let mut flat = [0.0; MAX_DIM * MAX_DIM];
                for i in 0..n {
                    for j in 0..n {
                        flat[i * MAX_DIM + j] = m[(i, j)];
                    }
                }
                flat
            })
            .collect();
        Generators { n, mats }
    }

    fn contains_all(&self, u: &[f64]) -> bool {
        self.mats.iter().all(|m| {
            let mut r2 = 0.0;
            for i in 0..self.n {
                let row = &m[i * MAX_DIM..i * MAX_DIM + self.n];
                let v: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
                r2 += v * v;
            }
            r2 <= 1.0 + MEMBERSHIP_SLACK
        })
    }
}

fn check_matrices(mats: &[(f64, DMatrix<f64>)], set: &TimeSet) -> Result<usize> {
    if mats.len() != set.times().len() || mats.iter().zip(set.times()).any(|((t, _), s)| t != s) {
        return Err(FtmeError::invalid("need exactly one matrix per time in J, in order"));
    }
    let n = mats[0].1.nrows();
    if n == 0 || n > MAX_DIM {
        return Err(FtmeError::invalid(format!("dimension must be 1..={MAX_DIM}")));
    }
    for (_, m) in mats {
        if m.nrows() != n || m.ncols() != n {
            return Err(FtmeError::invalid("matrices must share one square shape"));
        }
        let det = m.determinant();
        if !(det.abs() > 1e-300) {
            return Err(FtmeError::DegenerateMatrix { det });
        }
    }
    Ok(n)
}

fn weighted(mats: &[(f64, DMatrix<f64>)], alpha: f64, base: f64) -> Vec<DMatrix<f64>> {
    mats.iter()
        .map(|(t, m)| m * (-alpha * (t - base)).exp())
        .collect()
}

/// Monte Carlo estimate of `-(1/|J|) log mu(B(0,1) cap_t E(Phi(t,t0) e^{-alpha (t-t0)})) / mu(B(0,1))`.
///
/// `mats` holds `(t, Phi(t, t0))` for every `t` in `J`.
pub fn ftme_monte_carlo(
    mats: &[(f64, DMatrix<f64>)],
    alpha: f64,
    set: &TimeSet,
    samples: u64,
    seed: u64,
) -> Result<EntropyResult> {
    let n = check_matrices(mats, set)?;
    if samples == 0 {
        return Err(FtmeError::invalid("samples must be at least 1"));
    }
    let gens = Generators::new(&weighted(mats, alpha, set.base()));
    debug_assert_eq!(gens.n, n);
    let hits = count_hits(n, samples, seed, |u| Ok(gens.contains_all(u)))?;
    Ok(EntropyResult::from_hits(hits, samples, set.duration(), alpha))
}

fn check_spd(gamma: &DMatrix<f64>) -> Result<()> {
    if gamma.nrows() != gamma.ncols() {
        return Err(FtmeError::NotPositiveDefinite);
    }
    let asym = (gamma - gamma.transpose()).amax();
    if asym > 1e-12 * gamma.amax() {
        return Err(FtmeError::NotPositiveDefinite);
    }
    gamma
        .clone()
        .cholesky()
        .map(|_| ())
        .ok_or(FtmeError::NotPositiveDefinite)
}

/// Monte Carlo entropy with respect to the norm `||Gamma x||`.
///
/// The `Gamma`-ball is `Gamma^{-1} B(0,1)`; substituting `x = Gamma^{-1} u`
/// turns every constraint `||Gamma Phi x|| <= e^{alpha (t - t0)}` into a
/// Euclidean one for `Gamma Phi Gamma^{-1}`, so the same unit-ball sampler
/// applies.
pub fn ftme_monte_carlo_gamma(
    mats: &[(f64, DMatrix<f64>)],
    alpha: f64,
    set: &TimeSet,
    gamma: &DMatrix<f64>,
    samples: u64,
    seed: u64,
) -> Result<EntropyResult> {
    let n = check_matrices(mats, set)?;
    check_spd(gamma)?;
    if gamma.nrows() != n {
        return Err(FtmeError::invalid("Gamma dimension does not match"));
    }
    let inv = gamma.clone().try_inverse().ok_or(FtmeError::NotPositiveDefinite)?;
    let conj: Vec<(f64, DMatrix<f64>)> =
        mats.iter().map(|(t, m)| (*t, gamma * m * &inv)).collect();
    ftme_monte_carlo(&conj, alpha, set, samples, seed)
}

/// `(n log ||Gamma|| + n log ||Gamma^{-1}||) / |J|`, the largest possible
/// change of the entropy under the norm `||Gamma x||`.
pub fn gamma_norm_deviation(gamma: &DMatrix<f64>, duration: f64) -> Result<f64> {
    check_spd(gamma)?;
    let sd = svd_small(gamma, 1.0)?;
    let n = sd.dim() as f64;
    let norm = sd.singular_values[0];
    let inv_norm = 1.0 / sd.singular_values[sd.dim() - 1];
    Ok(n * (norm.ln() + inv_norm.ln()) / duration)
}

/// `(n log 2 + log Gamma(n/2 + 1) - (n/2) log pi) / T`.
pub fn pesin_bound(n: usize, horizon: f64) -> f64 {
    let nf = n as f64;
    (nf * LN_2 + ln_gamma_half_plus_one(n) - 0.5 * nf * PI.ln()) / horizon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PesinGap {
    /// `sum_i (lambda_i - alpha)^+ - h`.
    pub gap: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Checks `0 <= sum (lambda_i - alpha)^+ - h <= bound(n, T)`, with slack
/// `1e-9` for exact `h` and four standard errors for Monte Carlo `h`.
pub fn pesin_gap(lambdas: &[f64], alpha: f64, h: &EntropyResult, horizon: f64) -> PesinGap {
    let positive: f64 = lambdas.iter().map(|l| (l - alpha).max(0.0)).sum();
    let gap = positive - h.h;
    let bound = pesin_bound(lambdas.len(), horizon);
    let tol = if h.method == Method::MonteCarlo {
        4.0 * h.stderr
    } else {
        1e-9
    };
    PesinGap {
        gap,
        bound,
        ok: gap >= -tol && gap <= bound + tol,
    }
}

/// Operator-norm bounds on the entropy over a general time set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormBounds {
    /// `-(n/|J|) log inf_t e^{alpha (t-t0)} ||Phi(t,t0)^{-1}||`.
    pub lower: f64,
    /// `-(n/|J|) log inf_t e^{alpha (t-t0)} / ||Phi(t,t0)||`.
    pub upper: f64,
    /// `(n/|J|) log sup_t e^{alpha (t-t0)} ||Phi^{-1}||`, the lower side as
    /// usually printed; kept for comparison only.
    pub printed_lower: f64,
    /// `(n/|J|) log inf_t e^{alpha (t-t0)} / ||Phi||`, likewise.
    pub printed_upper: f64,
}

impl NormBounds {
    pub fn brackets(&self, h: f64, tol: f64) -> bool {
        h >= self.lower - tol && h <= self.upper + tol
    }
}

/// Entropy bounds from `(t, ||Phi(t,t0)||, ||Phi(t,t0)^{-1}||)` for every `t`
/// in `J`.
///
/// The weighted ball contains the Euclidean ball of radius
/// `inf_t e^{alpha (t-t0)} / ||Phi||` and is contained in the one of radius
/// `inf_t e^{alpha (t-t0)} ||Phi^{-1}||` (both capped at 1 by `t = t0`).
pub fn ftme_norm_bounds(norms: &[(f64, f64, f64)], alpha: f64, set: &TimeSet, n: usize) -> Result<NormBounds> {
    if norms.len() != set.times().len() {
        return Err(FtmeError::invalid("need operator norms for every time in J"));
    }
    let scale = n as f64 / set.duration();
    let weight = |t: f64| (alpha * (t - set.base())).exp();
    let inner = norms.iter().map(|&(t, _, inv)| weight(t) * inv);
    let outer = norms.iter().map(|&(t, fwd, _)| weight(t) / fwd);
    let inner_inf = inner.clone().fold(f64::INFINITY, f64::min);
    let inner_sup = inner.fold(f64::NEG_INFINITY, f64::max);
    let outer_inf = outer.fold(f64::INFINITY, f64::min);
    Ok(NormBounds {
        lower: -scale * inner_inf.ln(),
        upper: -scale * outer_inf.ln(),
        printed_lower: scale * inner_sup.ln(),
        printed_upper: scale * outer_inf.ln(),
    })
}

/// `(t, ||Phi||, ||Phi^{-1}||)` for each supplied fundamental matrix.
pub fn operator_norms(mats: &[(f64, DMatrix<f64>)]) -> Result<Vec<(f64, f64, f64)>> {
    mats.iter()
        .map(|(t, m)| {
            let sd = svd_small(m, 1.0)?;
            Ok((*t, sd.singular_values[0], 1.0 / sd.singular_values[sd.dim() - 1]))
        })
        .collect()
}

/// Entropy at `(t, phi(t, t0) x0)` from the entropy at `(t0, x0)`:
/// `h_t = h_t0 + n alpha (t - t0)/|J| - log|det Phi(t, t0)| / |J|`.
pub fn ftme_along_trajectory(
    h_t0: f64,
    alpha: f64,
    t: f64,
    set: &TimeSet,
    n: usize,
    det_phi: f64,
) -> Result<f64> {
    if det_phi == 0.0 || !det_phi.is_finite() {
        return Err(FtmeError::DegenerateMatrix { det: det_phi });
    }
    let dur = set.duration();
    Ok(h_t0 + n as f64 * alpha * (t - set.base()) / dur - det_phi.abs().ln() / dur)
}

/// Finite-time alpha-escape rate of radius `eps` around the orbit of `x0`:
/// the fraction of `B(x0, eps)` whose orbit stays within
/// `eps e^{alpha (t - t0)}` of the reference orbit at every `t` in `J`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_escape_rate<V: VectorField + ?Sized>(
    field: &V,
    x0: &DVector<f64>,
    set: &TimeSet,
    alpha: f64,
    eps: f64,
    samples: u64,
    seed: u64,
    steps_per_unit: f64,
) -> Result<EntropyResult> {
    if !(eps > 0.0) {
        return Err(FtmeError::invalid("eps must be positive"));
    }
    if samples == 0 {
        return Err(FtmeError::invalid("samples must be at least 1"));
    }
    let n = field.dim();
    if n == 0 || n > MAX_DIM || x0.len() != n {
        return Err(FtmeError::invalid("state dimension out of range"));
    }
    let base = set.base();
    let reference = states_at_times(field, x0, base, set.times(), steps_per_unit)?;
    let radii: Vec<f64> = set
        .times()
        .iter()
        .map(|t| eps * (alpha * (t - base)).exp())
        .collect();
    let hits = count_hits(n, samples, seed, |u| {
        let start = x0 + DVector::from_column_slice(u) * eps;
        let states = states_at_times(field, &start, base, set.times(), steps_per_unit)?;
        Ok(states
            .iter()
            .zip(&reference)
            .zip(&radii)
            .all(|((s, r), rad)| (s - r).norm() <= rad * (1.0 + MEMBERSHIP_SLACK)))
    })?;
    Ok(EntropyResult::from_hits(hits, samples, set.duration(), alpha))
}

/// Predicted retained mass `mu(phi^{-1} B cap B) / mu(B) = e^{-h T}` of a
/// coherent pair.
pub fn coherent_pair_ratio(h: f64, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(FtmeError::invalid("horizon must be positive"));
    }
    Ok((-h * horizon).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_flow, BuiltinSystem, FnField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const LN2: f64 = LN_2;

    /// Area of `{x^2 + y^2 <= 1} cap {k1^2 x^2 + k2^2 y^2 <= 1}` by composite
    /// Simpson quadrature in `s`, `x = x_end sin s`, split at the crossing of
    /// the two boundary curves so both pieces are smooth.
    fn intersection_area(k1: f64, k2: f64) -> f64 {
        let end = 1.0f64.min(1.0 / k1);
        let integrand = |s: f64| {
            let x = end * s.sin();
            let disk = (1.0 - x * x).max(0.0).sqrt();
            let ell = (1.0 - k1 * k1 * x * x).max(0.0).sqrt() / k2;
            disk.min(ell) * end * s.cos()
        };
        let simpson = |a: f64, b: f64| {
            let m = 4000;
            let h = (b - a) / m as f64;
            let mut s = integrand(a) + integrand(b);
            for i in 1..m {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * integrand(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let top = std::f64::consts::FRAC_PI_2;
        if k1 > 1.0 && k2 < 1.0 {
            let cross = ((1.0 - k2 * k2) / (k1 * k1 - k2 * k2)).sqrt();
            let sc = (cross / end).min(1.0).asin();
            4.0 * (simpson(0.0, sc) + simpson(sc, top))
        } else {
            4.0 * simpson(0.0, top)
        }
    }

    fn diag(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
    }

    #[test]
    fn one_dimensional_examples() {
        assert_eq!(ftme_1d(0.0, 0.0).h, 0.0);
        assert_eq!(ftme_1d(1.0, 0.0).h, 1.0);
        assert_eq!(ftme_1d(-0.5, 0.3).h, 0.0);
    }

    #[test]
    fn exact_2d_branch_examples() {
        assert_eq!(ftme_2d_exact(0.4, 0.4, 0.4, 3.0).unwrap().h, 0.0);
        assert_relative_eq!(ftme_2d_exact(1.5, 1.5, 0.5, 1.0).unwrap().h, 2.0, epsilon = 1e-14);
        let h = ftme_2d_exact(LN2, -LN2, 0.0, 1.0).unwrap().h;
        let oracle = -(intersection_area(2.0, 0.5) / PI).ln();
        assert_relative_eq!(h, oracle, epsilon = 1e-10);
        assert_relative_eq!(h, 0.5270660033841196, epsilon = 1e-12);
    }

    #[test]
    fn exact_2d_matches_quadrature_on_mixed_branch() {
        for &(l1, l2, t) in &[(0.3, -0.2, 1.0), (1.2, -1.9, 0.7), (0.05, -2.0, 3.0), (2.0, 1.9 - 2.0, 4.0)] {
            let h = ftme_2d_exact(l1, l2, 0.0, t).unwrap().h;
            let k1 = (l1 * t).exp();
            let k2 = (l2 * t).exp();
            let oracle = -(intersection_area(k1, k2) / PI).ln() / t;
            assert_relative_eq!(h, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn unsorted_exponents_are_rejected() {
        assert!(matches!(
            ftme_2d_exact(-1.0, 1.0, 0.0, 1.0),
            Err(FtmeError::UnsortedExponents { .. })
        ));
    }

    #[test]
    fn incompressible_examples() {
        assert!(ftme_2d_incompressible(0.0, 1.0).unwrap().h.abs() < 1e-15);
        let a = ftme_2d_incompressible(LN2, 1.0).unwrap().h;
        let b = ftme_2d_exact(LN2, -LN2, 0.0, 1.0).unwrap().h;
        assert!((a - b).abs() <= 1e-12);
        let mut prev = -1.0;
        for k in 0..60 {
            let h = ftme_2d_incompressible(0.1 * k as f64, 1.0).unwrap().h;
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn branch_continuity() {
        // across kappa1 = 1 (lambda1 = alpha) and kappa2 = 1 (lambda2 = alpha)
        for &(l_other, t) in &[(-0.7, 1.0), (-2.0, 2.5), (-0.1, 0.5)] {
            let at = ftme_2d_exact(0.0, l_other, 0.0, t).unwrap().h;
            let above = ftme_2d_exact(1e-11, l_other, 0.0, t).unwrap().h;
            assert!((at - above).abs() <= 1e-9, "{at} vs {above}");
        }
        for &(l_big, t) in &[(0.7, 1.0), (2.0, 2.5), (0.1, 0.5)] {
            let at = ftme_2d_exact(l_big, 0.0, 0.0, t).unwrap().h;
            let below = ftme_2d_exact(l_big, -1e-11, 0.0, t).unwrap().h;
            assert!((at - below).abs() <= 1e-9, "{at} vs {below}");
        }
    }

    #[test]
    fn monte_carlo_identity_gives_zero() {
        let set = TimeSet::new(0.0, vec![0.0, 1.0]).unwrap();
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, DMatrix::identity(2, 2))];
        let r = ftme_monte_carlo(&mats, 0.0, &set, 100_000, 3).unwrap();
        assert_eq!(r.h, 0.0);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn monte_carlo_matches_exact_value() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, diag(2.0, 0.5))];
        let r = ftme_monte_carlo(&mats, 0.0, &set, 1_000_000, 11).unwrap();
        let exact = ftme_2d_exact(LN2, -LN2, 0.0, 1.0).unwrap().h;
        assert!((r.h - exact).abs() <= 4.0 * r.stderr, "{} +- {}", r.h, r.stderr);
    }

    #[test]
    fn more_times_never_decrease_entropy() {
        let three = TimeSet::new(0.0, vec![0.0, 1.0, 2.0]).unwrap();
        let mats3 = vec![
            (0.0, DMatrix::identity(2, 2)),
            (1.0, diag(2.0, 0.5)),
            (2.0, diag(4.0, 0.25)),
        ];
        let h3 = ftme_monte_carlo(&mats3, 0.0, &three, 200_000, 5).unwrap().h;
        // Same duration |J| = 2, subset of times: the ball can only grow.
        let two = TimeSet::new(0.0, vec![0.0, 2.0]).unwrap();
        let mats2 = vec![mats3[0].clone(), mats3[2].clone()];
        let h2 = ftme_monte_carlo(&mats2, 0.0, &two, 200_000, 5).unwrap().h;
        assert!(h3 >= h2);
    }

    #[test]
    fn empty_intersection_is_flagged() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, diag(1e9, 1e9))];
        let r = ftme_monte_carlo(&mats, 0.0, &set, 1000, 1).unwrap();
        assert!(r.empty_intersection);
        assert!(r.h.is_infinite());
        assert_eq!(coherent_pair_ratio(r.h, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_rejects_mismatched_times() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (2.0, diag(2.0, 0.5))];
        assert!(ftme_monte_carlo(&mats, 0.0, &set, 10, 1).is_err());
    }

    #[test]
    fn pesin_examples() {
        let b = pesin_bound(2, 1.0);
        assert_relative_eq!(b, (4.0 / PI).ln(), epsilon = 1e-14);
        assert_relative_eq!(b, 0.24156447527049, epsilon = 1e-12);

        let h = ftme_2d_exact(LN2, -LN2, 0.0, 1.0).unwrap();
        let g = pesin_gap(&[LN2, -LN2], 0.0, &h, 1.0);
        assert_relative_eq!(g.gap, LN2 - 0.5270660033841196, epsilon = 1e-12);
        assert!(g.ok);

        let zero = ftme_2d_exact(0.0, 0.0, 0.0, 1.0).unwrap();
        let g = pesin_gap(&[0.0, 0.0], 0.0, &zero, 1.0);
        assert_eq!(g.gap, 0.0);
        assert!(g.ok);
    }

    #[test]
    fn pesin_bound_one_dimension_is_zero() {
        // n = 1: log 2 + log Gamma(3/2) - log(pi)/2 = log 2 + log(sqrt(pi)/2) - log(sqrt(pi)) = 0
        assert!(pesin_bound(1, 1.0).abs() < 1e-14);
    }

    #[test]
    fn norm_bound_examples() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let ident = [(0.0, 1.0, 1.0), (1.0, 1.0, 1.0)];
        let b = ftme_norm_bounds(&ident, 0.0, &set, 2).unwrap();
        assert_eq!((b.lower, b.upper, b.printed_lower, b.printed_upper), (0.0, 0.0, 0.0, 0.0));

        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, diag(2.0, 0.5))];
        let norms = operator_norms(&mats).unwrap();
        let b = ftme_norm_bounds(&norms, 0.0, &set, 2).unwrap();
        assert_relative_eq!(b.upper, 2.0 * LN2, epsilon = 1e-14);
        assert_eq!(b.lower, 0.0);
        assert_relative_eq!(b.printed_lower, 2.0 * LN2, epsilon = 1e-14);
        assert_relative_eq!(b.printed_upper, -2.0 * LN2, epsilon = 1e-14);
        let h = ftme_2d_exact(LN2, -LN2, 0.0, 1.0).unwrap().h;
        assert!(b.brackets(h, 0.0));

        let e = std::f64::consts::E;
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, diag(e, e))];
        let b = ftme_norm_bounds(&operator_norms(&mats).unwrap(), 1.0, &set, 2).unwrap();
        assert!(b.lower.abs() < 1e-15 && b.upper.abs() < 1e-15);
        let r = ftme_monte_carlo(&mats, 1.0, &set, 10_000, 2).unwrap();
        assert_eq!(r.h, 0.0);
    }

    #[test]
    fn trajectory_formula_examples() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        assert_eq!(ftme_along_trajectory(0.3, 0.0, 1.0, &set, 2, 1.0).unwrap(), 0.3);
        let set2 = TimeSet::two_point(0.0, 2.0).unwrap();
        assert_eq!(ftme_along_trajectory(0.0, 1.0, 1.0, &set2, 2, 1.0).unwrap(), 1.0);
        assert!(ftme_along_trajectory(0.0, 1.0, 1.0, &set2, 2, 0.0).is_err());
    }

    #[test]
    fn trajectory_formula_matches_rebased_monte_carlo() {
        let sys = BuiltinSystem::LinearSaddle;
        let x0 = DVector::from_vec(vec![0.3, -0.4]);
        for alpha in [0.0, 0.3] {
            let set = TimeSet::two_point(0.0, 1.0).unwrap();
            let fwd = integrate_flow(&sys, &x0, 0.0, 1.0, 100).unwrap();
            let mats0 = vec![(0.0, DMatrix::identity(2, 2)), (1.0, fwd.phi.clone())];
            let h0 = ftme_monte_carlo(&mats0, alpha, &set, 400_000, 17).unwrap();

            let back = integrate_flow(&sys, &fwd.x_end, 1.0, 0.0, 100).unwrap();
            let set1 = set.rebased(1.0).unwrap();
            let mats1 = vec![(0.0, back.phi), (1.0, DMatrix::identity(2, 2))];
            let h1 = ftme_monte_carlo(&mats1, alpha, &set1, 400_000, 18).unwrap();

            let predicted =
                ftme_along_trajectory(h0.h, alpha, 1.0, &set, 2, fwd.phi.determinant()).unwrap();
            let sigma = (h0.stderr.powi(2) + h1.stderr.powi(2)).sqrt();
            assert!((predicted - h1.h).abs() <= 3.0 * sigma, "alpha {alpha}: {predicted} vs {}", h1.h);
        }
    }

    #[test]
    fn gamma_examples() {
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        assert_eq!(gamma_norm_deviation(&DMatrix::identity(2, 2), 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            gamma_norm_deviation(&diag(2.0, 0.5), 1.0).unwrap(),
            4.0 * LN2,
            epsilon = 1e-14
        );
        assert!(matches!(
            gamma_norm_deviation(&diag(1.0, -1.0), 1.0),
            Err(FtmeError::NotPositiveDefinite)
        ));

        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, diag(2.0, 0.5))];
        let plain = ftme_monte_carlo(&mats, 0.0, &set, 200_000, 4).unwrap();
        let same = ftme_monte_carlo_gamma(&mats, 0.0, &set, &DMatrix::identity(2, 2), 200_000, 4).unwrap();
        assert_eq!(plain.h, same.h);

        let g = diag(2.0, 1.0);
        let with = ftme_monte_carlo_gamma(&mats, 0.0, &set, &g, 200_000, 4).unwrap();
        let bound = gamma_norm_deviation(&g, 1.0).unwrap();
        assert_relative_eq!(bound, 2.0 * LN2, epsilon = 1e-14);
        assert!((with.h - plain.h).abs() <= bound + 4.0 * (with.stderr + plain.stderr));
    }

    #[test]
    fn coherent_pair_examples() {
        assert_eq!(coherent_pair_ratio(0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(
            coherent_pair_ratio(0.5270660033841196, 1.0).unwrap(),
            intersection_area(2.0, 0.5) / PI,
            epsilon = 1e-10
        );
        assert_eq!(coherent_pair_ratio(f64::INFINITY, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn escape_rate_of_frozen_flow_is_zero() {
        let still = FnField::new(
            2,
            true,
            |_t, _x: &DVector<f64>| DVector::zeros(2),
            |_t, _x: &DVector<f64>| DMatrix::zeros(2, 2),
        );
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let r = empirical_escape_rate(&still, &x0, &set, 0.0, 0.1, 2000, 1, 50.0).unwrap();
        assert_eq!(r.h, 0.0);
    }

    #[test]
    fn escape_rate_of_linear_flow_matches_linearization() {
        let sys = BuiltinSystem::LinearSaddle;
        let set = TimeSet::two_point(0.0, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.7, 0.2]);
        let flow = integrate_flow(&sys, &x0, 0.0, 1.0, 100).unwrap();
        let mats = vec![(0.0, DMatrix::identity(2, 2)), (1.0, flow.phi)];
        let lin = ftme_monte_carlo(&mats, 0.0, &set, 20_000, 8).unwrap();
        let esc = empirical_escape_rate(&sys, &x0, &set, 0.0, 1e-3, 20_000, 8, 100.0).unwrap();
        let sigma = (lin.stderr.powi(2) + esc.stderr.powi(2)).sqrt();
        assert!((lin.h - esc.h).abs() <= 3.0 * sigma);
    }

    #[test]
    fn exact_2d_is_nonincreasing_in_alpha() {
        for &(l1, l2, t) in &[(1.0, -0.5, 1.0), (0.3, 0.1, 2.0), (2.0, -2.0, 0.5)] {
            let mut prev = f64::INFINITY;
            for k in 0..=80 {
                let alpha = -2.0 + 0.05 * k as f64;
                let h = ftme_2d_exact(l1, l2, alpha, t).unwrap().h;
                assert!(h <= prev + 1e-12);
                prev = h;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn pesin_sandwich(a in -2.0..2.0f64, b in -2.0..2.0f64, alpha in -1.0..1.0f64, t in 0.5..4.0f64) {
            let (l1, l2) = if a >= b { (a, b) } else { (b, a) };
            let h = ftme_2d_exact(l1, l2, alpha, t).unwrap();
            prop_assert!(h.h >= 0.0);
            let g = pesin_gap(&[l1, l2], alpha, &h, t);
            prop_assert!(g.gap >= 0.0 - 1e-12);
            prop_assert!(g.gap <= (4.0 / PI).ln() / t + 1e-9);
        }

        #[test]
        fn zero_when_ball_maps_inside(a in -2.0..0.0f64, b in -2.0..0.0f64, t in 0.5..4.0f64) {
            let (l1, l2) = if a >= b { (a, b) } else { (b, a) };
            prop_assert_eq!(ftme_2d_exact(l1, l2, 0.0, t).unwrap().h, 0.0);
        }

        #[test]
        fn frame_independence(angle in -PI..PI, s in 1.2..3.0f64) {
            let set = TimeSet::two_point(0.0, 1.0).unwrap();
            let phi = DMatrix::from_row_slice(2, 2, &[s, 0.4, -0.1, 1.0 / s]);
            let (sn, cs) = angle.sin_cos();
            let q = DMatrix::from_row_slice(2, 2, &[cs, -sn, sn, cs]);
            let a = ftme_monte_carlo(&[(0.0, DMatrix::identity(2, 2)), (1.0, phi.clone())], 0.0, &set, 20_000, 6).unwrap();
            let b = ftme_monte_carlo(&[(0.0, DMatrix::identity(2, 2)), (1.0, q * phi)], 0.0, &set, 20_000, 6).unwrap();
            prop_assert_eq!(a.h, b.h);
        }
    }
}
