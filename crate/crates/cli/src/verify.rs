//! Randomized verification sweeps. Each returns one JSON object per check
//! followed by a summary object.

use std::f64::consts::PI;

use ftme::dynamics::BuiltinSystem;
use ftme::entropy::{
    ftme_2d_exact, ftme_monte_carlo, ftme_monte_carlo_gamma, gamma_norm_deviation, pesin_gap, TimeSet,
};
use ftme::lcs::{cone_check, ConeSetup, ManifoldTag};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::system::origin_manifolds;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Report {
    pub lines: Vec<Value>,
    pub pass: bool,
}

impl Report {
    fn finish(check: &str, mut lines: Vec<Value>, passed: usize, total: usize, pass: bool) -> Self {
        lines.push(json!({ "check": check, "summary": true, "passed": passed, "total": total, "pass": pass }));
        Report { lines, pass }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Draw {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub horizon: f64,
}

/// `lambda_i ~ U[-2, 2]` (sorted), `alpha ~ U[-1, 1]`, `T ~ U[0.5, 4]`.
pub fn random_draws(count: usize, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            Draw {
                lambda1: a.max(b),
                lambda2: a.min(b),
                alpha: rng.random_range(-1.0..1.0),
                horizon: rng.random_range(0.5..4.0),
            }
        })
        .collect()
}

fn diag(a: f64, b: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
}

fn two_point_mats(phi: DMatrix<f64>, horizon: f64) -> Vec<(f64, DMatrix<f64>)> {
    vec![(0.0, DMatrix::identity(2, 2)), (horizon, phi)]
}

pub fn pesin(draws: usize, seed: u64) -> Result<Report, CliError> {
    let mut lines = Vec::with_capacity(draws + 1);
    let mut passed = 0;
    for (k, d) in random_draws(draws, seed).into_iter().enumerate() {
        let h = ftme_2d_exact(d.lambda1, d.lambda2, d.alpha, d.horizon)?;
        let g = pesin_gap(&[d.lambda1, d.lambda2], d.alpha, &h, d.horizon);
        passed += usize::from(g.ok);
        lines.push(json!({
            "check": "pesin", "draw": k, "lambda1": d.lambda1, "lambda2": d.lambda2,
            "alpha": d.alpha, "T": d.horizon, "h": h.h, "gap": g.gap, "bound": g.bound, "pass": g.ok,
        }));
    }
    Ok(Report::finish("pesin", lines, passed, draws, passed == draws))
}

/// Exact value against Monte Carlo on `Phi = diag(e^{lambda_1 T}, e^{lambda_2 T})`;
/// passes when at least 95% of draws agree within four standard errors.
pub fn exact_mc(draws: usize, samples: u64, seed: u64) -> Result<Report, CliError> {
    let mut lines = Vec::with_capacity(draws + 1);
    let mut passed = 0;
    for (k, d) in random_draws(draws, seed).into_iter().enumerate() {
        let exact = ftme_2d_exact(d.lambda1, d.lambda2, d.alpha, d.horizon)?.h;
        let set = TimeSet::two_point(0.0, d.horizon)?;
        let phi = diag((d.lambda1 * d.horizon).exp(), (d.lambda2 * d.horizon).exp());
        let mc = ftme_monte_carlo(&two_point_mats(phi, d.horizon), d.alpha, &set, samples, seed.wrapping_add(k as u64))?;
        let ok = !mc.empty_intersection && (mc.h - exact).abs() <= 4.0 * mc.stderr;
        passed += usize::from(ok);
        lines.push(json!({
            "check": "exact-mc", "draw": k, "lambda1": d.lambda1, "lambda2": d.lambda2,
            "alpha": d.alpha, "T": d.horizon, "exact": exact, "mc": mc.h, "stderr": mc.stderr,
            "empty": mc.empty_intersection, "pass": ok,
        }));
    }
    let pass = passed as f64 >= 0.95 * draws as f64;
    Ok(Report::finish("exact-mc", lines, passed, draws, pass))
}

/// Monte Carlo on `Phi = diag(kappa1, kappa2)` over `J = {0, 1}` against the exact value.
pub fn mc(kappa1: f64, kappa2: f64, samples: u64, seed: u64) -> Result<Report, CliError> {
    if !(kappa1 > 0.0 && kappa2 > 0.0) {
        return Err(CliError::Config("kappa values must be positive".into()));
    }
    let (l1, l2) = (kappa1.ln().max(kappa2.ln()), kappa1.ln().min(kappa2.ln()));
    let exact = ftme_2d_exact(l1, l2, 0.0, 1.0)?.h;
    let set = TimeSet::two_point(0.0, 1.0)?;
    let r = ftme_monte_carlo(&two_point_mats(diag(kappa1, kappa2), 1.0), 0.0, &set, samples, seed)?;
    let ok = !r.empty_intersection && (r.h - exact).abs() <= 3.0 * r.stderr;
    let line = json!({
        "check": "mc", "kappa1": kappa1, "kappa2": kappa2, "samples": samples, "seed": seed,
        "exact": exact, "mc": r.h, "stderr": r.stderr, "pass": ok,
    });
    Ok(Report::finish("mc", vec![line], usize::from(ok), 1, ok))
}

/// Random symmetric positive-definite `Gamma = Q diag(s1, s2) Q^T`.
pub fn random_spd(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let angle: f64 = rng.random_range(0.0..PI);
    let s1: f64 = rng.random_range(0.25..4.0);
    let s2: f64 = rng.random_range(0.25..4.0);
    let (sn, cs) = angle.sin_cos();
    let q = DMatrix::from_row_slice(2, 2, &[cs, -sn, sn, cs]);
    let g = &q * diag(s1, s2) * q.transpose();
    (&g + g.transpose()) * 0.5
}

/// Paired Monte Carlo runs with and without `Gamma` on `Phi = diag(2, 1/2)`.
pub fn gamma(draws: usize, samples: u64, seed: u64) -> Result<Report, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = TimeSet::two_point(0.0, 1.0)?;
    let mats = two_point_mats(diag(2.0, 0.5), 1.0);
    let plain = ftme_monte_carlo(&mats, 0.0, &set, samples, seed)?;
    let mut lines = Vec::with_capacity(draws + 1);
    let mut passed = 0;
    for k in 0..draws {
        let g = random_spd(&mut rng);
        let with = ftme_monte_carlo_gamma(&mats, 0.0, &set, &g, samples, seed)?;
        let bound = gamma_norm_deviation(&g, set.duration())?;
        let sigma = (plain.stderr.powi(2) + with.stderr.powi(2)).sqrt();
        let diff = (with.h - plain.h).abs();
        let ok = !with.empty_intersection && diff <= bound + 4.0 * sigma;
        passed += usize::from(ok);
        lines.push(json!({
            "check": "gamma", "draw": k, "gamma": [g[(0, 0)], g[(0, 1)], g[(1, 1)]],
            "h": plain.h, "h_gamma": with.h, "diff": diff, "bound": bound, "sigma": sigma, "pass": ok,
        }));
    }
    Ok(Report::finish("gamma", lines, passed, draws, passed == draws))
}

#[derive(Debug, Clone, Copy)]
pub struct ConeOptions {
    pub eps: f64,
    pub horizon: f64,
    pub delta: f64,
    /// Points per manifold branch; the same number of random ball points is added.
    pub points: usize,
    pub seed: u64,
    pub steps_per_unit: f64,
}

/// Test points on both branches of each manifold at radii up to `0.95 delta`,
/// plus uniformly random points of the punctured ball.
pub fn cone_points(
    sys: &BuiltinSystem,
    opts: &ConeOptions,
) -> Result<(ConeSetup, Vec<(DVector<f64>, ManifoldTag)>), CliError> {
    let m = origin_manifolds(sys)?;
    let setup = ConeSetup {
        xstar: m.xstar.clone(),
        e1: m.e1.clone(),
        e2: m.e2.clone(),
        lambda1: m.lambda1,
        lambda2: m.lambda2,
        eps: opts.eps,
        horizon: opts.horizon,
        delta: opts.delta,
        steps_per_unit: opts.steps_per_unit,
    };
    let mut pts = Vec::new();
    let n = opts.points.max(1);
    for k in 1..=n {
        let r = 0.95 * opts.delta * k as f64 / n as f64;
        for s in [r, -r] {
            for (p, tag) in [(m.unstable_point(s), ManifoldTag::Unstable), (m.stable_point(s), ManifoldTag::Stable)] {
                // curved manifolds: pull the point back inside the ball along the curve
                let mut t = s;
                let mut q = p;
                while q.norm() > 0.95 * opts.delta {
                    t *= 0.9;
                    q = match tag {
                        ManifoldTag::Unstable => m.unstable_point(t),
                        _ => m.stable_point(t),
                    };
                }
                pts.push((q, tag));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..2 * n {
        let r = opts.delta * rng.random::<f64>().sqrt().max(1e-3);
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        pts.push((DVector::from_vec(vec![r * a.cos(), r * a.sin()]), ManifoldTag::None));
    }
    Ok((setup, pts))
}

pub fn cones(sys: &BuiltinSystem, opts: &ConeOptions) -> Result<Report, CliError> {
    let (setup, pts) = cone_points(sys, opts)?;
    let reports = cone_check(sys, &setup, &pts)?;
    let mut passed = 0;
    let mut lines: Vec<Value> = reports
        .iter()
        .map(|r| {
            passed += usize::from(r.ok());
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["check"] = json!("cones");
            v["pass"] = json!(r.ok());
            v
        })
        .collect();
    lines.insert(
        0,
        json!({
            "check": "cones", "system": sys.name(), "eps": opts.eps, "T": opts.horizon,
            "delta": opts.delta, "lambda1": setup.lambda1, "lambda2": setup.lambda2,
            "e1": setup.e1.as_slice(), "e2": setup.e2.as_slice(),
        }),
    );
    let total = reports.len();
    Ok(Report::finish("cones", lines, passed, total, passed == total))
}
