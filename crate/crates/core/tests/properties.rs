use ftme::dynamics::{integrate_flow, BuiltinSystem};
use ftme::entropy::{empirical_escape_rate, ftme_2d_exact, ftme_monte_carlo, TimeSet};
use ftme::fieldio::{export_csv, import_csv, pgm_bytes, Grid2D};
use ftme::lcs::{node_entropy, weighted_ftme_field, AlphaPolicy};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity_then(phi: DMatrix<f64>, t: f64) -> Vec<(f64, DMatrix<f64>)> {
    vec![(0.0, DMatrix::identity(2, 2)), (t, phi)]
}

#[test]
fn exact_and_monte_carlo_agree_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    let draws = 200;
    for k in 0..draws {
        let a: f64 = rng.random_range(-2.0..2.0);
        let b: f64 = rng.random_range(-2.0..2.0);
        let alpha: f64 = rng.random_range(-1.0..1.0);
        let t: f64 = rng.random_range(0.5..4.0);
        let (l1, l2) = (a.max(b), a.min(b));
        let exact = ftme_2d_exact(l1, l2, alpha, t).unwrap().h;
        let set = TimeSet::two_point(0.0, t).unwrap();
        let phi = DMatrix::from_row_slice(2, 2, &[(l1 * t).exp(), 0.0, 0.0, (l2 * t).exp()]);
        let mc = ftme_monte_carlo(&identity_then(phi, t), alpha, &set, 1_000_000, k).unwrap();
        if !mc.empty_intersection && (mc.h - exact).abs() <= 4.0 * mc.stderr {
            agree += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * draws as f64, "{agree}/{draws}");
}

#[test]
fn linear_flow_entropy_is_translation_invariant() {
    let sys = BuiltinSystem::LinearSaddle;
    let set = TimeSet::two_point(0.0, 1.5).unwrap();
    let at = |x: f64, y: f64| {
        let phi = integrate_flow(&sys, &DVector::from_vec(vec![x, y]), 0.0, 1.5, 150).unwrap().phi;
        ftme_monte_carlo(&identity_then(phi, 1.5), 0.2, &set, 50_000, 9).unwrap().h
    };
    assert_eq!(at(0.0, 0.0).to_bits(), at(3.0, -7.5).to_bits());
}

#[test]
fn escape_rate_approaches_linearization() {
    let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
    let x0 = DVector::from_vec(vec![1.0, 1.0 / 3.0]);
    let set = TimeSet::two_point(0.0, 1.0).unwrap();
    let phi = integrate_flow(&sys, &x0, 0.0, 1.0, 100).unwrap().phi;
    let lin = ftme_monte_carlo(&identity_then(phi, 1.0), 0.0, &set, 100_000, 3).unwrap();
    for eps in [0.1, 0.05, 0.025] {
        let e = empirical_escape_rate(&sys, &x0, &set, 0.0, eps, 100_000, 3, 100.0).unwrap();
        let sigma = (lin.stderr.powi(2) + e.stderr.powi(2)).sqrt();
        assert!((e.h - lin.h).abs() <= 3.0 * sigma, "eps {eps}: {} vs {}", e.h, lin.h);
    }
}

#[test]
fn weight_choices_are_ordered() {
    let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let x = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
        let w = node_entropy(&sys, &x, 2.0, 100.0, AlphaPolicy::Stretching).unwrap().unwrap();
        let top = node_entropy(&sys, &x, 2.0, 100.0, AlphaPolicy::Fixed(w.lambda1)).unwrap().unwrap();
        let low = node_entropy(&sys, &x, 2.0, 100.0, AlphaPolicy::Lambda2).unwrap().unwrap();
        assert!(top.h <= 1e-9);
        assert!(w.h >= top.h - 1e-9 && w.h <= low.h + 1e-9, "{top:?} {w:?} {low:?}");
    }
}

#[test]
fn weighted_field_survives_csv_and_is_brightest_near_stable_curve() {
    let sys = BuiltinSystem::parabola(1.0, 1.0).unwrap();
    let grid: Grid2D = "-1.5:1.5:-1.5:1.5:61x61".parse().unwrap();
    let field = weighted_ftme_field(&sys, &grid, 4.0, 100.0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    export_csv(&field, &path).unwrap();
    let back = import_csv(&path).unwrap();
    for k in 0..grid.len() {
        if field.mask()[k] {
            assert_eq!(back.values()[k].to_bits(), field.values()[k].to_bits());
        }
    }

    let bytes = pgm_bytes(&field, None).unwrap();
    let pixels = &bytes[bytes.len() - grid.len()..];
    // brightest pixel of each image column sits within two cells of x2 = -x1^2/3
    for i in (5..56).filter(|&i| i != 30) {
        let (row, _) = (0..grid.ny)
            .map(|r| (r, pixels[r * grid.nx + i]))
            .max_by_key(|&(_, p)| p)
            .unwrap();
        let j = grid.ny - 1 - row;
        let (x, y) = grid.node(i, j);
        assert!((y + x * x / 3.0).abs() <= 2.0 * grid.dy(), "column {i}: peak at y = {y}");
    }
}
