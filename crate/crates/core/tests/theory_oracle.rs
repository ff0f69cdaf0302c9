//! Checks the noise-theory formulas against independent numerical oracles.

use noisyquant_core::theory::*;
use rand::{Rng as _, SeedableRng};
use rand::rngs::StdRng;

/// Direct quadrature of `(Q(x + u) - (x + u))^2` over `u` in `[-n, n]`,
/// with the snapshot rule written out by hand.
fn quadrature_qe(x: f64, n: f64, b: f64) -> f64 {
    let steps = 200_000;
    let h = 2.0 * n / steps as f64;
    let mut sum = 0.0;
    for i in 0..steps {
        let z = x - n + (i as f64 + 0.5) * h;
        let level = if z >= 0.0 { b } else { -b };
        sum += (level - z) * (level - z);
    }
    sum * h / (2.0 * n)
}

fn random_feasible(rng: &mut StdRng) -> (f64, f64, f64) {
    let b = rng.gen_range(0.2..3.0);
    let x = rng.gen_range(0.0..b);
    let n = rng.gen_range(x..=(2.0 * b - x));
    (x, n, b)
}

#[test]
fn worked_values() {
    assert!((expected_qe_closed_form(0.1, 1.4, 1.0).unwrap() - 0.2561905).abs() < 1e-7);
    assert!((delta_closed_form(0.1, 1.4, 1.0).unwrap() + 0.5538095).abs() < 1e-7);
    assert!((delta_closed_form(0.5, 0.5, 1.0).unwrap() - 1.0 / 12.0).abs() < 1e-12);
    assert!((reduction_threshold(1.4, 1.0).unwrap() - 0.4436).abs() < 1e-4);
    assert!((reduction_threshold(2.0, 1.0).unwrap() - 0.367007).abs() < 1e-6);
}

#[test]
fn sweep_curve_landmarks() {
    assert!((delta_closed_form(0.1, 0.1, 1.0).unwrap() - 0.00333).abs() < 1e-5);
    assert!((delta_closed_form(0.1, 1.9, 1.0).unwrap() + 0.50193).abs() < 1e-5);
    assert!((delta_closed_form(0.40, 1.4, 1.0).unwrap() + 0.060952).abs() < 1e-6);
    assert!((delta_closed_form(0.45, 1.4, 1.0).unwrap() - 0.00869).abs() < 1e-5);
}

#[test]
fn closed_form_matches_quadrature() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..200 {
        let (x, n, b) = random_feasible(&mut rng);
        let q = quadrature_qe(x, n, b);
        let c = expected_qe_closed_form(x, n, b).unwrap();
        assert!((q - c).abs() < 1e-6 * (1.0 + c), "x={x} n={n} b={b}: {q} vs {c}");
    }
}

#[test]
fn exact_extension_matches_brute_force_outside_window() {
    let mut rng = StdRng::seed_from_u64(12);
    for _ in 0..50 {
        let b: f64 = rng.gen_range(0.3..2.0);
        let x = rng.gen_range(0.0..b);
        let n = rng.gen_range(0.01..6.0 * b);
        let steps = 400_000;
        let h = 2.0 * n / steps as f64;
        let brute: f64 = (0..steps)
            .map(|i| {
                let z = x - n + (i as f64 + 0.5) * h;
                let level = b * (2.0 * (z / (2.0 * b)).floor() + 1.0);
                (level - z) * (level - z) * h
            })
            .sum::<f64>()
            / (2.0 * n);
        let e = expected_qe_exact(x, n, b).unwrap();
        assert!((brute - e).abs() < 1e-6 * (1.0 + e), "x={x} n={n} b={b}");
    }
}

#[test]
fn sampled_expectation_matches_closed_form() {
    let mut rng = StdRng::seed_from_u64(13);
    for i in 0..10 {
        let (x, n, b) = random_feasible(&mut rng);
        let mc = monte_carlo_expected_qe(x, n, b, 200_000, i).unwrap();
        let c = expected_qe_closed_form(x, n, b).unwrap();
        assert!((mc.mean - c).abs() <= 5.0 * mc.std_error + 1e-9, "x={x} n={n} b={b}");
    }
}

#[test]
fn sign_flips_at_threshold() {
    let mut rng = StdRng::seed_from_u64(14);
    for _ in 0..100 {
        let b = rng.gen_range(0.2..3.0);
        let n = rng.gen_range(0.05 * b..=2.0 * b);
        let t = reduction_threshold(n, b).unwrap();
        if t < 1e-6 || t > n.min(2.0 * b - n) - 1e-6 {
            continue;
        }
        assert!(delta_closed_form(t - 1e-6, n, b).unwrap() < 0.0);
        assert!(delta_closed_form(t + 1e-6, n, b).unwrap() > 0.0);
    }
}

#[test]
fn default_sweeps_have_expected_shape() {
    let template = SnapshotSpec::new(0.1, 1.0, 0.1);
    let n_curve = sweep_n(0.1, 1.0, &linear_grid(0.1, 1.9, 0.1).unwrap(), &template).unwrap();
    assert_eq!(n_curve.len(), 19);
    let x_curve = sweep_x(1.4, 1.0, &linear_grid(0.0, 0.6, 0.05).unwrap(), &template).unwrap();
    assert_eq!(x_curve.len(), 13);
    let first = n_curve.to_csv();
    assert_eq!(first, sweep_n(0.1, 1.0, &linear_grid(0.1, 1.9, 0.1).unwrap(), &template).unwrap().to_csv());
}
