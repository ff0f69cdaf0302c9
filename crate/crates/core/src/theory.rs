//! Quantization error of a single histogram snapshot under uniform noise.
//!
//! Geometry: one quantization bin of width `2b` whose rounding threshold sits
//! at 0, reconstruction levels at `±b`. Every element of a snapshot lies at
//! distance `x ∈ [0, b]` above the threshold, so `Q(x) = b` and the squared
//! error is `(b - x)^2`. Adding `N ~ U(-n, n)` spreads the snapshot over
//! `[x - n, x + n]`; for `x <= n <= 2b - x` that interval crosses exactly one
//! threshold, and
//!
//! ```text
//! E[QE(x + N)] = 1/(2n) [ ∫_{x-n}^0 (z + b)^2 dz + ∫_0^{x+n} (z - b)^2 dz ]
//!              = x^2 - (b/n) x^2 + n^2/3 - n b + b^2
//! ```
//!
//! (expanding the two cubes, the `n^3` terms combine to `n^3/3 * 2 / (2n)`,
//! hence `n^2/3`). The change against the noiseless error is
//! `D = -(b/n) x^2 + 2 b x + n^2/3 - n b`, which is `<= 0` exactly when
//! `x <= n (1 - sqrt(n / 3b))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sub_seed, Rng};

/// Slack for floating-point grid points sitting on a feasibility boundary.
pub const FEASIBILITY_TOL: f64 = 1e-9;

fn check_distance(x: f64, b: f64) -> Result<()> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Infeasible(format!("half bin width must be positive, got b={b}")));
    }
    if !(x >= -FEASIBILITY_TOL && x <= b + FEASIBILITY_TOL) {
        return Err(Error::Infeasible(format!("distance x={x} outside [0, b={b}]")));
    }
    Ok(())
}

/// `true` when `x <= n <= 2b - x` (within [`FEASIBILITY_TOL`]).
pub fn is_feasible(x: f64, n: f64, b: f64) -> bool {
    check_distance(x, b).is_ok()
        && n > 0.0
        && n >= x - FEASIBILITY_TOL
        && n <= 2.0 * b - x + FEASIBILITY_TOL
}

fn check_feasible(x: f64, n: f64, b: f64) -> Result<()> {
    check_distance(x, b)?;
    if !is_feasible(x, n, b) {
        return Err(Error::Infeasible(format!(
            "need x <= n <= 2b - x, got x={x}, n={n}, b={b}"
        )));
    }
    Ok(())
}

/// Per-element squared error of a snapshot at distance `x`: `(b - x)^2`.
pub fn snapshot_qe(x: f64, b: f64) -> Result<f64> {
    check_distance(x, b)?;
    Ok((b - x) * (b - x))
}

/// The interval of `n` on which the closed forms hold: `(x, 2b - x)`.
pub fn feasible_n_range(x: f64, b: f64) -> Result<(f64, f64)> {
    check_distance(x, b)?;
    Ok((x, 2.0 * b - x))
}

/// `E_N[QE(x + N)] = x^2 - (b/n) x^2 + n^2/3 - n b + b^2`.
pub fn expected_qe_closed_form(x: f64, n: f64, b: f64) -> Result<f64> {
    check_feasible(x, n, b)?;
    Ok(x * x - (b / n) * x * x + n * n / 3.0 - n * b + b * b)
}

/// `D = -(b/n) x^2 + 2 b x + n^2/3 - n b`; negative means the noise helps.
pub fn delta_closed_form(x: f64, n: f64, b: f64) -> Result<f64> {
    check_feasible(x, n, b)?;
    Ok(-(b / n) * x * x + 2.0 * b * x + n * n / 3.0 - n * b)
}

/// Largest distance at which noise of half-range `n` still reduces the
/// error: `x* = n (1 - sqrt(n / 3b))`.
pub fn reduction_threshold(n: f64, b: f64) -> Result<f64> {
    if !(n > 0.0) || !(b > 0.0) {
        return Err(Error::Infeasible(format!("need n > 0 and b > 0, got n={n}, b={b}")));
    }
    if n > 3.0 * b {
        return Err(Error::Infeasible(format!("need n <= 3b, got n={n}, b={b}")));
    }
    Ok(n * (1.0 - (n / (3.0 * b)).sqrt()))
}

/// Reconstruction of `z` on the grid with thresholds at multiples of `2b`
/// and levels at odd multiples of `b`. Inside the feasible window only the
/// two levels `±b` are reachable.
#[inline]
pub fn snapshot_quantize(z: f64, b: f64) -> f64 {
    b * (2.0 * (z / (2.0 * b)).floor() + 1.0)
}

#[inline]
fn noisy_sq_error(x: f64, noise: f64, b: f64) -> f64 {
    let z = x + noise;
    let e = snapshot_quantize(z, b) - z;
    e * e
}

/// `E_N[QE(x + N)]` for any `n > 0`, integrating the periodic squared-error
/// sawtooth exactly. Agrees with [`expected_qe_closed_form`] on the feasible
/// window and stays valid when the noise reaches further thresholds.
pub fn expected_qe_exact(x: f64, n: f64, b: f64) -> Result<f64> {
    check_distance(x, b)?;
    if !(n > 0.0) {
        return Err(Error::InvalidArgument(format!("need n > 0, got {n}")));
    }
    let period = 2.0 * b;
    let cumulative = |z: f64| {
        let k = (z / period).floor();
        let u = z - k * period;
        k * (2.0 * b * b * b / 3.0) + (b * b * b - (b - u).powi(3)) / 3.0
    };
    Ok((cumulative(x + n) - cumulative(x - n)) / (2.0 * n))
}

/// Exact expected change `E_N[QE(x + N)] - (b - x)^2` for any `n > 0`.
pub fn delta_exact(x: f64, n: f64, b: f64) -> Result<f64> {
    Ok(expected_qe_exact(x, n, b)? - snapshot_qe(x, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpec {
    pub x: f64,
    pub b: f64,
    pub n: f64,
    pub elements: usize,
    pub instances: usize,
    pub seed: u64,
}

impl SnapshotSpec {
    pub fn new(x: f64, b: f64, n: f64) -> Self {
        Self {
            x,
            b,
            n,
            elements: 20,
            instances: 10,
            seed: 0,
        }
    }
}

/// Mean and standard deviation over instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDelta {
    pub mean: f64,
    pub std: f64,
}

/// Simulates `instances` independently seeded noise vectors of length
/// `elements` on a snapshot fixed at `x` and reports the per-element mean
/// error change `mean_i (Q(x+N_i) - x - N_i)^2 - (b - x)^2`.
pub fn empirical_delta(spec: &SnapshotSpec) -> Result<EmpiricalDelta> {
    check_feasible(spec.x, spec.n, spec.b)?;
    if spec.elements == 0 || spec.instances == 0 {
        return Err(Error::InvalidArgument("elements and instances must be positive".into()));
    }
    let base = snapshot_qe(spec.x, spec.b)?;
    let deltas: Vec<f64> = (0..spec.instances)
        .map(|inst| {
            let mut rng = Rng::derive(spec.seed, inst as u64, "snapshot-noise");
            let total: f64 = (0..spec.elements)
                .map(|_| noisy_sq_error(spec.x, rng.uniform_f64(-spec.n, spec.n), spec.b))
                .sum();
            total / spec.elements as f64 - base
        })
        .collect();
    let k = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / k;
    let std = if deltas.len() > 1 {
        (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(EmpiricalDelta { mean, std })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Direct sampling estimate of `E_N[QE(x + N)]`; shares no code with the
/// closed forms.
pub fn monte_carlo_expected_qe(x: f64, n: f64, b: f64, samples: usize, seed: u64) -> Result<McEstimate> {
    check_distance(x, b)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    if !(n > 0.0) {
        return Err(Error::InvalidArgument(format!("need n > 0, got {n}")));
    }
    let mut rng = Rng::new(seed);
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let e = noisy_sq_error(x, rng.uniform_f64(-n, n), b);
        sum += e;
        sum_sq += e * e;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = if samples > 1 {
        ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / k).sqrt(),
    })
}

/// Which variable a [`DeltaCurve`] sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVar {
    N,
    X,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaCurve {
    pub sweep: SweepVar,
    pub grid: Vec<f64>,
    pub closed_form: Vec<Option<f64>>,
    pub emp_mean: Vec<Option<f64>>,
    pub emp_std: Vec<Option<f64>>,
    pub feasible: Vec<bool>,
}

impl DeltaCurve {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// CSV with header `sweep_value,closed_form,emp_mean,emp_std,feasible`;
    /// infeasible rows leave the numeric fields empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        let mut out = String::from("sweep_value,closed_form,emp_mean,emp_std,feasible\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.grid[i],
                fmt(self.closed_form[i]),
                fmt(self.emp_mean[i]),
                fmt(self.emp_std[i]),
                self.feasible[i]
            ));
        }
        out
    }

    /// Sign change of the empirical means, located by linear interpolation
    /// between the first pair of consecutive feasible points whose means
    /// change sign.
    pub fn empirical_root(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .grid
            .iter()
            .zip(&self.emp_mean)
            .filter_map(|(&g, m)| m.map(|m| (g, m)))
            .collect();
        pts.windows(2).find_map(|w| {
            let ((g0, m0), (g1, m1)) = (w[0], w[1]);
            if (m0 <= 0.0) != (m1 <= 0.0) {
                Some(g0 + (g1 - g0) * m0 / (m0 - m1))
            } else {
                None
            }
        })
    }
}

/// Inclusive grid `start, start + step, ..., end`, snapped to 1e-12 so
/// decimal steps land on their nominal values.
pub fn linear_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || end < start {
        return Err(Error::InvalidArgument(format!(
            "grid needs step > 0 and end >= start, got [{start}, {end}] step {step}"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + step * i as f64) * 1e12).round() / 1e12)
        .collect())
}

fn sweep(
    var: SweepVar,
    grid: &[f64],
    point: impl Fn(f64) -> (f64, f64),
    b: f64,
    template: &SnapshotSpec,
) -> Result<DeltaCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let mut curve = DeltaCurve {
        sweep: var,
        grid: grid.to_vec(),
        closed_form: Vec::with_capacity(grid.len()),
        emp_mean: Vec::with_capacity(grid.len()),
        emp_std: Vec::with_capacity(grid.len()),
        feasible: Vec::with_capacity(grid.len()),
    };
    for (i, &g) in grid.iter().enumerate() {
        let (x, n) = point(g);
        if is_feasible(x, n, b) {
            let spec = SnapshotSpec {
                x,
                b,
                n,
                seed: sub_seed(template.seed, i as u64, "sweep-point"),
                ..template.clone()
            };
            let emp = empirical_delta(&spec)?;
            curve.closed_form.push(Some(delta_closed_form(x, n, b)?));
            curve.emp_mean.push(Some(emp.mean));
            curve.emp_std.push(Some(emp.std));
            curve.feasible.push(true);
        } else {
            curve.closed_form.push(None);
            curve.emp_mean.push(None);
            curve.emp_std.push(None);
            curve.feasible.push(false);
        }
    }
    Ok(curve)
}

/// Sweeps the noise half-range at fixed distance `x`.
pub fn sweep_n(x: f64, b: f64, n_grid: &[f64], template: &SnapshotSpec) -> Result<DeltaCurve> {
    check_distance(x, b)?;
    sweep(SweepVar::N, n_grid, |n| (x, n), b, template)
}

/// Sweeps the distance at fixed noise half-range `n`.
pub fn sweep_x(n: f64, b: f64, x_grid: &[f64], template: &SnapshotSpec) -> Result<DeltaCurve> {
    if !(n > 0.0) {
        return Err(Error::Infeasible(format!("need n > 0, got {n}")));
    }
    sweep(SweepVar::X, x_grid, |x| (x, n), b, template)
}
