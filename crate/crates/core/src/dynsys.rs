//! Benchmark dynamical systems, time grids and trajectory data.
//!
//! A [`Trajectory`] (time stamps plus d-dimensional states) is the universal
//! data carrier of the crate: simulated reference solutions, noisy training
//! data, rollout outputs and CSV files all use it.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::integrate::{self, IntegrateError};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("time grid needs at least two points")]
    GridTooShort,
    #[error("time stamps must be strictly increasing (violated at index {0})")]
    NonMonotoneTime(usize),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("state rows ({rows}) do not match grid length ({grid})")]
    ShapeMismatch { rows: usize, grid: usize },
    #[error("step range b = {0} must lie in [0, 2) to keep steps positive")]
    BadStepRange(f64),
    #[error("bad CSV header: expected `t,x1,...,xd`, got `{0}`")]
    CsvHeader(String),
    #[error("CSV line {line}: expected {expected} fields, got {got}")]
    CsvRagged {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("CSV line {line}: unparseable number `{field}`")]
    CsvNumber { line: usize, field: String },
    #[error("unknown system `{0}` (expected `dho` or `vdp`)")]
    UnknownSystem(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solver(#[from] IntegrateError),
}

/// Strictly increasing time stamps; steps are `h_n = t_{n+1} - t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, DynError> {
        if times.len() < 2 {
            return Err(DynError::GridTooShort);
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(DynError::NonFinite);
        }
        for i in 1..times.len() {
            if times[i] <= times[i - 1] {
                return Err(DynError::NonMonotoneTime(i));
            }
        }
        Ok(Self { times })
    }

    /// Regular grid with `n_steps` steps of size `h` starting at `t0`.
    pub fn regular(t0: f64, n_steps: usize, h: f64) -> Result<Self, DynError> {
        assert!(h > 0.0, "step size must be positive");
        let times = (0..=n_steps).map(|i| t0 + h * i as f64).collect();
        Self::new(times)
    }

    /// Irregular grid: `t_{i+1} = t_i + h (1 + (w - 1/2) b)` with
    /// `w ~ U(0,1)` from the seeded generator. `b` controls the relative
    /// step spread; `b >= 2` could produce non-positive steps and is
    /// rejected.
    pub fn irregular(t0: f64, n_steps: usize, h: f64, b: f64, seed: u64) -> Result<Self, DynError> {
        assert!(h > 0.0, "step size must be positive");
        if !(0.0..2.0).contains(&b) {
            return Err(DynError::BadStepRange(b));
        }
        let mut rng = rng_from_seed(seed);
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut t = t0;
        times.push(t);
        for _ in 0..n_steps {
            let w: f64 = rng.gen_range(0.0..1.0);
            t += h * (1.0 + (w - 0.5) * b);
            times.push(t);
        }
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: length >= 2
    }

    /// Step sizes `h_n`, length `len() - 1`.
    pub fn steps(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Grid restricted to the first `n` points.
    pub fn head(&self, n: usize) -> Result<Self, DynError> {
        Self::new(self.times[..n.min(self.times.len())].to_vec())
    }
}

/// Time grid plus an N x d state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: DMatrix<f64>,
    pub noisy: bool,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: DMatrix<f64>, noisy: bool) -> Result<Self, DynError> {
        if states.nrows() != grid.len() {
            return Err(DynError::ShapeMismatch {
                rows: states.nrows(),
                grid: grid.len(),
            });
        }
        if states.ncols() == 0 || states.iter().any(|v| !v.is_finite()) {
            return Err(DynError::NonFinite);
        }
        Ok(Self { grid, states, noisy })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// State dimension d.
    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, n: usize) -> DVector<f64> {
        self.states.row(n).transpose()
    }

    /// First `n` points.
    pub fn head(&self, n: usize) -> Result<Self, DynError> {
        let n = n.min(self.len());
        Self::new(
            self.grid.head(n)?,
            self.states.rows(0, n).into_owned(),
            self.noisy,
        )
    }
}

/// An evaluable autonomous vector field `state -> d state/dt`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> &str {
        "field"
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64>;
}

/// Wrap a closure as a [`VectorField`].
pub struct FnField<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        (self.f)(state)
    }
}

/// Damped harmonic oscillator with cubic dynamics.
pub fn dho_rhs(state: [f64; 2]) -> [f64; 2] {
    let [x, y] = state;
    [
        -0.1 * x.powi(3) + 2.0 * y.powi(3),
        -2.0 * x.powi(3) - 0.1 * y.powi(3),
    ]
}

/// Van der Pol oscillator with mu = 0.5.
pub fn vdp_rhs(state: [f64; 2]) -> [f64; 2] {
    let [x, y] = state;
    [y, -x + 0.5 * y * (1.0 - x * x)]
}

pub struct Dho;

impl VectorField for Dho {
    fn dim(&self) -> usize {
        2
    }
    fn name(&self) -> &str {
        "dho"
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        let out = dho_rhs([state[0], state[1]]);
        DVector::from_column_slice(&out)
    }
}

pub struct Vdp;

impl VectorField for Vdp {
    fn dim(&self) -> usize {
        2
    }
    fn name(&self) -> &str {
        "vdp"
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        let out = vdp_rhs([state[0], state[1]]);
        DVector::from_column_slice(&out)
    }
}

/// Look up a benchmark system by its config name.
pub fn system_by_name(name: &str) -> Result<Box<dyn VectorField + Send>, DynError> {
    match name {
        "dho" => Ok(Box::new(Dho)),
        "vdp" => Ok(Box::new(Vdp)),
        other => Err(DynError::UnknownSystem(other.to_string())),
    }
}

/// Simulate a clean reference trajectory at exactly the grid times with the
/// adaptive RK4(5) solver.
pub fn simulate_reference(
    field: &dyn VectorField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory, DynError> {
    let states = integrate::rk45_dense(field, x0, grid, rtol, atol)?;
    Trajectory::new(grid.clone(), states, false)
}

/// Add i.i.d. per-dimension Gaussian observation noise. `sigma[u]` is the
/// standard deviation for dimension `u`; deterministic per seed.
pub fn add_noise(traj: &Trajectory, sigma: &[f64], seed: u64) -> Trajectory {
    assert_eq!(sigma.len(), traj.dim(), "one sigma per state dimension");
    assert!(sigma.iter().all(|s| *s >= 0.0), "sigma must be nonnegative");
    let mut rng = rng_from_seed(seed);
    let mut states = traj.states.clone();
    for n in 0..states.nrows() {
        for u in 0..states.ncols() {
            if sigma[u] > 0.0 {
                let dist = Normal::new(0.0, sigma[u]).unwrap();
                states[(n, u)] += dist.sample(&mut rng);
            }
        }
    }
    Trajectory {
        grid: traj.grid.clone(),
        states,
        noisy: true,
    }
}

/// Serialize a trajectory to `t,x1,...,xd` CSV with full round-trip
/// precision (17 significant digits).
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let d = traj.dim();
    let mut out = String::from("t");
    for u in 1..=d {
        let _ = write!(out, ",x{u}");
    }
    out.push('\n');
    for n in 0..traj.len() {
        let _ = write!(out, "{:.16e}", traj.grid.times()[n]);
        for u in 0..d {
            let _ = write!(out, ",{:.16e}", traj.states[(n, u)]);
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(traj: &Trajectory, path: &Path) -> Result<(), DynError> {
    std::fs::write(path, trajectory_to_csv(traj))?;
    Ok(())
}

pub fn trajectory_from_csv(text: &str) -> Result<Trajectory, DynError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DynError::CsvHeader(String::new()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "t" {
        return Err(DynError::CsvHeader(header.to_string()));
    }
    for (u, c) in cols[1..].iter().enumerate() {
        if *c != format!("x{}", u + 1) {
            return Err(DynError::CsvHeader(header.to_string()));
        }
    }
    let d = cols.len() - 1;

    let mut times = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(DynError::CsvRagged {
                line: idx + 1,
                expected: d + 1,
                got: fields.len(),
            });
        }
        let parse = |field: &str| -> Result<f64, DynError> {
            field.trim().parse::<f64>().map_err(|_| DynError::CsvNumber {
                line: idx + 1,
                field: field.to_string(),
            })
        };
        times.push(parse(fields[0])?);
        for f in &fields[1..] {
            rows.push(parse(f)?);
        }
    }
    let n = times.len();
    let grid = TimeGrid::new(times)?;
    let states = DMatrix::from_row_slice(n, d, &rows);
    Trajectory::new(grid, states, true)
}

pub fn load_csv(path: &Path) -> Result<Trajectory, DynError> {
    trajectory_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dho_fixed_point_and_values() {
        assert_eq!(dho_rhs([0.0, 0.0]), [0.0, 0.0]);
        let v = dho_rhs([1.0, 1.0]);
        assert_relative_eq!(v[0], 1.9, max_relative = 1e-15);
        assert_relative_eq!(v[1], -2.1, max_relative = 1e-15);
        let w = dho_rhs([2.0, 0.0]);
        assert_relative_eq!(w[0], -0.8, max_relative = 1e-15);
        assert_relative_eq!(w[1], -16.0, max_relative = 1e-15);
    }

    #[test]
    fn vdp_fixed_point_and_values() {
        assert_eq!(vdp_rhs([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(vdp_rhs([1.0, 1.0]), [1.0, -1.0]);
        let v = vdp_rhs([2.0, 1.0]);
        assert_relative_eq!(v[0], 1.0);
        assert_relative_eq!(v[1], -3.5, max_relative = 1e-15);
    }

    #[test]
    fn irregular_step_formula() {
        // w = 0.5 leaves h unchanged; w = 1 gives h(1 + b/2); w = 0 gives h(1 - b/2).
        let h = 0.1;
        let b = 0.5;
        assert_relative_eq!(h * (1.0 + (0.5 - 0.5) * b), 0.1);
        assert_relative_eq!(h * (1.0 + (1.0 - 0.5) * b), 0.125);
        assert_relative_eq!(h * (1.0 + (0.0 - 0.5) * b), 0.075);
    }

    #[test]
    fn irregular_grid_bounds_and_mean() {
        let h = 0.1;
        let b = 0.5;
        let grid = TimeGrid::irregular(0.0, 10_000, h, b, 7).unwrap();
        let steps = grid.steps();
        for s in &steps {
            assert!(*s >= h * (1.0 - b / 2.0) - 1e-12);
            assert!(*s <= h * (1.0 + b / 2.0) + 1e-12);
        }
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        assert!((mean - h).abs() < 0.01 * h, "mean step {mean} vs h {h}");
    }

    #[test]
    fn irregular_grid_deterministic_per_seed() {
        let a = TimeGrid::irregular(0.0, 50, 0.1, 0.5, 3).unwrap();
        let b = TimeGrid::irregular(0.0, 50, 0.1, 0.5, 3).unwrap();
        let c = TimeGrid::irregular(0.0, 50, 0.1, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn irregular_grid_rejects_wide_range() {
        assert!(matches!(
            TimeGrid::irregular(0.0, 10, 0.1, 2.0, 0),
            Err(DynError::BadStepRange(_))
        ));
    }

    #[test]
    fn simulate_constant_and_exponential() {
        let grid = TimeGrid::regular(0.0, 10, 0.1).unwrap();
        let zero = FnField {
            dim: 2,
            f: |_: &DVector<f64>| DVector::zeros(2),
        };
        let traj = simulate_reference(&zero, &DVector::from_vec(vec![1.0, 1.0]), &grid, 1e-6, 1e-8)
            .unwrap();
        for n in 0..traj.len() {
            assert_eq!(traj.states[(n, 0)], 1.0);
            assert_eq!(traj.states[(n, 1)], 1.0);
        }

        let lin = FnField {
            dim: 1,
            f: |x: &DVector<f64>| x.clone(),
        };
        let grid = TimeGrid::regular(0.0, 10, 0.1).unwrap();
        let traj =
            simulate_reference(&lin, &DVector::from_vec(vec![1.0]), &grid, 1e-9, 1e-12).unwrap();
        let end = traj.states[(10, 0)];
        assert_relative_eq!(end, std::f64::consts::E, max_relative = 1e-8);
    }

    #[test]
    fn linear_system_matches_matrix_exponential() {
        // x' = A x with A = [[0, 1], [-1, 0]] rotates; closed form via cos/sin.
        let rot = FnField {
            dim: 2,
            f: |x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0]]),
        };
        let rtol = 1e-8;
        let grid = TimeGrid::regular(0.0, 20, 0.1).unwrap();
        let traj =
            simulate_reference(&rot, &DVector::from_vec(vec![1.0, 0.0]), &grid, rtol, 1e-12)
                .unwrap();
        for (n, t) in grid.times().iter().enumerate() {
            assert!((traj.states[(n, 0)] - t.cos()).abs() <= 10.0 * rtol);
            assert!((traj.states[(n, 1)] + t.sin()).abs() <= 10.0 * rtol);
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let grid = TimeGrid::regular(0.0, 5, 0.2).unwrap();
        let states = DMatrix::from_fn(6, 2, |n, u| (n + u) as f64);
        let traj = Trajectory::new(grid, states, false).unwrap();
        let noisy = add_noise(&traj, &[0.0, 0.0], 1);
        assert_eq!(noisy.states, traj.states);
        assert!(noisy.noisy);
        assert_eq!(noisy.grid, traj.grid);
    }

    #[test]
    fn noise_empirical_std() {
        let grid = TimeGrid::regular(0.0, 100_000, 0.01).unwrap();
        let states = DMatrix::zeros(100_001, 1);
        let traj = Trajectory::new(grid, states, false).unwrap();
        let noisy = add_noise(&traj, &[0.1], 11);
        let n = noisy.states.nrows() as f64;
        let var = noisy.states.iter().map(|v| v * v).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.002, "empirical std {std}");
    }

    #[test]
    fn noise_distinct_seeds() {
        let grid = TimeGrid::regular(0.0, 5, 0.2).unwrap();
        let traj = Trajectory::new(grid, DMatrix::zeros(6, 2), false).unwrap();
        let a = add_noise(&traj, &[0.1, 0.1], 1);
        let b = add_noise(&traj, &[0.1, 0.1], 2);
        assert_ne!(a.states, b.states);
    }

    #[test]
    fn csv_round_trip() {
        let grid = TimeGrid::irregular(0.3, 7, 0.1, 0.5, 5).unwrap();
        let states = DMatrix::from_fn(8, 2, |n, u| ((n * 7 + u) as f64).sin() / 3.0);
        let traj = Trajectory::new(grid, states, true).unwrap();
        let text = trajectory_to_csv(&traj);
        let back = trajectory_from_csv(&text).unwrap();
        assert_eq!(back.grid, traj.grid);
        assert_eq!(back.states, traj.states);
    }

    #[test]
    fn csv_parse_small() {
        let text = "t,x1,x2\n0.0,1.0,2.0\n0.5,1.5,2.5\n1.0,2.0,3.0\n";
        let traj = trajectory_from_csv(text).unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(traj.dim(), 2);
        assert_eq!(traj.states[(1, 1)], 2.5);
    }

    #[test]
    fn csv_errors_are_distinct() {
        assert!(matches!(
            trajectory_from_csv("time,x1\n0,1\n1,2\n"),
            Err(DynError::CsvHeader(_))
        ));
        assert!(matches!(
            trajectory_from_csv("t,x1\n0.0,1.0\n0.5\n"),
            Err(DynError::CsvRagged { .. })
        ));
        assert!(matches!(
            trajectory_from_csv("t,x1\n0.0,1.0\n0.5,abc\n"),
            Err(DynError::CsvNumber { .. })
        ));
        assert!(matches!(
            trajectory_from_csv("t,x1\n1.0,1.0\n0.5,2.0\n"),
            Err(DynError::NonMonotoneTime(_))
        ));
    }
}
