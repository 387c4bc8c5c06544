//! Prediction-time integration.
//!
//! Three rollout mechanisms share the [`RolloutResult`] contract: explicit
//! and implicit variable-step multistep rollouts, truncated-Taylor rollouts,
//! and an adaptive Dormand-Prince RK4(5) that integrates any evaluable
//! field. All of them accept sampled posterior dynamics as well as plain
//! closures.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynsys::{TimeGrid, Trajectory, VectorField};
use crate::gpcore::{posterior_level, ModelKind, TrainedModel};
use crate::mscoef::{generate_scheme, MultistepScheme};
use crate::rng::derive_seed;
use crate::sampler::{draw_multistep, draw_taylor, SampledDynamics};

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    MaxStepsExceeded { t: f64 },
    #[error("state left the admissible region at t = {t}")]
    Diverged { t: f64 },
    #[error("implicit solve failed to converge at step {step}")]
    ImplicitFailure { step: usize },
    #[error("initialization requires {needed} states, got {got}")]
    BadInit { needed: usize, got: usize },
    #[error("{failed} of {total} ensemble members failed to integrate")]
    EnsembleFailures { failed: usize, total: usize },
    #[error("rollout failed at step {step}")]
    RolloutFailed { step: usize },
    #[error(transparent)]
    Scheme(#[from] crate::mscoef::SchemeError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
}

/// Per-rollout solver statistics.
#[derive(Debug, Clone, Default)]
pub struct SolverStats {
    pub steps_taken: usize,
    pub rejected_steps: usize,
    pub implicit_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutStatus {
    Ok,
    /// Failure at the given output-step index; the trajectory (if any) is
    /// truncated to the completed points.
    SolverFailure { step: usize },
}

/// Outcome of one rollout. `trajectory` is `Some` exactly when the status is
/// [`RolloutStatus::Ok`], and then covers every requested time stamp.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub trajectory: Option<Trajectory>,
    pub stats: SolverStats,
    pub status: RolloutStatus,
}

impl RolloutResult {
    pub fn is_ok(&self) -> bool {
        self.status == RolloutStatus::Ok
    }
}

/// Per-level evaluable fields of a truncated Taylor expansion
/// (`level` runs 1..=levels; level 1 is the ODE right-hand side).
pub trait TaylorField: Sync {
    fn dim(&self) -> usize;
    fn levels(&self) -> usize;
    fn eval_level(&self, level: usize, x: &DVector<f64>) -> DVector<f64>;
}

/// Configuration of the damped-Newton solve inside implicit multistep steps.
#[derive(Debug, Clone)]
pub struct ImplicitSolveConfig {
    /// Relative convergence tolerance on the Newton update.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ImplicitSolveConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
        }
    }
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)
// ---------------------------------------------------------------------------

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// 5th-order solution weights (row 7 of the tableau).
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference between 5th- and embedded 4th-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const MAX_STEPS: usize = 10_000_000;

/// Integrate `field` from the first grid time and return the states at every
/// grid time as an N x d matrix. Output times are hit exactly by capping the
/// adaptive step; there is no dense interpolation.
pub fn rk45_dense(
    field: &dyn VectorField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    rtol: f64,
    atol: f64,
) -> Result<DMatrix<f64>, IntegrateError> {
    let mut stats = SolverStats::default();
    rk45_dense_capped(field, x0, grid, rtol, atol, f64::INFINITY, &mut stats)
}

pub(crate) fn rk45_dense_capped(
    field: &dyn VectorField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    rtol: f64,
    atol: f64,
    max_norm: f64,
    stats: &mut SolverStats,
) -> Result<DMatrix<f64>, IntegrateError> {
    let d = x0.len();
    let times = grid.times();
    let span = times[times.len() - 1] - times[0];
    let h_floor = 1e-14 * span;

    let mut out = DMatrix::zeros(times.len(), d);
    out.row_mut(0).copy_from(&x0.transpose());

    let mut t = times[0];
    let mut y = x0.clone();
    let mut k1 = field.eval(&y);
    // Start at the first output interval; the controller shrinks it if the
    // error estimate objects.
    let mut h = times[1] - times[0];
    let mut total_steps = 0usize;

    for (oi, &t_out) in times.iter().enumerate().skip(1) {
        while t < t_out {
            if total_steps >= MAX_STEPS {
                return Err(IntegrateError::MaxStepsExceeded { t });
            }
            total_steps += 1;
            let capped = h >= t_out - t;
            let h_try = if capped { t_out - t } else { h };
            if h_try < h_floor {
                return Err(IntegrateError::StepUnderflow { t });
            }

            let mut k = vec![k1.clone()];
            for s in 0..6 {
                let mut arg = y.clone();
                for (j, kj) in k.iter().enumerate() {
                    if DP_A[s][j] != 0.0 {
                        arg.axpy(h_try * DP_A[s][j], kj, 1.0);
                    }
                }
                let _ = DP_C; // stage times unused: autonomous fields only
                k.push(field.eval(&arg));
            }

            let mut y_new = y.clone();
            let mut err = DVector::zeros(d);
            for (j, kj) in k.iter().enumerate() {
                if DP_B5[j] != 0.0 {
                    y_new.axpy(h_try * DP_B5[j], kj, 1.0);
                }
                if DP_E[j] != 0.0 {
                    err.axpy(h_try * DP_E[j], kj, 1.0);
                }
            }

            if y_new.iter().any(|v| !v.is_finite()) || y_new.norm() > max_norm {
                return Err(IntegrateError::Diverged { t });
            }

            let mut err_norm = 0.0;
            for i in 0..d {
                let scale = atol + rtol * y[i].abs().max(y_new[i].abs());
                err_norm += (err[i] / scale).powi(2);
            }
            err_norm = (err_norm / d as f64).sqrt();

            if err_norm <= 1.0 {
                debug_assert!(err_norm <= 1.0);
                stats.steps_taken += 1;
                t = if capped { t_out } else { t + h_try };
                y = y_new;
                k1 = k.pop().unwrap(); // FSAL: k7 = f(y_new)
            } else {
                stats.rejected_steps += 1;
            }

            let fac = if err_norm == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            h = h_try * fac;
        }
        out.row_mut(oi).copy_from(&y.transpose());
    }
    Ok(out)
}

/// Adaptive RK4(5) rollout hitting every grid time.
pub fn rk45(
    field: &dyn VectorField,
    grid: &TimeGrid,
    x0: &DVector<f64>,
    rtol: f64,
    atol: f64,
) -> RolloutResult {
    rk45_capped(field, grid, x0, rtol, atol, f64::INFINITY)
}

pub fn rk45_capped(
    field: &dyn VectorField,
    grid: &TimeGrid,
    x0: &DVector<f64>,
    rtol: f64,
    atol: f64,
    max_norm: f64,
) -> RolloutResult {
    let mut stats = SolverStats::default();
    match rk45_dense_capped(field, x0, grid, rtol, atol, max_norm, &mut stats) {
        Ok(states) => RolloutResult {
            trajectory: Some(Trajectory::new(grid.clone(), states, false).expect("finite states")),
            stats,
            status: RolloutStatus::Ok,
        },
        Err(_) => RolloutResult {
            trajectory: None,
            stats,
            status: RolloutStatus::SolverFailure { step: 0 },
        },
    }
}

// ---------------------------------------------------------------------------
// Multistep rollout
// ---------------------------------------------------------------------------

/// Roll a multistep scheme out over its own grid.
///
/// `init` supplies the first `M + 1` states (the data head, matching the
/// scheme's grid); stepping starts at the second coefficient row. Implicit
/// schemes solve each step by damped Newton from an explicit-Euler
/// predictor, with a finite-difference Jacobian.
pub fn rollout_multistep(
    field: &dyn VectorField,
    scheme: &MultistepScheme,
    init: &[DVector<f64>],
    cfg: &ImplicitSolveConfig,
    max_norm: f64,
) -> RolloutResult {
    let m = scheme.steps();
    let grid = scheme.grid();
    let n_points = grid.len();
    let d = field.dim();
    let mut stats = SolverStats::default();

    if init.len() != m + 1 {
        return RolloutResult {
            trajectory: None,
            stats,
            status: RolloutStatus::SolverFailure { step: 0 },
        };
    }

    let mut states: Vec<DVector<f64>> = init.to_vec();
    // Dynamics evaluations at already-known states, reused across rows.
    let mut fvals: Vec<DVector<f64>> = states.iter().map(|x| field.eval(x)).collect();
    let steps = grid.steps();

    for n in 1..n_points - m {
        let row = scheme.row(n);
        // Known part: sum_{j<M} a_j x_{n+j} - sum_{j<M} b_j f(x_{n+j}).
        let mut c = DVector::zeros(d);
        for j in 0..m {
            c.axpy(row.a[j], &states[n + j], 1.0);
            c.axpy(-row.b[j], &fvals[n + j], 1.0);
        }
        let b_new = row.b[m];

        let z = if b_new == 0.0 {
            // Explicit: a_M = 1 forces x_{n+M} = -c.
            stats.steps_taken += 1;
            -c
        } else {
            // Predictor: explicit Euler from the newest known state.
            let h_pred = steps[n + m - 1];
            let pred = &states[n + m - 1] + h_pred * &fvals[n + m - 1];
            match newton_solve(field, &c, b_new, pred, cfg, &mut stats) {
                Some(z) => {
                    stats.steps_taken += 1;
                    z
                }
                None => {
                    return RolloutResult {
                        trajectory: None,
                        stats,
                        status: RolloutStatus::SolverFailure { step: n },
                    }
                }
            }
        };

        if z.iter().any(|v| !v.is_finite()) || z.norm() > max_norm {
            return RolloutResult {
                trajectory: None,
                stats,
                status: RolloutStatus::SolverFailure { step: n },
            };
        }
        fvals.push(field.eval(&z));
        states.push(z);
    }

    let mut mat = DMatrix::zeros(n_points, d);
    for (i, s) in states.iter().enumerate() {
        mat.row_mut(i).copy_from(&s.transpose());
    }
    RolloutResult {
        trajectory: Some(Trajectory::new(grid.clone(), mat, false).expect("finite states")),
        stats,
        status: RolloutStatus::Ok,
    }
}

/// Solve `z + c - b f(z) = 0` by damped Newton with a finite-difference
/// Jacobian (refreshed when damping is needed).
fn newton_solve(
    field: &dyn VectorField,
    c: &DVector<f64>,
    b: f64,
    mut z: DVector<f64>,
    cfg: &ImplicitSolveConfig,
    stats: &mut SolverStats,
) -> Option<DVector<f64>> {
    let d = z.len();
    let residual = |z: &DVector<f64>| -> DVector<f64> { z + c - b * field.eval(z) };

    let mut g = residual(&z);
    let mut jac: Option<DMatrix<f64>> = None;
    for _ in 0..cfg.max_iterations {
        stats.implicit_iterations += 1;
        let g_norm = g.norm();
        if !g_norm.is_finite() {
            return None;
        }
        if g_norm <= cfg.tolerance * (1.0 + z.norm()) {
            return Some(z);
        }
        if jac.is_none() {
            jac = Some(fd_jacobian(field, &z, b));
        }
        let lu = jac.as_ref().unwrap().clone().lu();
        let delta = lu.solve(&g)?;

        // Damped update: halve until the residual norm decreases.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let z_try = &z - lambda * &delta;
            let g_try = residual(&z_try);
            if g_try.norm() < g_norm {
                let step = lambda * delta.norm();
                z = z_try;
                g = g_try;
                accepted = true;
                if step <= cfg.tolerance * (1.0 + z.norm()) {
                    return Some(z);
                }
                break;
            }
            lambda *= 0.5;
            jac = None; // stale Jacobian suspected
        }
        if !accepted {
            jac = Some(fd_jacobian(field, &z, b));
            let lu = jac.as_ref().unwrap().clone().lu();
            let delta = lu.solve(&g)?;
            let z_try = &z - &delta;
            let g_try = residual(&z_try);
            if !g_try.norm().is_finite() || g_try.norm() >= g_norm {
                return None;
            }
            z = z_try;
            g = g_try;
        }
        let _ = d;
    }
    // Accept only if already essentially converged.
    if g.norm() <= cfg.tolerance * (1.0 + z.norm()) {
        Some(z)
    } else {
        None
    }
}

/// Jacobian of `z - b f(z)` by forward differences.
fn fd_jacobian(field: &dyn VectorField, z: &DVector<f64>, b: f64) -> DMatrix<f64> {
    let d = z.len();
    let f0 = field.eval(z);
    let mut jac = DMatrix::identity(d, d);
    for k in 0..d {
        let dz = 1e-7 * (1.0 + z[k].abs());
        let mut zp = z.clone();
        zp[k] += dz;
        let fp = field.eval(&zp);
        for i in 0..d {
            jac[(i, k)] -= b * (fp[i] - f0[i]) / dz;
        }
    }
    jac
}

// ---------------------------------------------------------------------------
// Taylor rollout
// ---------------------------------------------------------------------------

/// Truncated-Taylor rollout: `x_{n+1} = x_n + sum_l h_n^l / l! f^l(x_n)`.
pub fn rollout_taylor(
    fields: &dyn TaylorField,
    grid: &TimeGrid,
    x0: &DVector<f64>,
    max_norm: f64,
) -> RolloutResult {
    let d = fields.dim();
    let p = fields.levels();
    let steps = grid.steps();
    let mut stats = SolverStats::default();

    let mut states = DMatrix::zeros(grid.len(), d);
    states.row_mut(0).copy_from(&x0.transpose());
    let mut x = x0.clone();
    for (n, &h) in steps.iter().enumerate() {
        let mut next = x.clone();
        let mut weight = 1.0;
        for l in 1..=p {
            weight *= h / l as f64; // h^l / l!
            next.axpy(weight, &fields.eval_level(l, &x), 1.0);
        }
        if next.iter().any(|v| !v.is_finite()) || next.norm() > max_norm {
            return RolloutResult {
                trajectory: None,
                stats,
                status: RolloutStatus::SolverFailure { step: n },
            };
        }
        stats.steps_taken += 1;
        states.row_mut(n + 1).copy_from(&next.transpose());
        x = next;
    }
    RolloutResult {
        trajectory: Some(Trajectory::new(grid.clone(), states, false).expect("finite states")),
        stats,
        status: RolloutStatus::Ok,
    }
}

// ---------------------------------------------------------------------------
// Posterior-driven rollouts
// ---------------------------------------------------------------------------

/// Prediction-time integrator choice.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictIntegrator {
    Rk45 { rtol: f64, atol: f64 },
    /// Reuse the training scheme (kind and order) on the prediction grid.
    Training,
}

impl Default for PredictIntegrator {
    fn default() -> Self {
        PredictIntegrator::Rk45 {
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

/// Ensemble rollout configuration.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_samples: usize,
    /// Random Fourier features per prior draw.
    pub features: usize,
    pub seed: u64,
    pub integrator: PredictIntegrator,
    /// Norm guard: a state beyond this marks the member as failed.
    pub max_norm: f64,
    pub implicit: ImplicitSolveConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            features: 256,
            seed: 0,
            integrator: PredictIntegrator::default(),
            max_norm: 1e6,
            implicit: ImplicitSolveConfig::default(),
        }
    }
}

/// Pointwise statistics over the surviving ensemble members.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub n_samples: usize,
    pub failed: usize,
}

/// The posterior mean as an evaluable field (level means for Taylor).
pub struct PosteriorMeanField<'a> {
    pub model: &'a TrainedModel,
}

impl VectorField for PosteriorMeanField<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn name(&self) -> &str {
        "posterior mean"
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.model.state_dim(), |u, _| {
            posterior_level(self.model, u, 1, state.as_slice()).0
        })
    }
}

impl TaylorField for PosteriorMeanField<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }
    fn levels(&self) -> usize {
        self.model.levels()
    }
    fn eval_level(&self, level: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.model.state_dim(), |u, _| {
            posterior_level(self.model, u, level, x.as_slice()).0
        })
    }
}

/// Initial states for a rollout on `grid`: the first `M + 1` points of the
/// provided data for multistep training rollouts, the first point otherwise.
fn init_states(init: &Trajectory, needed: usize) -> Result<Vec<DVector<f64>>, IntegrateError> {
    if init.len() < needed {
        return Err(IntegrateError::BadInit {
            needed,
            got: init.len(),
        });
    }
    Ok((0..needed).map(|n| init.state(n)).collect())
}

enum RolloutDriver<'a> {
    Rk45 { rtol: f64, atol: f64 },
    TrainingMultistep(&'a MultistepScheme),
    TrainingTaylor,
}

fn make_driver<'a>(
    model: &TrainedModel,
    integrator: &PredictIntegrator,
    grid: &TimeGrid,
    scheme_slot: &'a mut Option<MultistepScheme>,
) -> Result<RolloutDriver<'a>, IntegrateError> {
    match integrator {
        PredictIntegrator::Rk45 { rtol, atol } => Ok(RolloutDriver::Rk45 {
            rtol: *rtol,
            atol: *atol,
        }),
        PredictIntegrator::Training => match model.spec.kind {
            ModelKind::Multistep { kind, order } => {
                *scheme_slot = Some(generate_scheme(kind, order, grid)?);
                Ok(RolloutDriver::TrainingMultistep(scheme_slot.as_ref().unwrap()))
            }
            ModelKind::Taylor { .. } => Ok(RolloutDriver::TrainingTaylor),
        },
    }
}

fn drive<F>(
    driver: &RolloutDriver<'_>,
    field: &F,
    grid: &TimeGrid,
    init: &Trajectory,
    implicit: &ImplicitSolveConfig,
    max_norm: f64,
) -> Result<RolloutResult, IntegrateError>
where
    F: VectorField + TaylorField,
{
    match driver {
        RolloutDriver::Rk45 { rtol, atol } => {
            let x0 = init_states(init, 1)?;
            Ok(rk45_capped(field, grid, &x0[0], *rtol, *atol, max_norm))
        }
        RolloutDriver::TrainingMultistep(scheme) => {
            let states = init_states(init, scheme.steps() + 1)?;
            Ok(rollout_multistep(field, scheme, &states, implicit, max_norm))
        }
        RolloutDriver::TrainingTaylor => {
            let x0 = init_states(init, 1)?;
            Ok(rollout_taylor(field, grid, &x0[0], max_norm))
        }
    }
}

/// Roll out the posterior mean with the requested integrator.
pub fn mean_rollout(
    model: &TrainedModel,
    grid: &TimeGrid,
    init: &Trajectory,
    integrator: &PredictIntegrator,
    implicit: &ImplicitSolveConfig,
    max_norm: f64,
) -> Result<RolloutResult, IntegrateError> {
    let mut scheme_slot = None;
    let driver = make_driver(model, integrator, grid, &mut scheme_slot)?;
    let field = PosteriorMeanField { model };
    drive(&driver, &field, grid, init, implicit, max_norm)
}

fn draw_for(model: &Arc<TrainedModel>, s: usize, seed: u64) -> Result<SampledDynamics, IntegrateError> {
    match model.spec.kind {
        ModelKind::Multistep { .. } => Ok(draw_multistep(model, s, seed)?),
        ModelKind::Taylor { .. } => Ok(draw_taylor(model, s, seed)?),
    }
}

/// Decoupled-sampling ensemble: draw `n_samples` dynamics functions, roll
/// each out, and report pointwise mean and variance over the survivors.
/// Members that diverge or fail their solves are excluded and counted; more
/// than 50% failures is an error.
pub fn ds_rollout_ensemble(
    model: &Arc<TrainedModel>,
    grid: &TimeGrid,
    init: &Trajectory,
    cfg: &EnsembleConfig,
) -> Result<EnsembleResult, IntegrateError> {
    let mut scheme_slot = None;
    let driver = make_driver(model, &cfg.integrator, grid, &mut scheme_slot)?;

    // Check the init contract once up front.
    match &driver {
        RolloutDriver::TrainingMultistep(s) => {
            init_states(init, s.steps() + 1)?;
        }
        _ => {
            init_states(init, 1)?;
        }
    }

    let rollouts: Vec<Option<DMatrix<f64>>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(cfg.seed, 0x5a5a_0000 + k as u64);
            let sample = draw_for(model, cfg.features, seed).ok()?;
            let res = drive(&driver, &sample, grid, init, &cfg.implicit, cfg.max_norm).ok()?;
            res.trajectory.map(|t| t.states)
        })
        .collect();

    let survivors: Vec<&DMatrix<f64>> = rollouts.iter().flatten().collect();
    let failed = cfg.n_samples - survivors.len();
    if survivors.is_empty() || failed * 2 > cfg.n_samples {
        return Err(IntegrateError::EnsembleFailures {
            failed,
            total: cfg.n_samples,
        });
    }

    let (rows, cols) = (survivors[0].nrows(), survivors[0].ncols());
    let n = survivors.len() as f64;
    let mut mean = DMatrix::zeros(rows, cols);
    for s in &survivors {
        mean += *s;
    }
    mean /= n;
    let mut variance = DMatrix::zeros(rows, cols);
    for s in &survivors {
        variance += (*s - &mean).map(|v| v * v);
    }
    variance /= n;

    Ok(EnsembleResult {
        mean,
        variance,
        n_samples: cfg.n_samples,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{FnField, Vdp};
    use crate::mscoef::{generate_scheme, SchemeKind};
    use approx::assert_relative_eq;

    fn decay() -> FnField<impl Fn(&DVector<f64>) -> DVector<f64> + Sync> {
        FnField {
            dim: 1,
            f: |x: &DVector<f64>| -x,
        }
    }

    #[test]
    fn rk45_zero_field_one_step_per_interval() {
        let grid = TimeGrid::regular(0.0, 10, 0.5).unwrap();
        let zero = FnField {
            dim: 1,
            f: |_: &DVector<f64>| DVector::zeros(1),
        };
        let res = rk45(&zero, &grid, &DVector::from_vec(vec![3.0]), 1e-6, 1e-8);
        assert!(res.is_ok());
        let traj = res.trajectory.unwrap();
        for n in 0..traj.len() {
            assert_eq!(traj.states[(n, 0)], 3.0);
        }
        assert_eq!(res.stats.steps_taken, 10);
        assert_eq!(res.stats.rejected_steps, 0);
    }

    #[test]
    fn rk45_exponential() {
        let grid = TimeGrid::regular(0.0, 4, 0.25).unwrap();
        let growth = FnField {
            dim: 1,
            f: |x: &DVector<f64>| x.clone(),
        };
        let rtol = 1e-6;
        let res = rk45(&growth, &grid, &DVector::from_vec(vec![1.0]), rtol, 1e-8);
        let traj = res.trajectory.unwrap();
        assert!((traj.states[(4, 0)] - std::f64::consts::E).abs() < 10.0 * rtol);
    }

    /// Fixed-step RK4 oracle used to pin the adaptive integrator.
    fn rk4_fixed(field: &dyn VectorField, x0: &DVector<f64>, t_end: f64, h: f64) -> DVector<f64> {
        let n = (t_end / h).round() as usize;
        let mut y = x0.clone();
        for _ in 0..n {
            let k1 = field.eval(&y);
            let k2 = field.eval(&(&y + (h / 2.0) * &k1));
            let k3 = field.eval(&(&y + (h / 2.0) * &k2));
            let k4 = field.eval(&(&y + h * &k3));
            y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        y
    }

    #[test]
    fn rk45_vdp_matches_dense_rk4_oracle() {
        let grid = TimeGrid::regular(0.0, 10, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![2.0, 0.0]);
        let res = rk45(&Vdp, &grid, &x0, 1e-8, 1e-10);
        let traj = res.trajectory.unwrap();
        let mut max_err: f64 = 0.0;
        for (n, &t) in grid.times().iter().enumerate().skip(1) {
            let oracle = rk4_fixed(&Vdp, &x0, t, 1e-4);
            for u in 0..2 {
                max_err = max_err.max((traj.states[(n, u)] - oracle[u]).abs());
            }
        }
        assert!(max_err < 1e-4, "sup-norm error {max_err}");
    }

    #[test]
    fn rk45_underflow_reported() {
        // A field that blows up in finite time forces the step under the floor.
        let blowup = FnField {
            dim: 1,
            f: |x: &DVector<f64>| {
                DVector::from_vec(vec![(1.0 + x[0] * x[0]) * (1.0 + x[0] * x[0])])
            },
        };
        let grid = TimeGrid::regular(0.0, 2, 5.0).unwrap();
        let res = rk45(&blowup, &grid, &DVector::from_vec(vec![1.0]), 1e-6, 1e-9);
        assert!(!res.is_ok());
        assert!(res.trajectory.is_none());
    }

    #[test]
    fn multistep_zero_field_constant() {
        for (kind, order) in [
            (SchemeKind::AdamsBashforth, 2),
            (SchemeKind::AdamsMoulton, 2),
            (SchemeKind::Bdf, 3),
        ] {
            let grid = TimeGrid::irregular(0.0, 20, 0.1, 0.5, 9).unwrap();
            let scheme = generate_scheme(kind, order, &grid).unwrap();
            let m = scheme.steps();
            let zero = FnField {
                dim: 2,
                f: |_: &DVector<f64>| DVector::zeros(2),
            };
            let init = vec![DVector::from_vec(vec![1.5, -0.5]); m + 1];
            let res = rollout_multistep(&zero, &scheme, &init, &Default::default(), 1e6);
            let traj = res.trajectory.unwrap();
            for n in 0..traj.len() {
                assert_relative_eq!(traj.states[(n, 0)], 1.5, max_relative = 1e-12);
                assert_relative_eq!(traj.states[(n, 1)], -0.5, max_relative = 1e-12);
            }
        }
    }

    /// Max error over the grid against the exact decay solution, with exact
    /// starting values.
    fn decay_error(kind: SchemeKind, order: usize, h: f64) -> f64 {
        let n = (2.0 / h).round() as usize;
        let grid = TimeGrid::regular(0.0, n, h).unwrap();
        let scheme = generate_scheme(kind, order, &grid).unwrap();
        let m = scheme.steps();
        let field = decay();
        let init: Vec<DVector<f64>> = (0..=m)
            .map(|i| DVector::from_vec(vec![(-grid.times()[i]).exp()]))
            .collect();
        let res = rollout_multistep(&field, &scheme, &init, &Default::default(), 1e6);
        let traj = res.trajectory.unwrap();
        grid.times()
            .iter()
            .enumerate()
            .map(|(i, t)| (traj.states[(i, 0)] - (-t).exp()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn multistep_convergence_orders() {
        for (kind, order) in [
            (SchemeKind::AdamsBashforth, 1),
            (SchemeKind::AdamsBashforth, 2),
            (SchemeKind::AdamsBashforth, 3),
            (SchemeKind::AdamsMoulton, 1),
            (SchemeKind::AdamsMoulton, 2),
            (SchemeKind::AdamsMoulton, 3),
            (SchemeKind::Bdf, 2),
            (SchemeKind::Bdf, 3),
        ] {
            let e1 = decay_error(kind, order, 0.1);
            let e2 = decay_error(kind, order, 0.05);
            let rate = (e1 / e2).log2();
            let p = order as f64;
            assert!(
                rate > p - 0.5 && rate < p + 0.8,
                "{kind:?} order {order}: observed rate {rate}"
            );
        }
    }

    #[test]
    fn bdf2_stiff_decay_is_stable() {
        let grid = TimeGrid::regular(0.0, 100, 0.1).unwrap();
        let scheme = generate_scheme(SchemeKind::Bdf, 2, &grid).unwrap();
        let stiff = FnField {
            dim: 1,
            f: |x: &DVector<f64>| -50.0 * x,
        };
        let init: Vec<DVector<f64>> = (0..=2)
            .map(|i| DVector::from_vec(vec![(-50.0 * grid.times()[i]).exp()]))
            .collect();
        let res = rollout_multistep(&stiff, &scheme, &init, &Default::default(), 1e6);
        let traj = res.trajectory.unwrap();
        // A-stability: bounded throughout, decaying after the initial
        // transient (the exact solution outpaces the scheme's own decay).
        for n in 0..traj.len() {
            assert!(traj.states[(n, 0)].abs() <= 1.0, "unbounded at step {n}");
        }
        for n in 5..traj.len() {
            assert!(traj.states[(n, 0)].abs() < 1e-3, "not decaying at step {n}");
        }
        assert!(traj.states[(100, 0)].abs() < 1e-6);
    }

    struct ExpTaylor {
        p: usize,
    }
    impl TaylorField for ExpTaylor {
        fn dim(&self) -> usize {
            1
        }
        fn levels(&self) -> usize {
            self.p
        }
        fn eval_level(&self, _level: usize, x: &DVector<f64>) -> DVector<f64> {
            x.clone() // for x' = x every Lie derivative is x
        }
    }

    #[test]
    fn taylor_one_step_truncated_exponential() {
        let grid = TimeGrid::regular(0.0, 1, 0.1).unwrap();
        let res = rollout_taylor(&ExpTaylor { p: 2 }, &grid, &DVector::from_vec(vec![1.0]), 1e6);
        let traj = res.trajectory.unwrap();
        assert_relative_eq!(traj.states[(1, 0)], 1.105, max_relative = 1e-14);
    }

    #[test]
    fn taylor_zero_field_constant() {
        struct Zeros;
        impl TaylorField for Zeros {
            fn dim(&self) -> usize {
                2
            }
            fn levels(&self) -> usize {
                3
            }
            fn eval_level(&self, _l: usize, _x: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(2)
            }
        }
        let grid = TimeGrid::regular(0.0, 5, 0.3).unwrap();
        let res = rollout_taylor(&Zeros, &grid, &DVector::from_vec(vec![2.0, -1.0]), 1e6);
        let traj = res.trajectory.unwrap();
        for n in 0..traj.len() {
            assert_eq!(traj.states[(n, 0)], 2.0);
            assert_eq!(traj.states[(n, 1)], -1.0);
        }
    }

    #[test]
    fn taylor_convergence_orders() {
        for p in 1..=3 {
            let err = |h: f64| -> f64 {
                let n = (1.0 / h).round() as usize;
                let grid = TimeGrid::regular(0.0, n, h).unwrap();
                let res =
                    rollout_taylor(&ExpTaylor { p }, &grid, &DVector::from_vec(vec![1.0]), 1e9);
                let traj = res.trajectory.unwrap();
                grid.times()
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (traj.states[(i, 0)] - t.exp()).abs())
                    .fold(0.0, f64::max)
            };
            let rate = (err(0.1) / err(0.05)).log2();
            let pf = p as f64;
            assert!(
                rate > pf - 0.5 && rate < pf + 0.8,
                "taylor order {p}: rate {rate}"
            );
        }
    }

    #[test]
    fn taylor_p1_equals_euler_rollout() {
        let grid = TimeGrid::irregular(0.0, 15, 0.1, 0.5, 2).unwrap();
        let scheme = generate_scheme(SchemeKind::AdamsBashforth, 1, &grid).unwrap();
        let field = decay();
        let x0 = DVector::from_vec(vec![1.0]);
        let x1 = {
            // Euler from x0 over the first step, to line up the init contract.
            let h0 = grid.steps()[0];
            &x0 + h0 * field.eval(&x0)
        };
        let ms = rollout_multistep(
            &field,
            &scheme,
            &[x0.clone(), x1],
            &Default::default(),
            1e6,
        );
        let ty = rollout_taylor(&ExpTaylorDecay, &grid, &x0, 1e6);
        let (a, b) = (ms.trajectory.unwrap(), ty.trajectory.unwrap());
        for n in 0..a.len() {
            assert_relative_eq!(a.states[(n, 0)], b.states[(n, 0)], max_relative = 1e-12);
        }
    }

    struct ExpTaylorDecay;
    impl TaylorField for ExpTaylorDecay {
        fn dim(&self) -> usize {
            1
        }
        fn levels(&self) -> usize {
            1
        }
        fn eval_level(&self, _l: usize, x: &DVector<f64>) -> DVector<f64> {
            -x.clone()
        }
    }

    // --- ensemble ---

    use crate::gpcore::{factorize_dim, DimKernels, DimModel, ModelSpec, TrainedModel};
    use crate::kernels::ArdHypers;
    use crate::obsmodel::{multistep_observations, with_noise, NoiseVariant};

    /// Euler-transformed decay data with fixed hypers; enough signal for a
    /// confident posterior.
    fn decay_model(sigma: f64) -> (Arc<TrainedModel>, Trajectory) {
        let grid = TimeGrid::regular(0.0, 40, 0.1).unwrap();
        let states = DMatrix::from_fn(41, 1, |n, _| 1.5 * (-grid.times()[n]).exp());
        let traj = Trajectory::new(grid, states, true).unwrap();
        let scheme = generate_scheme(SchemeKind::AdamsBashforth, 1, &traj.grid).unwrap();
        let ds = with_noise(
            multistep_observations(&traj, &scheme, 0).unwrap(),
            sigma,
            NoiseVariant::DiagTimeVarying,
        );
        let kernels = DimKernels::Multistep(ArdHypers::new(1.0, &[0.7]));
        let factor = factorize_dim(&ds, &kernels, 0, 1, sigma, 1e-8).unwrap();
        let model = TrainedModel {
            spec: ModelSpec {
                kind: ModelKind::Multistep {
                    kind: SchemeKind::AdamsBashforth,
                    order: 1,
                },
                noise_variant: NoiseVariant::DiagTimeVarying,
            },
            dims: vec![DimModel {
                dataset: ds,
                kernels,
                sigma,
                factor,
            }],
            seed: 0,
            data_hash: 0,
        };
        (Arc::new(model), traj)
    }

    #[test]
    fn ensemble_single_sample_has_zero_variance() {
        let (model, traj) = decay_model(1e-3);
        let cfg = EnsembleConfig {
            n_samples: 1,
            features: 64,
            seed: 3,
            ..Default::default()
        };
        let res = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg).unwrap();
        assert_eq!(res.failed, 0);
        assert!(res.variance.amax() == 0.0);
    }

    #[test]
    fn ensemble_deterministic_per_seed() {
        let (model, traj) = decay_model(1e-3);
        let cfg = EnsembleConfig {
            n_samples: 8,
            features: 64,
            seed: 5,
            ..Default::default()
        };
        let a = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg).unwrap();
        let b = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 6;
        let c = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg2).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn ensemble_spread_shrinks_with_confident_posterior() {
        // Dense data with tiny noise: ensemble spread stays within 10x the
        // posterior-mean rollout error.
        let (model, traj) = decay_model(1e-4);
        let cfg = EnsembleConfig {
            n_samples: 48,
            features: 256,
            seed: 11,
            ..Default::default()
        };
        let res = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg).unwrap();
        let mean_roll = mean_rollout(
            &model,
            &traj.grid,
            &traj,
            &PredictIntegrator::default(),
            &Default::default(),
            1e6,
        )
        .unwrap();
        let mean_traj = mean_roll.trajectory.unwrap();
        let mut mean_err: f64 = 0.0;
        for n in 0..traj.len() {
            mean_err = mean_err.max((mean_traj.states[(n, 0)] - traj.states[(n, 0)]).abs());
        }
        let spread = res.variance.amax().sqrt();
        assert!(
            spread <= 10.0 * mean_err.max(1e-4),
            "spread {spread} vs mean error {mean_err}"
        );
        // And both track the data closely in absolute terms.
        let mut ds_err: f64 = 0.0;
        for n in 0..traj.len() {
            ds_err = ds_err.max((res.mean[(n, 0)] - traj.states[(n, 0)]).abs());
        }
        assert!(ds_err < 0.05, "DS mean error {ds_err}");
    }

    #[test]
    fn ensemble_training_integrator_matches_scheme_rollout() {
        let (model, traj) = decay_model(1e-3);
        let cfg = EnsembleConfig {
            n_samples: 4,
            features: 64,
            seed: 9,
            integrator: PredictIntegrator::Training,
            ..Default::default()
        };
        let res = ds_rollout_ensemble(&model, &traj.grid, &traj, &cfg).unwrap();
        // Initial states come straight from the data head.
        assert_eq!(res.mean[(0, 0)], traj.states[(0, 0)]);
        assert_eq!(res.mean[(1, 0)], traj.states[(1, 0)]);
        assert_eq!(res.failed, 0);
    }
}
