//! Hyperparameter training by marginal-likelihood ascent.
//!
//! All positive parameters live in log space (exp activation). The optimizer
//! is fixed-step gradient ascent with adaptive moment scaling (Adam-style);
//! gradients come from central finite differences by default, with analytic
//! gradients available for the ARD families. Non-Euler models are trained in
//! two stages: an explicit-Euler-transformed model first, whose
//! hyperparameters initialize the target scheme's optimization.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynsys::Trajectory;
use crate::kernels::ArdHypers;
use crate::mscoef::{generate_scheme, SchemeKind};
use crate::obsmodel::{
    multistep_observations, noise_for, taylor_observations, with_noise, NoiseModel, Transform,
    TransformedDataset,
};
use crate::rng::{derive_seed, rng_from_seed};

use super::{
    base_gram, composite_from_base, factorize_dim, gram, taylor_weight, DimKernels, DimModel,
    GpError, ModelKind, ModelSpec, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Iterations of the explicit-Euler initialization stage.
    pub pretrain_iterations: usize,
    pub learning_rate: f64,
    /// Jitter relative to the mean signal variance.
    pub jitter_rel: f64,
    pub restarts: usize,
    pub seed: u64,
    pub gradient: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            pretrain_iterations: 2000,
            learning_rate: 0.05,
            jitter_rel: 1e-8,
            restarts: 1,
            seed: 0,
            gradient: GradientMode::FiniteDifference,
        }
    }
}

/// Initial kernel/noise state for one dimension.
#[derive(Debug, Clone)]
pub struct InitState {
    pub kernels: DimKernels,
    pub sigma: f64,
}

const PENALTY: f64 = 1e12;

// ---------------------------------------------------------------------------
// Parameter packing
// ---------------------------------------------------------------------------

fn pack(kernels: &DimKernels, sigma: f64) -> Vec<f64> {
    let mut theta = Vec::new();
    match kernels {
        DimKernels::Multistep(h) => theta.extend(h.to_log_vec()),
        DimKernels::TaylorIndependent(v) => {
            for h in v {
                theta.extend(h.to_log_vec());
            }
        }
        DimKernels::TaylorAdapted { .. } => panic!("adapted kernels train jointly"),
    }
    theta.push(sigma.ln());
    theta
}

fn unpack(template: &DimKernels, theta: &[f64]) -> (DimKernels, f64) {
    let sigma = theta[theta.len() - 1].exp();
    let kernels = match template {
        DimKernels::Multistep(h) => {
            DimKernels::Multistep(ArdHypers::from_log_vec(&theta[..h.dim() + 1]))
        }
        DimKernels::TaylorIndependent(v) => {
            let w = v[0].dim() + 1;
            DimKernels::TaylorIndependent(
                (0..v.len())
                    .map(|l| ArdHypers::from_log_vec(&theta[l * w..(l + 1) * w]))
                    .collect(),
            )
        }
        DimKernels::TaylorAdapted { .. } => unreachable!(),
    };
    (kernels, sigma)
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

fn nll_value(ds: &TransformedDataset, kernels: &DimKernels, p: usize, sigma: f64, jitter_rel: f64) -> f64 {
    match factorize_dim(ds, kernels, ds.dim, p, sigma, jitter_rel) {
        Ok(f) if f.nll.is_finite() => f.nll,
        _ => PENALTY,
    }
}

fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let step = 1e-4;
    let mut g = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Analytic nll gradient for the ARD families:
/// `d nll/d theta = 1/2 tr(A^{-1} dA) - 1/2 alpha^T dA alpha`.
fn value_and_grad_analytic(
    ds: &TransformedDataset,
    template: &DimKernels,
    p: usize,
    theta: &[f64],
    jitter_rel: f64,
) -> (f64, Vec<f64>) {
    let (kernels, sigma) = unpack(template, theta);
    let kmat = gram(&kernels, ds.dim, p, ds);
    let noise = noise_for(ds, sigma);
    let scale = kernels.signal_scale();
    let fac = match super::nll_factorize(&kmat, &noise, &ds.y, jitter_rel * scale) {
        Ok(f) if f.nll.is_finite() => f,
        _ => {
            // Fall back to a penalized finite-difference probe around a
            // failed point; pushes the optimizer back into feasible space.
            let mut f = |t: &[f64]| {
                let (k, s) = unpack(template, t);
                nll_value(ds, &k, p, s, jitter_rel)
            };
            let g = fd_gradient(&mut f, theta);
            return (PENALTY, g);
        }
    };
    let a_inv = fac.chol.inverse();
    let alpha = &fac.alpha;

    let grad_for = |da: &DMatrix<f64>| -> f64 {
        let mut tr = 0.0;
        for i in 0..da.nrows() {
            for j in 0..da.ncols() {
                tr += a_inv[(i, j)] * da[(i, j)];
            }
        }
        0.5 * (tr - alpha.dot(&(da * alpha)))
    };
    let grad_diag = |dv: &DVector<f64>| -> f64 {
        let mut tr = 0.0;
        let mut quad = 0.0;
        for i in 0..dv.len() {
            tr += a_inv[(i, i)] * dv[i];
            quad += alpha[i] * alpha[i] * dv[i];
        }
        0.5 * (tr - quad)
    };

    let r = ds.len();
    let mut grads = Vec::with_capacity(theta.len());

    match (&kernels, &ds.transform) {
        (DimKernels::Multistep(h), Transform::Multistep(scheme)) => {
            let g = base_gram(&|a: &[f64], b: &[f64]| crate::kernels::ard_eval(h, a, b), &ds.points);
            // d/d log sigma_f^2: the whole K scales, plus the tied jitter.
            let jit_term = jitter_rel * h.signal_variance();
            let mut da = composite_from_base(&g, scheme);
            for i in 0..r {
                da[(i, i)] += jit_term;
            }
            grads.push(grad_for(&da));
            // d/d log l_j: entrywise (x_pj - x_qj)^2 / l_j^2 factor.
            for j in 0..h.dim() {
                let lj2 = h.lengthscale(j) * h.lengthscale(j);
                let gd = DMatrix::from_fn(g.nrows(), g.ncols(), |pq, q| {
                    let d = ds.points[pq][j] - ds.points[q][j];
                    g[(pq, q)] * d * d / lj2
                });
                grads.push(grad_for(&composite_from_base(&gd, scheme)));
            }
        }
        (DimKernels::TaylorIndependent(levels), Transform::Taylor { steps }) => {
            let p_levels = levels.len();
            for (li, h) in levels.iter().enumerate() {
                let level = li + 1;
                let g = base_gram(
                    &|a: &[f64], b: &[f64]| crate::kernels::ard_eval(h, a, b),
                    &ds.points,
                );
                let w: Vec<f64> = steps.iter().map(|&hn| taylor_weight(hn, level)).collect();
                let weighted = |m: &DMatrix<f64>| {
                    DMatrix::from_fn(r, r, |n, mm| w[n] * w[mm] * m[(n, mm)])
                };
                let jit_term = jitter_rel * h.signal_variance() / p_levels as f64;
                let mut da = weighted(&g);
                for i in 0..r {
                    da[(i, i)] += jit_term;
                }
                grads.push(grad_for(&da));
                for j in 0..h.dim() {
                    let lj2 = h.lengthscale(j) * h.lengthscale(j);
                    let gd = DMatrix::from_fn(g.nrows(), g.ncols(), |pq, q| {
                        let d = ds.points[pq][j] - ds.points[q][j];
                        g[(pq, q)] * d * d / lj2
                    });
                    grads.push(grad_for(&weighted(&gd)));
                }
            }
        }
        _ => unreachable!("analytic gradients cover the ARD families"),
    }

    // d/d log sigma: noise scales with sigma^2.
    match &noise {
        NoiseModel::DiagTimeVarying(v) => grads.push(grad_diag(&(2.0 * v))),
        NoiseModel::IidConstant(lam) => {
            grads.push(grad_diag(&DVector::from_element(r, 2.0 * lam)))
        }
        NoiseModel::Full(s) => grads.push(grad_for(&(2.0 * s))),
    }

    (fac.nll, grads)
}

#[cfg(test)]
pub(crate) fn test_value_and_grad_analytic(
    ds: &TransformedDataset,
    template: &DimKernels,
    p: usize,
    theta: &[f64],
    jitter_rel: f64,
) -> (f64, Vec<f64>) {
    value_and_grad_analytic(ds, template, p, theta, jitter_rel)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Fixed-step gradient descent on nll with adaptive moment scaling.
/// Returns the best parameters seen.
fn adam_minimize(
    value_and_grad: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    theta0: Vec<f64>,
    iterations: usize,
    lr: f64,
) -> (Vec<f64>, f64) {
    let n = theta0.len();
    let mut theta = theta0;
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut best = theta.clone();
    let mut best_val = f64::INFINITY;

    for it in 1..=iterations {
        let (val, mut g) = value_and_grad(&theta);
        if val < best_val {
            best_val = val;
            best = theta.clone();
        }
        // Clip to keep single bad probes from derailing the moments.
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm > 100.0 {
            for gi in &mut g {
                *gi *= 100.0 / gnorm;
            }
        }
        let bc1 = 1.0 - b1.powi(it as i32);
        let bc2 = 1.0 - b2.powi(it as i32);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    let (val, _) = value_and_grad(&theta);
    if val < best_val {
        best_val = val;
        best = theta;
    }
    (best, best_val)
}

fn train_dim_independent(
    ds: &TransformedDataset,
    p: usize,
    init: &InitState,
    cfg: &TrainConfig,
    iterations: usize,
    restart_seed: u64,
) -> Result<(DimKernels, f64), GpError> {
    let template = init.kernels.clone();
    let theta0 = pack(&init.kernels, init.sigma);

    let init_val = {
        let (k, s) = unpack(&template, &theta0);
        nll_value(ds, &k, p, s, cfg.jitter_rel)
    };
    if !init_val.is_finite() || init_val >= PENALTY {
        return Err(GpError::NonFiniteInit(init_val));
    }

    let mut best_theta = theta0.clone();
    let mut best_val = f64::INFINITY;
    for r in 0..cfg.restarts.max(1) {
        let start = if r == 0 {
            theta0.clone()
        } else {
            let mut rng = rng_from_seed(derive_seed(restart_seed, r as u64));
            theta0
                .iter()
                .map(|t| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    t + 0.3 * z
                })
                .collect()
        };
        let mut vg: Box<dyn FnMut(&[f64]) -> (f64, Vec<f64>)> = match cfg.gradient {
            GradientMode::Analytic => Box::new(|t: &[f64]| {
                value_and_grad_analytic(ds, &template, p, t, cfg.jitter_rel)
            }),
            GradientMode::FiniteDifference => Box::new(|t: &[f64]| {
                let mut f = |tt: &[f64]| {
                    let (k, s) = unpack(&template, tt);
                    nll_value(ds, &k, p, s, cfg.jitter_rel)
                };
                let g = fd_gradient(&mut f, t);
                (f(t), g)
            }),
        };
        let (theta, val) = adam_minimize(&mut vg, start, iterations, cfg.learning_rate);
        if val < best_val {
            best_val = val;
            best_theta = theta;
        }
    }
    let (kernels, sigma) = unpack(&template, &best_theta);
    Ok((kernels, sigma))
}

/// Joint training of the adapted-Taylor hyperparameters: the base kernels
/// are shared by all output dimensions and levels, so the objective is the
/// sum of the per-dimension likelihoods. Finite differences only.
fn train_adapted(
    datasets: &[TransformedDataset],
    p: usize,
    init_base: Vec<ArdHypers>,
    init_sigma: Vec<f64>,
    cfg: &TrainConfig,
    iterations: usize,
) -> Result<(Vec<ArdHypers>, Vec<f64>), GpError> {
    let d = datasets.len();
    let w = init_base[0].dim() + 1;
    let mut theta0 = Vec::with_capacity(d * w + d);
    for h in &init_base {
        theta0.extend(h.to_log_vec());
    }
    theta0.extend(init_sigma.iter().map(|s| s.ln()));

    let unpack_joint = |theta: &[f64]| -> (Vec<ArdHypers>, Vec<f64>) {
        let base: Vec<ArdHypers> = (0..d)
            .map(|j| ArdHypers::from_log_vec(&theta[j * w..(j + 1) * w]))
            .collect();
        let sigmas: Vec<f64> = theta[d * w..].iter().map(|t| t.exp()).collect();
        (base, sigmas)
    };
    let mut value = |theta: &[f64]| -> f64 {
        let (base, sigmas) = unpack_joint(theta);
        let kernels = DimKernels::TaylorAdapted { base };
        let mut total = 0.0;
        for (u, ds) in datasets.iter().enumerate() {
            let v = nll_value(ds, &kernels, p, sigmas[u], cfg.jitter_rel);
            if v >= PENALTY {
                return PENALTY;
            }
            total += v;
        }
        total
    };

    let init_val = value(&theta0);
    if !init_val.is_finite() || init_val >= PENALTY {
        return Err(GpError::NonFiniteInit(init_val));
    }

    let mut vg = |t: &[f64]| -> (f64, Vec<f64>) {
        let g = fd_gradient(&mut value, t);
        (value(t), g)
    };
    let (best, _) = adam_minimize(&mut vg, theta0, iterations, cfg.learning_rate);
    Ok(unpack_joint(&best))
}

// ---------------------------------------------------------------------------
// Initialization heuristics
// ---------------------------------------------------------------------------

/// Data-driven starting point: lengthscales from the coordinate spread,
/// signal variance matching var(Y) through the mean squared row weight,
/// noise at a fraction of the observation spread.
fn default_init(ds: &TransformedDataset) -> (ArdHypers, f64) {
    let d = ds.state_dim();
    let n = ds.points.len() as f64;
    let mut ls = vec![0.0; d];
    for j in 0..d {
        let mean = ds.points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = ds.points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        ls[j] = var.sqrt().max(0.05);
    }
    let var_y = ds.y.iter().map(|v| v * v).sum::<f64>() / ds.y.len() as f64;
    let mean_w2 = match &ds.transform {
        Transform::Multistep(s) => {
            s.rows()
                .iter()
                .map(|r| r.b.iter().map(|b| b * b).sum::<f64>())
                .sum::<f64>()
                / s.n_rows() as f64
        }
        Transform::Taylor { steps } => {
            steps.iter().map(|h| h * h).sum::<f64>() / steps.len() as f64
        }
    };
    let sv = (var_y / mean_w2).max(1e-8);
    let sigma = (0.3 * var_y.sqrt()).max(1e-6);
    (ArdHypers::new(sv, &ls), sigma)
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Train per-dimension GPs on already-transformed datasets.
///
/// `levels` is the Taylor truncation order (1 for multistep datasets);
/// `adapted` switches the Taylor kernels to the shared-base family. `init`
/// overrides the data-driven starting point (used by the Euler pretraining
/// stage).
pub fn train_datasets(
    datasets: Vec<TransformedDataset>,
    levels: usize,
    adapted: bool,
    cfg: &TrainConfig,
    iterations: usize,
    init: Option<Vec<InitState>>,
) -> Result<Vec<DimModel>, GpError> {
    let d = datasets.len();
    assert!(d >= 1);

    if adapted {
        let (base0, sigma0) = match init {
            Some(states) => {
                let mut base = Vec::with_capacity(d);
                let mut sig = Vec::with_capacity(d);
                for st in states {
                    match st.kernels {
                        DimKernels::Multistep(h) => base.push(h),
                        _ => {
                            return Err(GpError::Unsupported(
                                "adapted init must carry base ARD kernels".into(),
                            ))
                        }
                    }
                    sig.push(st.sigma);
                }
                (base, sig)
            }
            None => {
                let mut base = Vec::with_capacity(d);
                let mut sig = Vec::with_capacity(d);
                for ds in &datasets {
                    let (h, s) = default_init(ds);
                    base.push(h);
                    sig.push(s);
                }
                (base, sig)
            }
        };
        let (base, sigmas) = train_adapted(&datasets, levels, base0, sigma0, cfg, iterations)?;
        let mut dims = Vec::with_capacity(d);
        for (u, ds) in datasets.into_iter().enumerate() {
            let kernels = DimKernels::TaylorAdapted { base: base.clone() };
            let factor = factorize_dim(&ds, &kernels, u, levels, sigmas[u], cfg.jitter_rel)?;
            dims.push(DimModel {
                dataset: ds,
                kernels,
                sigma: sigmas[u],
                factor,
            });
        }
        return Ok(dims);
    }

    let inits: Vec<InitState> = match init {
        Some(states) => states,
        None => datasets
            .iter()
            .map(|ds| {
                let (h, sigma) = default_init(ds);
                let kernels = match &ds.transform {
                    Transform::Multistep(_) => DimKernels::Multistep(h),
                    Transform::Taylor { .. } => {
                        DimKernels::TaylorIndependent(vec![h; levels])
                    }
                };
                InitState { kernels, sigma }
            })
            .collect(),
    };

    datasets
        .into_par_iter()
        .zip(inits)
        .enumerate()
        .map(|(u, (ds, init))| {
            let (kernels, sigma) = train_dim_independent(
                &ds,
                levels,
                &init,
                cfg,
                iterations,
                derive_seed(cfg.seed, 7000 + u as u64),
            )?;
            let factor = factorize_dim(&ds, &kernels, u, levels, sigma, cfg.jitter_rel)?;
            Ok(DimModel {
                dataset: ds,
                kernels,
                sigma,
                factor,
            })
        })
        .collect()
}

pub(crate) fn build_datasets(
    traj: &Trajectory,
    spec: &ModelSpec,
    sigma_nominal: f64,
) -> Result<Vec<TransformedDataset>, GpError> {
    let d = traj.dim();
    match spec.kind {
        ModelKind::Multistep { kind, order } => {
            let scheme = generate_scheme(kind, order, &traj.grid)?;
            (0..d)
                .map(|u| {
                    Ok(with_noise(
                        multistep_observations(traj, &scheme, u)?,
                        sigma_nominal,
                        spec.noise_variant,
                    ))
                })
                .collect()
        }
        ModelKind::Taylor { .. } => (0..d)
            .map(|u| {
                Ok(with_noise(
                    taylor_observations(traj, u)?,
                    sigma_nominal,
                    spec.noise_variant,
                ))
            })
            .collect(),
    }
}

/// Two-stage training from a trajectory: an explicit-Euler model is trained
/// first (unless the target already is Euler), and its hyperparameters
/// initialize the target scheme's optimization.
pub fn train(traj: &Trajectory, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainedModel, GpError> {
    let is_euler = matches!(
        spec.kind,
        ModelKind::Multistep {
            kind: SchemeKind::AdamsBashforth,
            order: 1
        }
    );

    let pretrained: Option<Vec<InitState>> = if is_euler {
        None
    } else {
        let euler_spec = ModelSpec {
            kind: ModelKind::Multistep {
                kind: SchemeKind::AdamsBashforth,
                order: 1,
            },
            noise_variant: spec.noise_variant,
        };
        let euler_data = build_datasets(traj, &euler_spec, 0.0)?;
        let dims = train_datasets(euler_data, 1, false, cfg, cfg.pretrain_iterations, None)?;
        Some(
            dims.into_iter()
                .map(|dm| InitState {
                    kernels: dm.kernels,
                    sigma: dm.sigma,
                })
                .collect(),
        )
    };

    let (levels, adapted) = match spec.kind {
        ModelKind::Multistep { .. } => (1, false),
        ModelKind::Taylor { order, adapted } => (order, adapted),
    };

    // Map Euler hypers onto the target family.
    let init = pretrained.map(|states| {
        states
            .into_iter()
            .map(|st| {
                let base = match st.kernels {
                    DimKernels::Multistep(h) => h,
                    _ => unreachable!(),
                };
                let kernels = match spec.kind {
                    ModelKind::Multistep { .. } => DimKernels::Multistep(base),
                    ModelKind::Taylor { order, adapted } => {
                        if adapted {
                            DimKernels::Multistep(base) // carries the base kernel
                        } else {
                            DimKernels::TaylorIndependent(vec![base; order])
                        }
                    }
                };
                InitState {
                    kernels,
                    sigma: st.sigma,
                }
            })
            .collect::<Vec<_>>()
    });

    let datasets = build_datasets(traj, spec, 0.0)?;
    let dims = train_datasets(datasets, levels, adapted, cfg, cfg.iterations, init)?;
    Ok(TrainedModel {
        spec: *spec,
        dims,
        seed: cfg.seed,
        data_hash: super::data_hash(traj),
    })
}
