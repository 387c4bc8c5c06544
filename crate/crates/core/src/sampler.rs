//! Decoupled sampling of dynamics functions from the trained posterior.
//!
//! A sample combines a random-Fourier prior draw with a deterministic
//! Matheron correction:
//! `f(x) = phi(x)^T w + k(x)^T (K + Lambda)^{-1} (Y - F w - eps)`,
//! where `F` projects the prior draw through the integrator coefficients and
//! `eps` realizes the observation noise. The result is an ordinary vector
//! field: evaluations are consistent, repeatable and cheap, so any
//! integrator can roll it out.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::dynsys::VectorField;
use crate::gpcore::{cross_multistep, cross_taylor, DimKernels, TrainedModel};
use crate::integrate::TaylorField;
use crate::kernels::{ard_eval, rff_features, sample_rff, RffBasis};
use crate::obsmodel::{noise_for, NoiseModel, Transform};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("decoupled sampling needs stationary ARD kernels; adapted Taylor kernels are mean-prediction only")]
    AdaptedUnsupported,
    #[error("noise covariance factorization failed")]
    NoiseFactorization,
    #[error("model/dataset mismatch: {0}")]
    Mismatch(String),
}

struct LevelDraw {
    basis: RffBasis,
    weights: DVector<f64>,
}

struct DimDraw {
    /// One basis per Taylor level; multistep uses a single level.
    levels: Vec<LevelDraw>,
    /// Shared Matheron correction `(K + Lambda)^{-1}(Y - Z - eps)`.
    correction: DVector<f64>,
}

/// A consistent dynamics function drawn from the posterior; immutable and
/// safe to evaluate concurrently.
pub struct SampledDynamics {
    model: Arc<TrainedModel>,
    dims: Vec<DimDraw>,
}

fn draw_standard_normal(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Realize the observation noise `eps ~ N(0, Sigma_y)` for the dataset's
/// active noise model.
fn draw_noise(noise: &NoiseModel, r: usize, rng: &mut impl Rng) -> Result<DVector<f64>, SamplerError> {
    match noise {
        NoiseModel::DiagTimeVarying(v) => {
            let z = draw_standard_normal(rng, r);
            Ok(DVector::from_fn(r, |i, _| v[i].sqrt() * z[i]))
        }
        NoiseModel::IidConstant(lam) => {
            let z = draw_standard_normal(rng, r);
            Ok(lam.sqrt() * z)
        }
        NoiseModel::Full(s) => {
            let scale = s.diagonal().amax().max(1e-300);
            let mut jitter = 1e-12 * scale;
            for _ in 0..4 {
                let mut sj = s.clone();
                for i in 0..r {
                    sj[(i, i)] += jitter;
                }
                if let Some(chol) = Cholesky::new(sj) {
                    let z = draw_standard_normal(rng, r);
                    return Ok(chol.l() * z);
                }
                jitter *= 10.0;
            }
            Err(SamplerError::NoiseFactorization)
        }
    }
}

fn level_hypers(kernels: &DimKernels, level: usize) -> Result<&crate::kernels::ArdHypers, SamplerError> {
    match kernels {
        DimKernels::Multistep(h) => Ok(h),
        DimKernels::TaylorIndependent(v) => Ok(&v[level - 1]),
        DimKernels::TaylorAdapted { .. } => Err(SamplerError::AdaptedUnsupported),
    }
}

/// Draw one consistent dynamics function from a multistep posterior.
///
/// Per output dimension: a fresh S-frequency basis and standard-normal
/// weights represent the prior, `F_{n,k} = sum_j b_jn phi_k(x_{n+j})`
/// projects it onto the observations, and the correction solves against the
/// cached training factorization.
pub fn draw_multistep(
    model: &Arc<TrainedModel>,
    s: usize,
    seed: u64,
) -> Result<SampledDynamics, SamplerError> {
    let mut dims = Vec::with_capacity(model.dims.len());
    for (u, dm) in model.dims.iter().enumerate() {
        let scheme = match &dm.dataset.transform {
            Transform::Multistep(sch) => sch,
            Transform::Taylor { .. } => {
                return Err(SamplerError::Mismatch(
                    "draw_multistep on a Taylor model".into(),
                ))
            }
        };
        let h = level_hypers(&dm.kernels, 1)?;
        let dim_seed = derive_seed(seed, u as u64);
        let basis = sample_rff(h, s, derive_seed(dim_seed, 1));
        let mut rng = rng_from_seed(derive_seed(dim_seed, 2));
        let weights = draw_standard_normal(&mut rng, basis.feature_dim());

        // Features at every trajectory point, then b-weighted row sums.
        let n_points = dm.dataset.points.len();
        let feats: Vec<DVector<f64>> = (0..n_points)
            .map(|p| rff_features(&basis, dm.dataset.points[p].as_slice()))
            .collect();
        let r = dm.dataset.len();
        let m = scheme.steps();
        let mut z = DVector::zeros(r);
        for n in 0..r {
            let row = scheme.row(n);
            let mut acc = 0.0;
            for j in 0..=m {
                if row.b[j] != 0.0 {
                    acc += row.b[j] * feats[n + j].dot(&weights);
                }
            }
            z[n] = acc;
        }

        let noise = noise_for(&dm.dataset, dm.sigma);
        let eps = draw_noise(&noise, r, &mut rng)?;
        let residual = &dm.dataset.y - z - eps;
        let correction = dm.factor.chol.solve(&residual);
        dims.push(DimDraw {
            levels: vec![LevelDraw { basis, weights }],
            correction,
        });
    }
    Ok(SampledDynamics {
        model: Arc::clone(model),
        dims,
    })
}

/// Draw consistent per-level dynamics from a Taylor posterior. All levels of
/// one dimension share a single correction solve; level fields differ in
/// their prior bases and cross-covariances.
pub fn draw_taylor(
    model: &Arc<TrainedModel>,
    s: usize,
    seed: u64,
) -> Result<SampledDynamics, SamplerError> {
    let p = model.levels();
    let mut dims = Vec::with_capacity(model.dims.len());
    for (u, dm) in model.dims.iter().enumerate() {
        let steps = match &dm.dataset.transform {
            Transform::Taylor { steps } => steps,
            Transform::Multistep(_) => {
                return Err(SamplerError::Mismatch(
                    "draw_taylor on a multistep model".into(),
                ))
            }
        };
        let dim_seed = derive_seed(seed, u as u64);
        let mut rng = rng_from_seed(derive_seed(dim_seed, 2));
        let r = dm.dataset.len();
        let mut z = DVector::zeros(r);
        let mut levels = Vec::with_capacity(p);
        for level in 1..=p {
            let h = level_hypers(&dm.kernels, level)?;
            let basis = sample_rff(h, s, derive_seed(dim_seed, 10 + level as u64));
            let weights = draw_standard_normal(&mut rng, basis.feature_dim());
            for n in 0..r {
                let w_n = crate::gpcore::taylor_weight(steps[n], level);
                z[n] += w_n
                    * rff_features(&basis, dm.dataset.points[n].as_slice()).dot(&weights);
            }
            levels.push(LevelDraw { basis, weights });
        }
        let noise = noise_for(&dm.dataset, dm.sigma);
        let eps = draw_noise(&noise, r, &mut rng)?;
        let residual = &dm.dataset.y - z - eps;
        let correction = dm.factor.chol.solve(&residual);
        dims.push(DimDraw { levels, correction });
    }
    Ok(SampledDynamics {
        model: Arc::clone(model),
        dims,
    })
}

impl SampledDynamics {
    /// Number of Taylor levels carried by this sample (1 for multistep).
    pub fn levels(&self) -> usize {
        self.dims[0].levels.len()
    }

    /// Evaluate dimension `u` of the level-`level` field.
    pub fn eval_dim_level(&self, u: usize, level: usize, x: &[f64]) -> f64 {
        let dm = &self.model.dims[u];
        let draw = &self.dims[u];
        let ld = &draw.levels[level - 1];
        let prior = rff_features(&ld.basis, x).dot(&ld.weights);
        let kx = match &dm.dataset.transform {
            Transform::Multistep(_) => match &dm.kernels {
                DimKernels::Multistep(h) => {
                    cross_multistep(|a, b| ard_eval(h, a, b), &dm.dataset, x)
                }
                _ => unreachable!("multistep draws carry ARD kernels"),
            },
            Transform::Taylor { .. } => cross_taylor(&dm.kernels, u, level, &dm.dataset, x),
        };
        prior + kx.dot(&draw.correction)
    }

    /// The sampled ODE right-hand side (level 1).
    pub fn eval_field(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.model.dims.len(), |u, _| {
            self.eval_dim_level(u, 1, x.as_slice())
        })
    }

    /// All level values as a levels x d matrix.
    pub fn eval_levels(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.levels();
        let d = self.model.dims.len();
        DMatrix::from_fn(p, d, |l, u| self.eval_dim_level(u, l + 1, x.as_slice()))
    }
}

impl VectorField for SampledDynamics {
    fn dim(&self) -> usize {
        self.model.dims.len()
    }
    fn name(&self) -> &str {
        "sampled dynamics"
    }
    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        self.eval_field(state)
    }
}

impl TaylorField for SampledDynamics {
    fn dim(&self) -> usize {
        self.model.dims.len()
    }
    fn levels(&self) -> usize {
        SampledDynamics::levels(self)
    }
    fn eval_level(&self, level: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.model.dims.len(), |u, _| {
            self.eval_dim_level(u, level, x.as_slice())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{TimeGrid, Trajectory};
    use crate::gpcore::{
        factorize_dim, posterior_joint, DimModel, ModelKind, ModelSpec, TrainedModel,
    };
    use crate::kernels::ArdHypers;
    use crate::mscoef::{generate_scheme, SchemeKind};
    use crate::obsmodel::{
        multistep_observations, taylor_observations, with_noise, NoiseVariant,
    };
    use nalgebra::DMatrix;

    fn toy_trajectory(n_steps: usize) -> Trajectory {
        let grid = TimeGrid::regular(0.0, n_steps, 0.25).unwrap();
        let states = DMatrix::from_fn(n_steps + 1, 1, |n, _| (0.9 * grid.times()[n]).sin());
        Trajectory::new(grid, states, true).unwrap()
    }

    fn toy_multistep_model(sigma: f64) -> Arc<TrainedModel> {
        let traj = toy_trajectory(9); // N = 10
        let scheme = generate_scheme(SchemeKind::AdamsBashforth, 1, &traj.grid).unwrap();
        let ds = with_noise(
            multistep_observations(&traj, &scheme, 0).unwrap(),
            sigma,
            NoiseVariant::DiagTimeVarying,
        );
        let kernels = DimKernels::Multistep(ArdHypers::new(1.0, &[0.8]));
        let factor = factorize_dim(&ds, &kernels, 0, 1, sigma, 1e-8).unwrap();
        Arc::new(TrainedModel {
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
        })
    }

    fn toy_taylor_model(p: usize, sigma: f64) -> Arc<TrainedModel> {
        let traj = toy_trajectory(9);
        let ds = with_noise(
            taylor_observations(&traj, 0).unwrap(),
            sigma,
            NoiseVariant::DiagTimeVarying,
        );
        let kernels = DimKernels::TaylorIndependent(
            (0..p).map(|l| ArdHypers::new(1.0 / (l + 1) as f64, &[0.8])).collect(),
        );
        let factor = factorize_dim(&ds, &kernels, 0, p, sigma, 1e-8).unwrap();
        Arc::new(TrainedModel {
            spec: ModelSpec {
                kind: ModelKind::Taylor {
                    order: p,
                    adapted: false,
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
        })
    }

    #[test]
    fn draws_are_deterministic_per_seed() {
        let model = toy_multistep_model(0.05);
        let a = draw_multistep(&model, 64, 7).unwrap();
        let b = draw_multistep(&model, 64, 7).unwrap();
        let c = draw_multistep(&model, 64, 8).unwrap();
        let x = DVector::from_vec(vec![0.3]);
        assert_eq!(a.eval_field(&x), b.eval_field(&x));
        assert_ne!(a.eval_field(&x), c.eval_field(&x));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let model = toy_multistep_model(0.05);
        let sample = draw_multistep(&model, 128, 3).unwrap();
        let x = DVector::from_vec(vec![-0.4]);
        let first = sample.eval_field(&x);
        for _ in 0..5 {
            assert_eq!(sample.eval_field(&x), first);
        }
    }

    #[test]
    fn zero_cross_route_leaves_pure_prior() {
        // With all b coefficients zeroed the correction cannot reach the
        // field: evaluation equals the prior part exactly.
        let model = toy_multistep_model(0.05);
        let mut inner = TrainedModel {
            spec: model.spec,
            dims: vec![],
            seed: 0,
            data_hash: 0,
        };
        let dm = &model.dims[0];
        let mut ds = dm.dataset.clone();
        if let crate::obsmodel::Transform::Multistep(s) = &mut ds.transform {
            for row in &mut s.rows {
                for b in &mut row.b {
                    *b = 0.0;
                }
            }
        }
        let factor = factorize_dim(&ds, &dm.kernels, 0, 1, dm.sigma, 1e-8).unwrap();
        inner.dims.push(DimModel {
            dataset: ds,
            kernels: dm.kernels.clone(),
            sigma: dm.sigma,
            factor,
        });
        let zeroed = Arc::new(inner);
        let sample = draw_multistep(&zeroed, 64, 5).unwrap();
        let x = [0.7];
        let prior = rff_features(&sample.dims[0].levels[0].basis, &x)
            .dot(&sample.dims[0].levels[0].weights);
        assert_eq!(sample.eval_dim_level(0, 1, &x), prior);
    }

    /// Empirical mean/cov of many draws against the exact joint posterior.
    fn moment_check(draws: Vec<DVector<f64>>, mean_ex: &DVector<f64>, cov_ex: &DMatrix<f64>) {
        let n = draws.len() as f64;
        let t = mean_ex.len();
        let mut mean = DVector::zeros(t);
        for d in &draws {
            mean += d;
        }
        mean /= n;
        let mut cov = DMatrix::zeros(t, t);
        for d in &draws {
            let c = d - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;

        for i in 0..t {
            let se = (cov_ex[(i, i)] / n).sqrt();
            let tol = 0.1 * cov_ex[(i, i)].sqrt() + 4.0 * se;
            assert!(
                (mean[i] - mean_ex[i]).abs() <= tol,
                "mean[{i}] {} vs {} (tol {tol})",
                mean[i],
                mean_ex[i]
            );
        }
        for i in 0..t {
            for j in 0..t {
                let scale = (cov_ex[(i, i)] * cov_ex[(j, j)]).sqrt();
                let se = scale * (2.0 / n).sqrt();
                let tol = 0.15 * scale + 4.0 * se;
                assert!(
                    (cov[(i, j)] - cov_ex[(i, j)]).abs() <= tol,
                    "cov[{i},{j}] {} vs {} (tol {tol})",
                    cov[(i, j)],
                    cov_ex[(i, j)]
                );
            }
        }
    }

    #[test]
    fn multistep_draw_moments_match_posterior() {
        let model = toy_multistep_model(0.05);
        let test_points: Vec<DVector<f64>> =
            [-0.8, -0.3, 0.1, 0.6, 1.1].iter().map(|&v| DVector::from_vec(vec![v])).collect();
        let (mean_ex, cov_ex) = posterior_joint(&model, 0, 1, &test_points);
        let draws: Vec<DVector<f64>> = (0..3000)
            .map(|k| {
                let s = draw_multistep(&model, 256, 1000 + k).unwrap();
                DVector::from_fn(test_points.len(), |i, _| {
                    s.eval_dim_level(0, 1, test_points[i].as_slice())
                })
            })
            .collect();
        moment_check(draws, &mean_ex, &cov_ex);
    }

    #[test]
    fn taylor_draw_moments_match_posterior_per_level() {
        let model = toy_taylor_model(2, 0.05);
        let test_points: Vec<DVector<f64>> =
            [-0.5, 0.2, 0.9].iter().map(|&v| DVector::from_vec(vec![v])).collect();
        for level in 1..=2 {
            let (mean_ex, cov_ex) = posterior_joint(&model, 0, level, &test_points);
            let draws: Vec<DVector<f64>> = (0..3000)
                .map(|k| {
                    let s = draw_taylor(&model, 256, 2000 + k).unwrap();
                    DVector::from_fn(test_points.len(), |i, _| {
                        s.eval_dim_level(0, level, test_points[i].as_slice())
                    })
                })
                .collect();
            moment_check(draws, &mean_ex, &cov_ex);
        }
    }

    #[test]
    fn taylor_p1_matches_multistep_ab1_moments() {
        // The two code paths describe the same posterior on the same data.
        let ms = toy_multistep_model(0.05);
        let ty = toy_taylor_model(1, 0.05);
        let x = [0.25];
        let ms_draws: Vec<f64> = (0..4000)
            .map(|k| {
                draw_multistep(&ms, 256, 10_000 + k)
                    .unwrap()
                    .eval_dim_level(0, 1, &x)
            })
            .collect();
        let ty_draws: Vec<f64> = (0..4000)
            .map(|k| {
                draw_taylor(&ty, 256, 20_000 + k)
                    .unwrap()
                    .eval_dim_level(0, 1, &x)
            })
            .collect();
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var)
        };
        let (m1, v1) = stats(&ms_draws);
        let (m2, v2) = stats(&ty_draws);
        let se = (v1 / 4000.0).sqrt();
        assert!((m1 - m2).abs() < 0.05 * v1.sqrt() + 6.0 * se, "means {m1} vs {m2}");
        assert!((v1 - v2).abs() < 0.2 * v1 + 1e-6, "vars {v1} vs {v2}");
    }

    #[test]
    fn adapted_kernels_refuse_sampling() {
        let traj = toy_trajectory(9);
        let ds = with_noise(
            taylor_observations(&traj, 0).unwrap(),
            0.05,
            NoiseVariant::DiagTimeVarying,
        );
        let kernels = DimKernels::TaylorAdapted {
            base: vec![ArdHypers::new(1.0, &[0.8])],
        };
        let factor = factorize_dim(&ds, &kernels, 0, 2, 0.05, 1e-8).unwrap();
        let model = Arc::new(TrainedModel {
            spec: ModelSpec {
                kind: ModelKind::Taylor {
                    order: 2,
                    adapted: true,
                },
                noise_variant: NoiseVariant::DiagTimeVarying,
            },
            dims: vec![DimModel {
                dataset: ds,
                kernels,
                sigma: 0.05,
                factor,
            }],
            seed: 0,
            data_hash: 0,
        });
        assert!(matches!(
            draw_taylor(&model, 32, 0),
            Err(SamplerError::AdaptedUnsupported)
        ));
    }
}
