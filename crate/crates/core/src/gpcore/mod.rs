//! Exact GP inference through integrator-transformed observations.
//!
//! The composite Gram matrices pair integrator coefficients with kernel
//! evaluations at trajectory points:
//! multistep `K_nm = sum_i sum_j b_jn b_im k(x_{n+j}, x_{m+i})`, Taylor
//! `K_nm = sum_l (h_n^l h_m^l)/(l! l!) k_l(x_n, x_m)`. Both are assembled
//! from a base kernel matrix over the raw points, which keeps them PSD by
//! construction and makes hyperparameter derivatives cheap.

mod io;
mod train;

pub use io::{load_model, model_to_text};
pub use train::{train, train_datasets, GradientMode, TrainConfig};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::dynsys::Trajectory;
use crate::kernels::{ard_eval, taylor_adapted_k2, taylor_adapted_k3, ArdHypers};
use crate::mscoef::{MultistepScheme, SchemeKind};
use crate::obsmodel::{noise_for, NoiseModel, NoiseVariant, Transform, TransformedDataset};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("Cholesky factorization failed after jitter escalation (jitter {0:e})")]
    Factorization(f64),
    #[error("non-finite marginal likelihood at initialization (nll = {0})")]
    NonFiniteInit(f64),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("model file does not match the data (hash {file:016x} vs {data:016x})")]
    DataHashMismatch { file: u64, data: u64 },
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Scheme(#[from] crate::mscoef::SchemeError),
    #[error(transparent)]
    Obs(#[from] crate::obsmodel::ObsError),
}

/// What is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Multistep { kind: SchemeKind, order: usize },
    Taylor { order: usize, adapted: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub noise_variant: NoiseVariant,
}

/// Kernel state of one output dimension.
#[derive(Debug, Clone)]
pub enum DimKernels {
    /// Single ARD kernel (multistep pipeline).
    Multistep(ArdHypers),
    /// One independently trained ARD kernel per Taylor level.
    TaylorIndependent(Vec<ArdHypers>),
    /// Shared per-dimension base kernels; levels 2-3 derive from them.
    TaylorAdapted { base: Vec<ArdHypers> },
}

impl DimKernels {
    pub fn levels(&self) -> usize {
        match self {
            DimKernels::Multistep(_) => 1,
            DimKernels::TaylorIndependent(v) => v.len(),
            DimKernels::TaylorAdapted { .. } => 0, // set by the model order
        }
    }

    /// Mean signal variance, the jitter reference scale.
    pub fn signal_scale(&self) -> f64 {
        let vs: Vec<f64> = match self {
            DimKernels::Multistep(h) => vec![h.signal_variance()],
            DimKernels::TaylorIndependent(v) => v.iter().map(|h| h.signal_variance()).collect(),
            DimKernels::TaylorAdapted { base } => {
                base.iter().map(|h| h.signal_variance()).collect()
            }
        };
        vs.iter().sum::<f64>() / vs.len() as f64
    }
}

/// Evaluate the level-`level` kernel of output dimension `u`.
pub fn level_kernel(kernels: &DimKernels, u: usize, level: usize, x: &[f64], y: &[f64]) -> f64 {
    match kernels {
        DimKernels::Multistep(h) => ard_eval(h, x, y),
        DimKernels::TaylorIndependent(v) => ard_eval(&v[level - 1], x, y),
        DimKernels::TaylorAdapted { base } => match level {
            1 => ard_eval(&base[u], x, y),
            2 => taylor_adapted_k2(base, u, x, y),
            3 => taylor_adapted_k3(base, u, x, y),
            _ => panic!("adapted kernels stop at level 3"),
        },
    }
}

// ---------------------------------------------------------------------------
// Gram assembly
// ---------------------------------------------------------------------------

/// Base kernel matrix over the dataset's raw points.
pub(crate) fn base_gram<K: Fn(&[f64], &[f64]) -> f64>(
    k: &K,
    points: &[DVector<f64>],
) -> DMatrix<f64> {
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let v = k(points[p].as_slice(), points[q].as_slice());
            g[(p, q)] = v;
            g[(q, p)] = v;
        }
    }
    g
}

/// Fold a base kernel matrix through the scheme's b-rows:
/// `K_nm = sum_{i,j} b_jn b_im G[n+j, m+i]`.
pub(crate) fn composite_from_base(g: &DMatrix<f64>, scheme: &MultistepScheme) -> DMatrix<f64> {
    let m = scheme.steps();
    let r = scheme.n_rows();
    let mut k = DMatrix::zeros(r, r);
    for n in 0..r {
        let bn = &scheme.row(n).b;
        for mm in 0..r {
            let bm = &scheme.row(mm).b;
            let mut acc = 0.0;
            for (j, &bnj) in bn.iter().enumerate().take(m + 1) {
                if bnj == 0.0 {
                    continue;
                }
                for (i, &bmi) in bm.iter().enumerate().take(m + 1) {
                    if bmi != 0.0 {
                        acc += bnj * bmi * g[(n + j, mm + i)];
                    }
                }
            }
            k[(n, mm)] = acc;
        }
    }
    k
}

/// Composite multistep Gram matrix for a dataset.
pub fn gram_multistep<K: Fn(&[f64], &[f64]) -> f64>(
    k: K,
    ds: &TransformedDataset,
) -> DMatrix<f64> {
    let scheme = match &ds.transform {
        Transform::Multistep(s) => s,
        Transform::Taylor { .. } => panic!("multistep gram on a Taylor dataset"),
    };
    let g = base_gram(&k, &ds.points);
    composite_from_base(&g, scheme)
}

/// Multistep cross-covariance vector `k(x)_n = sum_j b_jn k(x, x_{n+j})`.
pub fn cross_multistep<K: Fn(&[f64], &[f64]) -> f64>(
    k: K,
    ds: &TransformedDataset,
    x: &[f64],
) -> DVector<f64> {
    let scheme = match &ds.transform {
        Transform::Multistep(s) => s,
        Transform::Taylor { .. } => panic!("multistep cross on a Taylor dataset"),
    };
    let base: Vec<f64> = ds.points.iter().map(|p| k(x, p.as_slice())).collect();
    DVector::from_fn(scheme.n_rows(), |n, _| {
        scheme.row(n).b.iter().enumerate().map(|(j, b)| b * base[n + j]).sum()
    })
}

/// Taylor level weight `h_n^l / l!`.
pub(crate) fn taylor_weight(h: f64, level: usize) -> f64 {
    let mut w = 1.0;
    for l in 1..=level {
        w *= h / l as f64;
    }
    w
}

/// Composite Taylor Gram matrix with `p` levels.
pub fn gram_taylor(kernels: &DimKernels, u: usize, p: usize, ds: &TransformedDataset) -> DMatrix<f64> {
    let steps = match &ds.transform {
        Transform::Taylor { steps } => steps,
        Transform::Multistep(_) => panic!("Taylor gram on a multistep dataset"),
    };
    let r = ds.len();
    let mut k = DMatrix::zeros(r, r);
    for level in 1..=p {
        let g = base_gram(
            &|a: &[f64], b: &[f64]| level_kernel(kernels, u, level, a, b),
            &ds.points,
        );
        for n in 0..r {
            let wn = taylor_weight(steps[n], level);
            for m in 0..r {
                k[(n, m)] += wn * taylor_weight(steps[m], level) * g[(n, m)];
            }
        }
    }
    k
}

/// Taylor cross-covariance for level `i`: `(k_i(x))_n = h_n^i/i! k_i(x, x_n)`.
pub fn cross_taylor(
    kernels: &DimKernels,
    u: usize,
    level: usize,
    ds: &TransformedDataset,
    x: &[f64],
) -> DVector<f64> {
    let steps = match &ds.transform {
        Transform::Taylor { steps } => steps,
        Transform::Multistep(_) => panic!("Taylor cross on a multistep dataset"),
    };
    DVector::from_fn(ds.len(), |n, _| {
        taylor_weight(steps[n], level) * level_kernel(kernels, u, level, x, ds.points[n].as_slice())
    })
}

/// Gram of the dataset under the given kernel state.
pub fn gram(kernels: &DimKernels, u: usize, p: usize, ds: &TransformedDataset) -> DMatrix<f64> {
    match &ds.transform {
        Transform::Multistep(_) => match kernels {
            DimKernels::Multistep(h) => gram_multistep(|a, b| ard_eval(h, a, b), ds),
            _ => panic!("multistep dataset requires a multistep kernel"),
        },
        Transform::Taylor { .. } => gram_taylor(kernels, u, p, ds),
    }
}

// ---------------------------------------------------------------------------
// Marginal likelihood
// ---------------------------------------------------------------------------

/// Cached factorization of `K + noise + jitter I`.
pub struct Factorized {
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub nll: f64,
    /// Jitter actually used (after escalation).
    pub jitter: f64,
}

/// Negative log marginal likelihood via Cholesky, with jitter escalation
/// (x10, three times) on factorization failure.
pub fn nll_factorize(
    kmat: &DMatrix<f64>,
    noise: &NoiseModel,
    y: &DVector<f64>,
    jitter: f64,
) -> Result<Factorized, GpError> {
    let r = y.len();
    let mut a = kmat.clone();
    noise.add_to(&mut a);

    let mut jit = jitter;
    for attempt in 0..4 {
        let mut aj = a.clone();
        for i in 0..r {
            aj[(i, i)] += jit;
        }
        if let Some(chol) = Cholesky::new(aj) {
            let alpha = chol.solve(y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let nll = 0.5 * y.dot(&alpha)
                + log_det
                + 0.5 * r as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(Factorized {
                chol,
                alpha,
                nll,
                jitter: jit,
            });
        }
        if attempt < 3 {
            jit *= 10.0;
        }
    }
    Err(GpError::Factorization(jit))
}

/// Plain nll value (see [`nll_factorize`] for the cached form).
pub fn nll(
    kmat: &DMatrix<f64>,
    noise: &NoiseModel,
    y: &DVector<f64>,
    jitter: f64,
) -> Result<f64, GpError> {
    nll_factorize(kmat, noise, y, jitter).map(|f| f.nll)
}

// ---------------------------------------------------------------------------
// Trained model and posterior
// ---------------------------------------------------------------------------

/// Per-dimension trained state: dataset, kernels, learned noise and the
/// cached factorization of `K + Lambda + jitter I`.
pub struct DimModel {
    pub dataset: TransformedDataset,
    pub kernels: DimKernels,
    pub sigma: f64,
    pub factor: Factorized,
}

/// Trained per-dimension GPs plus scheme metadata.
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub dims: Vec<DimModel>,
    pub seed: u64,
    pub data_hash: u64,
}

impl TrainedModel {
    pub fn state_dim(&self) -> usize {
        self.dims.len()
    }

    /// Taylor truncation order (1 for multistep models).
    pub fn levels(&self) -> usize {
        match self.spec.kind {
            ModelKind::Multistep { .. } => 1,
            ModelKind::Taylor { order, .. } => order,
        }
    }

    /// Window size M of the training scheme (1 for Taylor).
    pub fn scheme_steps(&self) -> usize {
        match &self.dims[0].dataset.transform {
            Transform::Multistep(s) => s.steps(),
            Transform::Taylor { .. } => 1,
        }
    }
}

/// FNV-1a hash of the trajectory's canonical CSV text, used to refuse
/// loading a model against different data.
pub fn data_hash(traj: &Trajectory) -> u64 {
    let text = crate::dynsys::trajectory_to_csv(traj);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn cross_for(dm: &DimModel, u: usize, level: usize, x: &[f64]) -> DVector<f64> {
    match &dm.dataset.transform {
        Transform::Multistep(_) => match &dm.kernels {
            DimKernels::Multistep(h) => cross_multistep(|a, b| ard_eval(h, a, b), &dm.dataset, x),
            _ => unreachable!(),
        },
        Transform::Taylor { .. } => cross_taylor(&dm.kernels, u, level, &dm.dataset, x),
    }
}

/// Posterior mean and variance of the level-`level` GP of dimension `u`.
/// Variance is clamped at zero (tolerating -1e-10 of numerical slack).
pub fn posterior_level(model: &TrainedModel, u: usize, level: usize, x: &[f64]) -> (f64, f64) {
    let dm = &model.dims[u];
    let kx = cross_for(dm, u, level, x);
    let mean = kx.dot(&dm.factor.alpha);
    let prior = level_kernel(&dm.kernels, u, level, x, x);
    let var = prior - kx.dot(&dm.factor.chol.solve(&kx));
    debug_assert!(var > -1e-10 * prior.max(1.0), "variance {var} too negative");
    (mean, var.max(0.0))
}

/// Posterior of the dynamics `f_u` (level 1) for every output dimension.
pub fn posterior(model: &TrainedModel, x: &[f64]) -> Vec<(f64, f64)> {
    (0..model.state_dim())
        .map(|u| posterior_level(model, u, 1, x))
        .collect()
}

/// Joint level-`level` posterior (mean vector, covariance matrix) of
/// dimension `u` at several test points, including all cross terms.
pub fn posterior_joint(
    model: &TrainedModel,
    u: usize,
    level: usize,
    points: &[DVector<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let dm = &model.dims[u];
    let t = points.len();
    let r = dm.dataset.len();
    let mut kx = DMatrix::zeros(r, t);
    for (c, p) in points.iter().enumerate() {
        kx.set_column(c, &cross_for(dm, u, level, p.as_slice()));
    }
    let mean = kx.transpose() * &dm.factor.alpha;
    let prior = DMatrix::from_fn(t, t, |i, j| {
        level_kernel(&dm.kernels, u, level, points[i].as_slice(), points[j].as_slice())
    });
    let cov = prior - kx.transpose() * dm.factor.chol.solve(&kx);
    (mean, cov)
}

/// Rebuild a dimension's factorization from its kernels and noise.
pub(crate) fn factorize_dim(
    dataset: &TransformedDataset,
    kernels: &DimKernels,
    u: usize,
    p: usize,
    sigma: f64,
    jitter_rel: f64,
) -> Result<Factorized, GpError> {
    let kmat = gram(kernels, u, p, dataset);
    let noise = noise_for(dataset, sigma);
    nll_factorize(&kmat, &noise, &dataset.y, jitter_rel * kernels.signal_scale())
}
