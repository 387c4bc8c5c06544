//! ARD kernels, Lie-derivative kernels and random Fourier features.
//!
//! The Taylor pipeline models each Lie derivative `f^l` with its own GP.
//! Besides independent ARD kernels per level, adapted kernels are available:
//! the kernel of `f^{l+1}` follows from that of `f^l` through the recursion
//! `k^{l+1}(x,y) = sum_j d/dx_j d/dy_j [k^l(x,y)] k_1^j(x,y)`,
//! which this module evaluates in closed form for levels 2 and 3 and by
//! central differences for arbitrary inputs.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::rng_from_seed;

/// ARD squared-exponential hyperparameters, stored as unconstrained logs;
/// the exp mapping is the only positivity constraint mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdHypers {
    log_signal_variance: f64,
    log_lengthscales: Vec<f64>,
}

impl ArdHypers {
    /// From natural (positive) values.
    pub fn new(signal_variance: f64, lengthscales: &[f64]) -> Self {
        assert!(signal_variance > 0.0, "signal variance must be positive");
        assert!(
            lengthscales.iter().all(|l| *l > 0.0),
            "lengthscales must be positive"
        );
        Self {
            log_signal_variance: signal_variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn from_logs(log_signal_variance: f64, log_lengthscales: Vec<f64>) -> Self {
        Self {
            log_signal_variance,
            log_lengthscales,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscale(&self, j: usize) -> f64 {
        self.log_lengthscales[j].exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    pub fn log_lengthscales(&self) -> &[f64] {
        &self.log_lengthscales
    }

    /// Optimizer packing: `[log sigma_f^2, log l_1, .., log l_d]`.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_signal_variance];
        v.extend_from_slice(&self.log_lengthscales);
        v
    }

    pub fn from_log_vec(v: &[f64]) -> Self {
        Self {
            log_signal_variance: v[0],
            log_lengthscales: v[1..].to_vec(),
        }
    }
}

/// Kernel family selector for the Taylor pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// Plain ARD kernel (multistep pipeline, and Taylor level 1).
    ArdBase,
    /// Each Taylor level carries its own independently trained ARD kernel.
    TaylorIndependent,
    /// Levels 2..=3 are derived from the shared per-dimension base kernels.
    TaylorAdapted,
}

/// `sigma_f^2 exp(-sum_j (x_j - y_j)^2 / (2 l_j^2))`.
pub fn ard_eval(h: &ArdHypers, x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), h.dim());
    debug_assert_eq!(y.len(), h.dim());
    let mut expo = 0.0;
    for j in 0..x.len() {
        let l = h.lengthscale(j);
        let d = x[j] - y[j];
        expo += d * d / (2.0 * l * l);
    }
    h.signal_variance() * (-expo).exp()
}

/// Inverse squared lengthscale combination of base kernels `ks` at
/// coordinate `k`: `1/ltilde^2 = sum_i 1/l_{i,k}^2`.
fn inv_sq_combined(base: &[ArdHypers], ks: &[usize], coord: usize) -> f64 {
    ks.iter()
        .map(|&i| {
            let l = base[i].lengthscale(coord);
            1.0 / (l * l)
        })
        .sum()
}

fn combined_exp(base: &[ArdHypers], ks: &[usize], delta: &[f64]) -> f64 {
    let mut expo = 0.0;
    for (coord, d) in delta.iter().enumerate() {
        expo += d * d * inv_sq_combined(base, ks, coord) / 2.0;
    }
    (-expo).exp()
}

/// Adapted second-level kernel for output dimension `i`:
/// `k_2^i = sigma_i^2 sum_j (sigma_j^2 / l_ij^4) (l_ij^2 - delta_j^2)
///  exp(-sum_k delta_k^2 / (2 ltilde_{ij,k}^2))`,
/// where `l_ij` is lengthscale `j` of the dimension-`i` base kernel and
/// `ltilde_{ij,k}` combines the `k`-th lengthscales of base kernels `i` and
/// `j` harmonically.
pub fn taylor_adapted_k2(base: &[ArdHypers], i: usize, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let delta: Vec<f64> = (0..d).map(|k| x[k] - y[k]).collect();
    let sig_i = base[i].signal_variance();
    let mut total = 0.0;
    for j in 0..d {
        let lij = base[i].lengthscale(j);
        let lij2 = lij * lij;
        let sig_j = base[j].signal_variance();
        let poly = (sig_j / (lij2 * lij2)) * (lij2 - delta[j] * delta[j]);
        total += poly * combined_exp(base, &[i, j], &delta);
    }
    sig_i * total
}

/// Adapted third-level kernel for output dimension `i`, obtained by applying
/// the Lie recursion to [`taylor_adapted_k2`] analytically. The `j = l`
/// summand carries a quartic polynomial in `delta_l`; cross terms keep the
/// product structure. `ltilde_{ijl,k}` combines three base lengthscales.
pub fn taylor_adapted_k3(base: &[ArdHypers], i: usize, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let delta: Vec<f64> = (0..d).map(|k| x[k] - y[k]).collect();
    let sig_i = base[i].signal_variance();
    let mut total = 0.0;
    for l in 0..d {
        let sig_l = base[l].signal_variance();
        let dl = delta[l];

        // j = l: -d^2/d delta_l^2 of (l_il^2 - delta_l^2) E_{il}.
        {
            let lil = base[i].lengthscale(l);
            let lil2 = lil * lil;
            let lam2 = 1.0 / inv_sq_combined(base, &[i, l], l);
            let c = base[l].signal_variance() / (lil2 * lil2);
            let poly = dl.powi(4) / (lam2 * lam2) - (5.0 / lam2 + lil2 / (lam2 * lam2)) * dl * dl
                + 2.0
                + lil2 / lam2;
            total += sig_l * c * poly * combined_exp(base, &[i, l, l], &delta);
        }

        // j != l: the delta_j polynomial is untouched by the derivative.
        for j in 0..d {
            if j == l {
                continue;
            }
            let lij = base[i].lengthscale(j);
            let lij2 = lij * lij;
            let lam2 = 1.0 / inv_sq_combined(base, &[i, j], l);
            let c = base[j].signal_variance() / (lij2 * lij2);
            let poly = (lam2 - dl * dl) / (lam2 * lam2) * (lij2 - delta[j] * delta[j]);
            total += sig_l * c * poly * combined_exp(base, &[i, j, l], &delta);
        }
    }
    sig_i * total
}

/// One step of the Lie-derivative kernel recursion evaluated numerically:
/// `sum_j d/dx_j d/dy_j [k_l(x,y)] k_1^j(x,y)` with the mixed second
/// derivatives taken by central differences of size `fd_steps[j]`.
pub fn lie_kernel_step(
    k_l: &dyn Fn(&[f64], &[f64]) -> f64,
    base: &[ArdHypers],
    x: &[f64],
    y: &[f64],
    fd_steps: &[f64],
) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    let mut xp = x.to_vec();
    let mut yp = y.to_vec();
    for j in 0..d {
        let s = fd_steps[j];
        let mut probe = |dx: f64, dy: f64| {
            xp[j] = x[j] + dx;
            yp[j] = y[j] + dy;
            let v = k_l(&xp, &yp);
            xp[j] = x[j];
            yp[j] = y[j];
            v
        };
        let mixed =
            (probe(s, s) - probe(s, -s) - probe(-s, s) + probe(-s, -s)) / (4.0 * s * s);
        total += mixed * ard_eval(&base[j], x, y);
    }
    total
}

/// Step sizes for [`lie_kernel_step`]: relative step 1e-4 per lengthscale.
pub fn fd_steps_for(h: &ArdHypers) -> Vec<f64> {
    h.lengthscales().iter().map(|l| 1e-4 * l).collect()
}

/// Frozen random Fourier basis approximating an ARD kernel. The feature map
/// has dimension 2S: `phi_i(x) = sqrt(sigma_f^2/S) (cos x^T w_i, sin x^T w_i)`
/// interleaved over `i`, with `w_i ~ N(0, Lambda^{-1})`,
/// `Lambda = diag(l_1^2, .., l_d^2)`.
#[derive(Debug, Clone)]
pub struct RffBasis {
    /// S frequency vectors, each of length d.
    freqs: Vec<DVector<f64>>,
    signal_variance: f64,
}

impl RffBasis {
    pub fn count(&self) -> usize {
        self.freqs.len()
    }

    /// Feature-map dimension 2S.
    pub fn feature_dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }
}

/// Draw S frequencies from the spectral density of the ARD kernel.
pub fn sample_rff(h: &ArdHypers, s: usize, seed: u64) -> RffBasis {
    assert!(s >= 1);
    let mut rng = rng_from_seed(seed);
    let d = h.dim();
    let ls = h.lengthscales();
    let mut freqs = Vec::with_capacity(s);
    for _ in 0..s {
        let mut w = DVector::zeros(d);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[j] = z / ls[j];
        }
        freqs.push(w);
    }
    RffBasis {
        freqs,
        signal_variance: h.signal_variance(),
    }
}

/// Evaluate the 2S-dimensional feature map at `x`.
pub fn rff_features(basis: &RffBasis, x: &[f64]) -> DVector<f64> {
    let s = basis.count();
    let amp = (basis.signal_variance / s as f64).sqrt();
    let mut out = DVector::zeros(2 * s);
    for (i, w) in basis.freqs.iter().enumerate() {
        let arg: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
        out[2 * i] = amp * arg.cos();
        out[2 * i + 1] = amp * arg.sin();
    }
    out
}
