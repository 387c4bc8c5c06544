//! Posterior error-bound evaluation.
//!
//! Given user-supplied smoothness constants (they are not identifiable from
//! data), these diagnostics evaluate
//! `sigma(x) (C + C_eps (1+tau)^{-1/2} sqrt(||((K+tau I)^{-1} + I)^{-1}||_2))`
//! where `C` bounds the RKHS norm of the true dynamics and `C_eps`
//! aggregates the integrator's local truncation error over the dataset.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::mscoef::MultistepScheme;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("K + tau I is not positive definite")]
    NotSpd,
    #[error("bound inputs must be nonnegative (got {0})")]
    NegativeInput(f64),
}

/// Inputs of the multistep bound.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    /// RKHS norm bound `C` of the true dynamics component.
    pub rkhs_norm: f64,
    /// Sup bound `L` on the relevant Lie derivatives.
    pub lie_bound: f64,
    /// Jitter split: the regularizer is `lambda = 1 + tau`.
    pub tau: f64,
    /// Scheme order P.
    pub order: usize,
    /// Scheme window M.
    pub steps: usize,
    /// Largest step size on the grid.
    pub max_step: f64,
    /// Number of trajectory points N.
    pub n_points: usize,
    /// Worst-row coefficient sum `max_n sum_j (|a_jn| + |b_jn|)`.
    pub coeff_sum: f64,
}

impl BoundInputs {
    /// Collect the scheme-dependent quantities from a generated scheme.
    pub fn from_scheme(scheme: &MultistepScheme, rkhs_norm: f64, lie_bound: f64, tau: f64) -> Self {
        Self {
            rkhs_norm,
            lie_bound,
            tau,
            order: scheme.order(),
            steps: scheme.steps(),
            max_step: scheme
                .grid()
                .steps()
                .iter()
                .fold(0.0f64, |m, &h| m.max(h)),
            n_points: scheme.grid().len(),
            coeff_sum: worst_row_coeff_sum(scheme),
        }
    }
}

/// `max_n sum_j (|a_jn| + |b_jn|)`.
pub fn worst_row_coeff_sum(scheme: &MultistepScheme) -> f64 {
    scheme
        .rows()
        .iter()
        .map(|r| {
            r.a.iter().map(|v| v.abs()).sum::<f64>() + r.b.iter().map(|v| v.abs()).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Integrator perturbation constant of the multistep bound:
/// `C_eps = L M^{P+1} max(h)^{P+1} / (P+1)! (N - M) sum_j(|a|+|b|)`.
pub fn multistep_c_eps(inputs: &BoundInputs) -> f64 {
    let p1 = inputs.order + 1;
    inputs.lie_bound
        * (inputs.steps as f64).powi(p1 as i32)
        * inputs.max_step.powi(p1 as i32)
        / factorial(p1)
        * (inputs.n_points - inputs.steps) as f64
        * inputs.coeff_sum
}

/// Spectral norm of `((K + tau I)^{-1} + I)^{-1}`.
///
/// Its eigenvalues are `lambda_i / (1 + lambda_i)` for the eigenvalues of
/// `A = K + tau I`, and the map is monotone, so the norm follows from the
/// top eigenvalue of `A`, found by power iteration (50 iterations,
/// tolerance 1e-10). Iterating on `A` directly keeps the spectral gap wide.
pub fn regularized_norm(k: &DMatrix<f64>, tau: f64) -> Result<f64, BoundError> {
    let r = k.nrows();
    let mut a = k.clone();
    for i in 0..r {
        a[(i, i)] += tau;
    }
    // Reject indefinite input; a hair of relative jitter keeps the check
    // from tripping on PSD matrices that are numerically singular.
    let scale = a.diagonal().amax().max(1e-300);
    let mut probe = a.clone();
    for i in 0..r {
        probe[(i, i)] += 1e-12 * scale;
    }
    if Cholesky::new(probe).is_none() {
        return Err(BoundError::NotSpd);
    }

    let mut v = DVector::from_element(r, 1.0 / (r as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = &a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let v_next = w / norm;
        let lambda_next = v_next.dot(&(&a * &v_next));
        if (lambda_next - lambda).abs() <= 1e-10 * lambda_next.abs().max(1.0) {
            lambda = lambda_next;
            break;
        }
        lambda = lambda_next;
        v = v_next;
    }
    Ok(lambda / (1.0 + lambda))
}

fn outer_bound(c: f64, c_eps: f64, tau: f64, k: &DMatrix<f64>, sigma_x: f64) -> Result<f64, BoundError> {
    if c < 0.0 || c_eps < 0.0 {
        return Err(BoundError::NegativeInput(c.min(c_eps)));
    }
    if tau < 0.0 {
        return Err(BoundError::NegativeInput(tau));
    }
    let norm = regularized_norm(k, tau)?;
    Ok(sigma_x * (c + c_eps * (1.0 + tau).powf(-0.5) * norm.sqrt()))
}

/// Multistep error bound at a point with posterior std `sigma_x`.
pub fn multistep_bound(
    inputs: &BoundInputs,
    k: &DMatrix<f64>,
    sigma_x: f64,
) -> Result<f64, BoundError> {
    outer_bound(inputs.rkhs_norm, multistep_c_eps(inputs), inputs.tau, k, sigma_x)
}

/// Taylor error bound: `C = sqrt(sum_l C_l^2)`,
/// `eps = max(h)^{P+1}/(P+1)! E`, `C_eps = (N-1) eps`.
pub fn taylor_bound(
    level_norms: &[f64],
    lie_bound_e: f64,
    tau: f64,
    max_step: f64,
    n_points: usize,
    k: &DMatrix<f64>,
    sigma_x: f64,
) -> Result<f64, BoundError> {
    let p = level_norms.len();
    let c = level_norms.iter().map(|c| c * c).sum::<f64>().sqrt();
    let eps = max_step.powi(p as i32 + 1) / factorial(p + 1) * lie_bound_e;
    let c_eps = (n_points - 1) as f64 * eps;
    outer_bound(c, c_eps, tau, k, sigma_x)
}
