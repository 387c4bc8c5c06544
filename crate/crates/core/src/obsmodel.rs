//! Transformed GP observations and their noise models.
//!
//! Applying the state side of an integrator to a noisy trajectory yields
//! per-dimension observations `Y_n = sum_j a_jn x_{n+j,u}` (multistep) or
//! first differences (Taylor). The induced observation noise is time-varying
//! and correlated between neighboring rows; three representations are
//! provided: the full covariance `sigma_u^2 A~ A~^T`, its diagonal, and a
//! constant i.i.d. approximation. Training defaults to the diagonal
//! time-varying variant.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynsys::Trajectory;
use crate::mscoef::MultistepScheme;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("trajectory has {got} points but the scheme window needs {needed}")]
    TooShort { needed: usize, got: usize },
    #[error("output dimension {dim} out of range (d = {d})")]
    BadDimension { dim: usize, d: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseVariant {
    /// Correlated noise `sigma^2 A~ A~^T`.
    Full,
    /// Diagonal of the full model (the training default).
    DiagTimeVarying,
    /// Constant diagonal from the first coefficient row.
    IidConstant,
}

impl NoiseVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "diag" => Some(Self::DiagTimeVarying),
            "iid" => Some(Self::IidConstant),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::DiagTimeVarying => "diag",
            Self::IidConstant => "iid",
        }
    }
}

/// Concrete noise model in squared state units.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Full(DMatrix<f64>),
    DiagTimeVarying(DVector<f64>),
    IidConstant(f64),
}

impl NoiseModel {
    /// Add the covariance onto `m` (the Gram matrix).
    pub fn add_to(&self, m: &mut DMatrix<f64>) {
        match self {
            NoiseModel::Full(s) => *m += s,
            NoiseModel::DiagTimeVarying(v) => {
                for (i, lam) in v.iter().enumerate() {
                    m[(i, i)] += lam;
                }
            }
            NoiseModel::IidConstant(lam) => {
                for i in 0..m.nrows() {
                    m[(i, i)] += lam;
                }
            }
        }
    }

    /// Diagonal entries as a vector of the given length.
    pub fn diagonal(&self, len: usize) -> DVector<f64> {
        match self {
            NoiseModel::Full(s) => s.diagonal(),
            NoiseModel::DiagTimeVarying(v) => v.clone(),
            NoiseModel::IidConstant(lam) => DVector::from_element(len, *lam),
        }
    }
}

/// How a trajectory was turned into GP observations.
#[derive(Debug, Clone)]
pub enum Transform {
    Multistep(MultistepScheme),
    /// First differences; `steps[n] = h_n` pairs with input point `n`.
    Taylor { steps: Vec<f64> },
}

/// Per-dimension GP regression problem produced from a trajectory.
///
/// `points` are the trajectory states needed to evaluate composite kernels:
/// all `N` window points for multistep, the `N - 1` left endpoints for
/// Taylor. `y` has `N - M` rows (multistep) or `N - 1` (Taylor).
#[derive(Debug, Clone)]
pub struct TransformedDataset {
    pub dim: usize,
    pub y: DVector<f64>,
    pub points: Vec<DVector<f64>>,
    pub transform: Transform,
    pub noise_variant: NoiseVariant,
    /// Observation noise std the dataset was built with (training re-scales).
    pub sigma_nominal: f64,
    pub noise: NoiseModel,
}

impl TransformedDataset {
    /// Number of observation rows.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// State dimension of the input points.
    pub fn state_dim(&self) -> usize {
        self.points[0].len()
    }

    /// The window of trajectory points feeding observation row `n`.
    pub fn window(&self, n: usize) -> &[DVector<f64>] {
        match &self.transform {
            Transform::Multistep(s) => &self.points[n..=n + s.steps()],
            Transform::Taylor { .. } => &self.points[n..=n],
        }
    }
}

/// Multistep observations `Y_n = sum_j a_jn x_{n+j,u}` for dimension `u`,
/// without noise attached (see [`multistep_noise`]).
pub fn multistep_observations(
    traj: &Trajectory,
    scheme: &MultistepScheme,
    u: usize,
) -> Result<TransformedDataset, ObsError> {
    let m = scheme.steps();
    if traj.len() < m + 1 {
        return Err(ObsError::TooShort {
            needed: m + 1,
            got: traj.len(),
        });
    }
    if u >= traj.dim() {
        return Err(ObsError::BadDimension {
            dim: u,
            d: traj.dim(),
        });
    }
    let r = traj.len() - m;
    let mut y = DVector::zeros(r);
    for n in 0..r {
        let row = scheme.row(n);
        y[n] = (0..=m).map(|j| row.a[j] * traj.states[(n + j, u)]).sum();
    }
    let points: Vec<DVector<f64>> = (0..traj.len()).map(|n| traj.state(n)).collect();
    Ok(TransformedDataset {
        dim: u,
        y,
        points,
        transform: Transform::Multistep(scheme.clone()),
        noise_variant: NoiseVariant::DiagTimeVarying,
        sigma_nominal: 0.0,
        noise: NoiseModel::IidConstant(0.0),
    })
}

/// Taylor observations `Y_n = x_{n+1,u} - x_{n,u}` with window point `x_n`
/// and step `h_n`.
pub fn taylor_observations(traj: &Trajectory, u: usize) -> Result<TransformedDataset, ObsError> {
    if traj.len() < 2 {
        return Err(ObsError::TooShort {
            needed: 2,
            got: traj.len(),
        });
    }
    if u >= traj.dim() {
        return Err(ObsError::BadDimension {
            dim: u,
            d: traj.dim(),
        });
    }
    let r = traj.len() - 1;
    let mut y = DVector::zeros(r);
    for n in 0..r {
        y[n] = traj.states[(n + 1, u)] - traj.states[(n, u)];
    }
    let points: Vec<DVector<f64>> = (0..r).map(|n| traj.state(n)).collect();
    Ok(TransformedDataset {
        dim: u,
        y,
        points,
        transform: Transform::Taylor {
            steps: traj.grid.steps(),
        },
        noise_variant: NoiseVariant::DiagTimeVarying,
        sigma_nominal: 0.0,
        noise: NoiseModel::IidConstant(0.0),
    })
}

/// Attach a noise model to a dataset.
pub fn with_noise(mut ds: TransformedDataset, sigma: f64, variant: NoiseVariant) -> TransformedDataset {
    ds.noise_variant = variant;
    ds.sigma_nominal = sigma;
    ds.noise = noise_for(&ds, sigma);
    ds
}

/// Noise model for a dataset at observation noise std `sigma` (training
/// re-evaluates this as `sigma` is learned).
pub fn noise_for(ds: &TransformedDataset, sigma: f64) -> NoiseModel {
    match &ds.transform {
        Transform::Multistep(scheme) => multistep_noise(scheme, sigma, ds.noise_variant),
        Transform::Taylor { steps } => taylor_noise(steps.len() + 1, sigma, ds.noise_variant),
    }
}

/// Noise of the a-weighted state combination for a multistep scheme:
/// full `sigma^2 A~ A~^T` with `(A~)_{n,m} = a_{m-n,n}`; diagonal
/// `lambda_n = sigma^2 sum_j a_jn^2`; or the first row's norm as a constant.
pub fn multistep_noise(scheme: &MultistepScheme, sigma: f64, variant: NoiseVariant) -> NoiseModel {
    assert!(sigma >= 0.0);
    let m = scheme.steps();
    let r = scheme.n_rows();
    let s2 = sigma * sigma;
    match variant {
        NoiseVariant::DiagTimeVarying => {
            let lam = DVector::from_fn(r, |n, _| {
                s2 * scheme.row(n).a.iter().map(|a| a * a).sum::<f64>()
            });
            NoiseModel::DiagTimeVarying(lam)
        }
        NoiseVariant::IidConstant => {
            let lam = s2 * scheme.row(0).a.iter().map(|a| a * a).sum::<f64>();
            NoiseModel::IidConstant(lam)
        }
        NoiseVariant::Full => {
            // (Sigma)_{nm} = s2 sum_p A~_{n,p} A~_{m,p}, banded with |n-m| <= M.
            let mut full = DMatrix::zeros(r, r);
            for n in 0..r {
                for mm in n.saturating_sub(m)..(n + m + 1).min(r) {
                    let lo = n.max(mm);
                    let hi = (n + m).min(mm + m);
                    let mut acc = 0.0;
                    for p in lo..=hi {
                        acc += scheme.row(n).a[p - n] * scheme.row(mm).a[p - mm];
                    }
                    full[(n, mm)] = s2 * acc;
                }
            }
            NoiseModel::Full(full)
        }
    }
}

/// Noise of first-difference observations from a length-`n` trajectory:
/// tridiagonal with `2 sigma^2` on the diagonal and `-sigma^2` off it.
pub fn taylor_noise(n: usize, sigma: f64, variant: NoiseVariant) -> NoiseModel {
    assert!(n >= 2);
    assert!(sigma >= 0.0);
    let r = n - 1;
    let s2 = sigma * sigma;
    match variant {
        NoiseVariant::DiagTimeVarying => {
            NoiseModel::DiagTimeVarying(DVector::from_element(r, 2.0 * s2))
        }
        NoiseVariant::IidConstant => NoiseModel::IidConstant(2.0 * s2),
        NoiseVariant::Full => {
            let mut full = DMatrix::zeros(r, r);
            for i in 0..r {
                full[(i, i)] = 2.0 * s2;
                if i + 1 < r {
                    full[(i, i + 1)] = -s2;
                    full[(i + 1, i)] = -s2;
                }
            }
            NoiseModel::Full(full)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{FnField, TimeGrid};
    use crate::mscoef::{generate_scheme, SchemeKind};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn traj_1d(values: &[f64], h: f64) -> Trajectory {
        let grid = TimeGrid::regular(0.0, values.len() - 1, h).unwrap();
        let states = DMatrix::from_iterator(values.len(), 1, values.iter().copied());
        Trajectory::new(grid, states, true).unwrap()
    }

    #[test]
    fn euler_observations_are_first_differences() {
        let traj = traj_1d(&[1.0, 3.0, 7.0], 0.5);
        let scheme = generate_scheme(SchemeKind::AdamsBashforth, 1, &traj.grid).unwrap();
        let ds = multistep_observations(&traj, &scheme, 0).unwrap();
        assert_eq!(ds.y.as_slice(), &[2.0, 4.0]);
        let dt = taylor_observations(&traj, 0).unwrap();
        assert_eq!(dt.y.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_trajectory_gives_zero_observations() {
        let traj = traj_1d(&[2.5; 8], 0.3);
        for (kind, order) in [
            (SchemeKind::AdamsBashforth, 3),
            (SchemeKind::AdamsMoulton, 3),
            (SchemeKind::Bdf, 3),
        ] {
            let scheme = generate_scheme(kind, order, &traj.grid).unwrap();
            let ds = multistep_observations(&traj, &scheme, 0).unwrap();
            for v in ds.y.iter() {
                // sum_j a_jn = 0 exactly; per-product rounding leaves ulps.
                assert!(v.abs() <= 1e-14, "nonzero observation {v}");
            }
        }
    }

    #[test]
    fn bdf2_hand_value() {
        let traj = traj_1d(&[0.0, 1.0, 4.0], 1.0);
        let scheme = generate_scheme(SchemeKind::Bdf, 2, &traj.grid).unwrap();
        let ds = multistep_observations(&traj, &scheme, 0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_relative_eq!(ds.y[0], 8.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn window_reproduces_observations() {
        let grid = TimeGrid::irregular(0.0, 12, 0.1, 0.5, 21).unwrap();
        let states = DMatrix::from_fn(13, 2, |n, u| ((n * 3 + u) as f64 * 0.7).sin());
        let traj = Trajectory::new(grid, states, true).unwrap();
        let scheme = generate_scheme(SchemeKind::Bdf, 3, &traj.grid).unwrap();
        let ds = multistep_observations(&traj, &scheme, 1).unwrap();
        for n in 0..ds.len() {
            let row = scheme.row(n);
            let win = ds.window(n);
            let y: f64 = (0..win.len()).map(|j| row.a[j] * win[j][1]).sum();
            assert_eq!(y, ds.y[n]);
        }
    }

    #[test]
    fn too_short_trajectory_rejected() {
        let traj = traj_1d(&[0.0, 1.0], 1.0);
        let grid = TimeGrid::regular(0.0, 5, 1.0).unwrap();
        let scheme = generate_scheme(SchemeKind::Bdf, 3, &grid).unwrap();
        assert!(matches!(
            multistep_observations(&traj, &scheme, 0),
            Err(ObsError::TooShort { .. })
        ));
    }

    #[test]
    fn euler_noise_models() {
        let grid = TimeGrid::regular(0.0, 4, 0.5).unwrap();
        let scheme = generate_scheme(SchemeKind::AdamsBashforth, 1, &grid).unwrap();
        let sigma = 0.3;
        let s2 = sigma * sigma;
        match multistep_noise(&scheme, sigma, NoiseVariant::DiagTimeVarying) {
            NoiseModel::DiagTimeVarying(v) => {
                for lam in v.iter() {
                    assert_relative_eq!(*lam, 2.0 * s2, max_relative = 1e-12);
                }
            }
            other => panic!("unexpected variant {other:?}"),
        }
        match multistep_noise(&scheme, sigma, NoiseVariant::Full) {
            NoiseModel::Full(m) => {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        let expected = if i == j {
                            2.0 * s2
                        } else if i.abs_diff(j) == 1 {
                            -s2
                        } else {
                            0.0
                        };
                        assert_relative_eq!(m[(i, j)], expected, epsilon = 1e-14);
                    }
                }
            }
            other => panic!("unexpected variant {other:?}"),
        }
    }

    /// Dense A~ A~^T oracle for the banded product.
    fn full_noise_oracle(scheme: &MultistepScheme, sigma: f64) -> DMatrix<f64> {
        let m = scheme.steps();
        let r = scheme.n_rows();
        let n = r + m;
        let mut a_tilde = DMatrix::zeros(r, n);
        for row in 0..r {
            for j in 0..=m {
                a_tilde[(row, row + j)] = scheme.row(row).a[j];
            }
        }
        sigma * sigma * (&a_tilde * a_tilde.transpose())
    }

    #[test]
    fn full_noise_matches_dense_oracle_and_diag() {
        for (kind, order, seed) in [
            (SchemeKind::AdamsBashforth, 2, 1),
            (SchemeKind::AdamsMoulton, 3, 2),
            (SchemeKind::Bdf, 3, 3),
        ] {
            let grid = TimeGrid::irregular(0.0, 40, 0.1, 0.8, seed).unwrap();
            let scheme = generate_scheme(kind, order, &grid).unwrap();
            let sigma = 0.7;
            let oracle = full_noise_oracle(&scheme, sigma);
            let full = match multistep_noise(&scheme, sigma, NoiseVariant::Full) {
                NoiseModel::Full(m) => m,
                _ => unreachable!(),
            };
            assert_eq!(full.nrows(), oracle.nrows());
            for i in 0..full.nrows() {
                for j in 0..full.ncols() {
                    assert_relative_eq!(full[(i, j)], oracle[(i, j)], epsilon = 1e-12);
                }
            }
            let diag = match multistep_noise(&scheme, sigma, NoiseVariant::DiagTimeVarying) {
                NoiseModel::DiagTimeVarying(v) => v,
                _ => unreachable!(),
            };
            for i in 0..diag.len() {
                assert_relative_eq!(diag[i], full[(i, i)], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn taylor_noise_small_case() {
        let full = match taylor_noise(3, 1.0, NoiseVariant::Full) {
            NoiseModel::Full(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(full, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
        let eigs = full.symmetric_eigen().eigenvalues;
        assert!(eigs.iter().all(|&e| e > 0.0));
        let diag = match taylor_noise(3, 1.0, NoiseVariant::DiagTimeVarying) {
            NoiseModel::DiagTimeVarying(v) => v,
            _ => unreachable!(),
        };
        assert_eq!(diag.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn local_error_trend_with_order() {
        // On a noiseless trajectory of a known field, |Y_n - sum_j b_jn f(x_{n+j})|
        // shrinks with the scheme order and scales like max(h)^{P+1}.
        use crate::dynsys::VectorField;
        let field = FnField {
            dim: 1,
            f: |x: &nalgebra::DVector<f64>| -x.clone(),
        };
        let residual = |order: usize, h: f64| -> f64 {
            let n = (1.0 / h).round() as usize;
            let grid = TimeGrid::regular(0.0, n, h).unwrap();
            let states =
                DMatrix::from_iterator(n + 1, 1, grid.times().iter().map(|t| (-t).exp()));
            let traj = Trajectory::new(grid.clone(), states, false).unwrap();
            let scheme = generate_scheme(SchemeKind::AdamsBashforth, order, &grid).unwrap();
            let ds = multistep_observations(&traj, &scheme, 0).unwrap();
            let mut worst: f64 = 0.0;
            for n in 0..ds.len() {
                let row = scheme.row(n);
                let rhs: f64 = (0..=scheme.steps())
                    .map(|j| row.b[j] * field.eval(&traj.state(n + j))[0])
                    .sum();
                worst = worst.max((ds.y[n] - rhs).abs());
            }
            worst
        };
        let r1 = residual(1, 0.05);
        let r2 = residual(2, 0.05);
        let r3 = residual(3, 0.05);
        assert!(r1 > r2 && r2 > r3, "no order trend: {r1} {r2} {r3}");
        // Order-2 local error is O(h^3): halving h gives ~8x.
        let ratio = residual(2, 0.05) / residual(2, 0.025);
        assert!((5.0..12.0).contains(&ratio), "h-scaling ratio {ratio}");
        let _ = &field;
    }
}
