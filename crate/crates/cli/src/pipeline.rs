//! End-to-end experiment pipeline:
//! simulate/ingest -> transform -> train -> predict -> score.
//!
//! Every stage is deterministic given the config and seed; sub-seeds for
//! grid, noise, training and sampling are derived so reruns reproduce every
//! artifact bit-exactly. Wall time is reported separately (timing.txt) to
//! keep the metric files reproducible.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use odegp_core::dynsys::{
    add_noise, load_csv, simulate_reference, system_by_name, trajectory_to_csv, DynError,
    TimeGrid, Trajectory,
};
use odegp_core::gpcore::{
    load_model, model_to_text, train, GpError, ModelSpec, TrainConfig, TrainedModel,
};
use odegp_core::integrate::{
    ds_rollout_ensemble, mean_rollout, EnsembleConfig, IntegrateError, RolloutStatus,
};
use odegp_core::rng::derive_seed;

use crate::config::{ExperimentConfig, PredictMode, SystemSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("data stage: {0}")]
    Data(#[from] DynError),
    #[error("training stage: {0}")]
    Train(#[from] GpError),
    #[error("prediction stage: {0}")]
    Predict(#[from] IntegrateError),
    #[error("prediction rollout failed at step {step}")]
    RolloutFailed { step: usize },
    #[error("metric stage: grids or dimensions do not match")]
    MetricMismatch,
    #[error("missing artifact `{0}`; run the producing subcommand first")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// CLI exit code: 1 for configuration problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::MissingArtifact(_)
            | PipelineError::Io(_) => 1,
            PipelineError::Data(DynError::Solver(_)) => 2,
            PipelineError::Data(_) => 1,
            _ => 2,
        }
    }
}

/// Simulated or ingested data for one experiment.
pub struct DataBundle {
    /// Full noisy trajectory (the "measurements").
    pub data: Trajectory,
    /// Clean reference on the same grid (simulated systems only).
    pub reference: Option<Trajectory>,
    /// Leading slice of `data` used for training.
    pub train: Trajectory,
}

/// Per-experiment metrics. `mse_clean` scores against the clean reference
/// when one exists; `mse_data` always scores against the measurements.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mse_clean: Option<f64>,
    pub mse_data: f64,
    pub rmse_over_time: Vec<f64>,
    pub failed_samples: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config_hash: u64,
}

/// Mean squared error over all steps and dimensions.
pub fn mse(pred: &Trajectory, reference: &Trajectory) -> Result<f64, PipelineError> {
    if pred.len() != reference.len() || pred.dim() != reference.dim() {
        return Err(PipelineError::MetricMismatch);
    }
    let n = (pred.len() * pred.dim()) as f64;
    Ok((&pred.states - &reference.states).iter().map(|e| e * e).sum::<f64>() / n)
}

/// Per-step RMSE over dimensions; its squared time average equals the MSE.
pub fn rmse_over_time(pred: &Trajectory, reference: &Trajectory) -> Result<Vec<f64>, PipelineError> {
    if pred.len() != reference.len() || pred.dim() != reference.dim() {
        return Err(PipelineError::MetricMismatch);
    }
    let d = pred.dim() as f64;
    Ok((0..pred.len())
        .map(|n| {
            let sq: f64 = (0..pred.dim())
                .map(|u| (pred.states[(n, u)] - reference.states[(n, u)]).powi(2))
                .sum();
            (sq / d).sqrt()
        })
        .collect())
}

/// Build the data bundle for a config: simulate the reference with a tight
/// RK4(5) tolerance and inject observation noise, or load a CSV trajectory.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataBundle, PipelineError> {
    match &cfg.system {
        SystemSpec::Csv(path) => {
            let data = load_csv(path)?;
            let train = data.head(cfg.train_steps.min(data.len()))?;
            Ok(DataBundle {
                data,
                reference: None,
                train,
            })
        }
        sys => {
            let field = system_by_name(&sys.label())?;
            let grid = if cfg.b == 0.0 {
                TimeGrid::regular(0.0, cfg.n_steps, cfg.h)?
            } else {
                TimeGrid::irregular(0.0, cfg.n_steps, cfg.h, cfg.b, derive_seed(cfg.seed, 1))?
            };
            let x0 = DVector::from_vec(cfg.x0.clone());
            let reference = simulate_reference(field.as_ref(), &x0, &grid, 1e-10, 1e-12)?;
            let sigma = vec![cfg.noise_sigma; reference.dim()];
            let data = add_noise(&reference, &sigma, derive_seed(cfg.seed, 2));
            let train = data.head(cfg.train_steps)?;
            Ok(DataBundle {
                data,
                reference: Some(reference),
                train,
            })
        }
    }
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        iterations: cfg.train_iters,
        pretrain_iterations: cfg.pretrain_iters,
        learning_rate: cfg.learning_rate,
        jitter_rel: cfg.jitter,
        restarts: cfg.restarts,
        seed: derive_seed(cfg.seed, 3),
        gradient: cfg.grad_mode,
    }
}

pub fn train_model(cfg: &ExperimentConfig, train_traj: &Trajectory) -> Result<TrainedModel, PipelineError> {
    let spec = ModelSpec {
        kind: cfg.model_kind(),
        noise_variant: cfg.noise_variant,
    };
    Ok(train(train_traj, &spec, &train_config(cfg))?)
}

/// Prediction output: mean trajectory plus the DS ensemble variance when
/// sampling.
pub struct Prediction {
    pub mean: Trajectory,
    pub variance: Option<DMatrix<f64>>,
    pub failed_samples: usize,
}

pub fn predict(
    cfg: &ExperimentConfig,
    model: &Arc<TrainedModel>,
    bundle: &DataBundle,
) -> Result<Prediction, PipelineError> {
    let grid = &bundle.data.grid;
    match cfg.predict_mode {
        PredictMode::DecoupledSampling => {
            let ens_cfg = EnsembleConfig {
                n_samples: cfg.n_samples,
                features: cfg.n_features,
                seed: derive_seed(cfg.seed, 4),
                integrator: cfg.predictor(),
                max_norm: cfg.max_norm,
                implicit: Default::default(),
            };
            let res = ds_rollout_ensemble(model, grid, &bundle.data, &ens_cfg)?;
            Ok(Prediction {
                mean: Trajectory::new(grid.clone(), res.mean, false)?,
                variance: Some(res.variance),
                failed_samples: res.failed,
            })
        }
        PredictMode::Mean => {
            let res = mean_rollout(
                model,
                grid,
                &bundle.data,
                &cfg.predictor(),
                &Default::default(),
                cfg.max_norm,
            )?;
            match res.status {
                RolloutStatus::Ok => Ok(Prediction {
                    mean: res.trajectory.expect("ok status carries a trajectory"),
                    variance: None,
                    failed_samples: 0,
                }),
                RolloutStatus::SolverFailure { step } => {
                    Err(PipelineError::RolloutFailed { step })
                }
            }
        }
    }
}

fn matrix_csv(grid: &TimeGrid, m: &DMatrix<f64>, value_prefix: &str) -> String {
    let mut out = String::from("t");
    for u in 1..=m.ncols() {
        let _ = write!(out, ",{value_prefix}{u}");
    }
    out.push('\n');
    for n in 0..m.nrows() {
        let _ = write!(out, "{:.16e}", grid.times()[n]);
        for u in 0..m.ncols() {
            let _ = write!(out, ",{:.16e}", m[(n, u)]);
        }
        out.push('\n');
    }
    out
}

pub fn metrics_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config_hash = {:016x}", report.config_hash);
    let _ = writeln!(out, "seed = {}", report.seed);
    match report.mse_clean {
        Some(v) => {
            let _ = writeln!(out, "mse_clean = {v:.17e}");
        }
        None => {
            let _ = writeln!(out, "mse_clean = n/a");
        }
    }
    let _ = writeln!(out, "mse_data = {:.17e}", report.mse_data);
    let _ = writeln!(out, "failed_samples = {}", report.failed_samples);
    out
}

/// Run the full pipeline and write every artifact under `cfg.out_dir`:
/// `config.txt`, `data.csv`, `reference.csv`, `model.txt`,
/// `predictions.csv`, `variance.csv`, `rmse_over_time.csv`, `metrics.txt`
/// and `timing.txt`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, PipelineError> {
    let started = Instant::now();
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let bundle = prepare_data(cfg)?;
    std::fs::write(out.join("data.csv"), trajectory_to_csv(&bundle.data))?;
    if let Some(reference) = &bundle.reference {
        std::fs::write(out.join("reference.csv"), trajectory_to_csv(reference))?;
    }
    std::fs::write(out.join("train.csv"), trajectory_to_csv(&bundle.train))?;

    let model = Arc::new(train_model(cfg, &bundle.train)?);
    std::fs::write(out.join("model.txt"), model_to_text(&model))?;

    let prediction = predict(cfg, &model, &bundle)?;
    std::fs::write(
        out.join("predictions.csv"),
        trajectory_to_csv(&prediction.mean),
    )?;
    if let Some(variance) = &prediction.variance {
        std::fs::write(
            out.join("variance.csv"),
            matrix_csv(&bundle.data.grid, variance, "var"),
        )?;
    }

    let report = score(cfg, &bundle, &prediction, started.elapsed().as_secs_f64())?;
    let mut rmse_csv = String::from("t,rmse\n");
    for (n, v) in report.rmse_over_time.iter().enumerate() {
        let _ = writeln!(
            rmse_csv,
            "{:.16e},{v:.16e}",
            bundle.data.grid.times()[n]
        );
    }
    std::fs::write(out.join("rmse_over_time.csv"), rmse_csv)?;
    std::fs::write(out.join("metrics.txt"), metrics_text(&report))?;
    std::fs::write(
        out.join("timing.txt"),
        format!("wall_time_s = {:.3}\n", report.wall_time_s),
    )?;
    Ok(report)
}

pub fn score(
    cfg: &ExperimentConfig,
    bundle: &DataBundle,
    prediction: &Prediction,
    wall_time_s: f64,
) -> Result<MetricsReport, PipelineError> {
    let mse_data = mse(&prediction.mean, &bundle.data)?;
    let mse_clean = bundle
        .reference
        .as_ref()
        .map(|r| mse(&prediction.mean, r))
        .transpose()?;
    let rmse_ref = bundle.reference.as_ref().unwrap_or(&bundle.data);
    let rmse = rmse_over_time(&prediction.mean, rmse_ref)?;
    Ok(MetricsReport {
        mse_clean,
        mse_data,
        rmse_over_time: rmse,
        failed_samples: prediction.failed_samples,
        wall_time_s,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

/// Load a previously written model against freshly prepared data.
pub fn load_model_artifact(
    cfg: &ExperimentConfig,
    train_traj: &Trajectory,
) -> Result<TrainedModel, PipelineError> {
    let path = cfg.out_dir.join("model.txt");
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(load_model(&text, train_traj, cfg.jitter)?)
}

pub fn read_predictions(out_dir: &Path) -> Result<Trajectory, PipelineError> {
    let path = out_dir.join("predictions.csv");
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.display().to_string()));
    }
    Ok(load_csv(&path)?)
}
