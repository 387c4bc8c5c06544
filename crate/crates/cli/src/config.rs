//! Flat key-value experiment configuration.
//!
//! The format is plain `key = value` lines with `#` comments; unknown keys
//! are rejected. System presets (`dho`, `vdp`) fill in the published
//! experiment defaults, every key can be overridden. `csv:PATH` ingests a
//! measured trajectory instead of simulating one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use odegp_core::gpcore::{GradientMode, ModelKind};
use odegp_core::integrate::PredictIntegrator;
use odegp_core::mscoef::SchemeKind;
use odegp_core::obsmodel::NoiseVariant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("unknown system `{0}` (expected dho, vdp or csv:PATH)")]
    UnknownSystem(String),
    #[error("train_steps ({train}) must be at least {min} and below the grid size ({total})")]
    BadSplit {
        train: usize,
        min: usize,
        total: usize,
    },
    #[error("suite spec is empty; set suite_schemes and suite_seeds")]
    EmptySuite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    Dho,
    Vdp,
    Csv(PathBuf),
}

impl SystemSpec {
    pub fn label(&self) -> String {
        match self {
            SystemSpec::Dho => "dho".into(),
            SystemSpec::Vdp => "vdp".into(),
            SystemSpec::Csv(p) => format!("csv:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    DecoupledSampling,
    Mean,
}

/// One experiment: simulate/ingest, transform, train, predict, score.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub x0: Vec<f64>,
    pub h: f64,
    /// Relative step spread; 0 keeps the grid regular.
    pub b: f64,
    pub n_steps: usize,
    pub seed: u64,
    /// Leading grid points used for training.
    pub train_steps: usize,
    pub scheme: SchemeKind,
    pub order: usize,
    pub taylor_adapted: bool,
    pub noise_variant: NoiseVariant,
    /// Injected observation noise std (simulated systems only).
    pub noise_sigma: f64,
    pub train_iters: usize,
    pub pretrain_iters: usize,
    pub learning_rate: f64,
    pub grad_mode: GradientMode,
    pub restarts: usize,
    pub jitter: f64,
    pub predict_integrator: PredictIntegratorKind,
    pub rk45_rtol: f64,
    pub rk45_atol: f64,
    pub predict_mode: PredictMode,
    pub n_samples: usize,
    pub n_features: usize,
    pub max_norm: f64,
    pub out_dir: PathBuf,
    /// Suite cells as `(kind, order)` pairs.
    pub suite_schemes: Vec<(SchemeKind, usize)>,
    pub suite_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictIntegratorKind {
    Rk45,
    Training,
}

impl ExperimentConfig {
    /// DHO defaults: 10 s at h = 0.01, first 500 points train.
    pub fn dho_defaults() -> Self {
        Self {
            system: SystemSpec::Dho,
            x0: vec![1.0, 1.0],
            h: 0.01,
            b: 0.0,
            n_steps: 1000,
            seed: 0,
            train_steps: 500,
            scheme: SchemeKind::AdamsBashforth,
            order: 1,
            taylor_adapted: false,
            noise_variant: NoiseVariant::DiagTimeVarying,
            noise_sigma: 0.01,
            train_iters: 300,
            pretrain_iters: 200,
            learning_rate: 0.08,
            grad_mode: GradientMode::Analytic,
            restarts: 1,
            jitter: 1e-8,
            predict_integrator: PredictIntegratorKind::Rk45,
            rk45_rtol: 1e-6,
            rk45_atol: 1e-8,
            predict_mode: PredictMode::DecoupledSampling,
            n_samples: 256,
            n_features: 256,
            max_norm: 1e6,
            out_dir: PathBuf::from("out"),
            suite_schemes: Vec::new(),
            suite_seeds: Vec::new(),
        }
    }

    /// VDP defaults: 100 irregular steps at h = 0.1, b = 0.5, first 50 train.
    pub fn vdp_defaults() -> Self {
        Self {
            system: SystemSpec::Vdp,
            x0: vec![2.0, 0.0],
            h: 0.1,
            b: 0.5,
            n_steps: 100,
            train_steps: 50,
            ..Self::dho_defaults()
        }
    }

    pub fn defaults_for(system: &SystemSpec) -> Self {
        match system {
            SystemSpec::Dho => Self::dho_defaults(),
            SystemSpec::Vdp => Self::vdp_defaults(),
            SystemSpec::Csv(path) => Self {
                system: SystemSpec::Csv(path.clone()),
                noise_sigma: 0.0,
                ..Self::dho_defaults()
            },
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.scheme {
            SchemeKind::Taylor => ModelKind::Taylor {
                order: self.order,
                adapted: self.taylor_adapted,
            },
            kind => ModelKind::Multistep {
                kind,
                order: self.order,
            },
        }
    }

    pub fn predictor(&self) -> PredictIntegrator {
        match self.predict_integrator {
            PredictIntegratorKind::Rk45 => PredictIntegrator::Rk45 {
                rtol: self.rk45_rtol,
                atol: self.rk45_atol,
            },
            PredictIntegratorKind::Training => PredictIntegrator::Training,
        }
    }

    /// Canonical text form; reparsing reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("system", self.system.label());
        kv.insert(
            "x0",
            self.x0
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("h", format!("{:.17e}", self.h));
        kv.insert("b", format!("{:.17e}", self.b));
        kv.insert("n_steps", self.n_steps.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("train_steps", self.train_steps.to_string());
        kv.insert("scheme", self.scheme.label().to_string());
        kv.insert("order", self.order.to_string());
        kv.insert(
            "taylor_mode",
            if self.taylor_adapted {
                "adapted".into()
            } else {
                "independent".into()
            },
        );
        kv.insert("noise_variant", self.noise_variant.label().to_string());
        kv.insert("noise_sigma", format!("{:.17e}", self.noise_sigma));
        kv.insert("train_iters", self.train_iters.to_string());
        kv.insert("pretrain_iters", self.pretrain_iters.to_string());
        kv.insert("learning_rate", format!("{:.17e}", self.learning_rate));
        kv.insert(
            "grad_mode",
            match self.grad_mode {
                GradientMode::FiniteDifference => "fd".into(),
                GradientMode::Analytic => "analytic".into(),
            },
        );
        kv.insert("restarts", self.restarts.to_string());
        kv.insert("jitter", format!("{:.17e}", self.jitter));
        kv.insert(
            "predict_integrator",
            match self.predict_integrator {
                PredictIntegratorKind::Rk45 => "rk45".into(),
                PredictIntegratorKind::Training => "training".into(),
            },
        );
        kv.insert("rk45_rtol", format!("{:.17e}", self.rk45_rtol));
        kv.insert("rk45_atol", format!("{:.17e}", self.rk45_atol));
        kv.insert(
            "predict_mode",
            match self.predict_mode {
                PredictMode::DecoupledSampling => "ds".into(),
                PredictMode::Mean => "mean".into(),
            },
        );
        kv.insert("n_samples", self.n_samples.to_string());
        kv.insert("n_features", self.n_features.to_string());
        kv.insert("max_norm", format!("{:.17e}", self.max_norm));
        kv.insert("out_dir", self.out_dir.display().to_string());
        if !self.suite_schemes.is_empty() {
            kv.insert(
                "suite_schemes",
                self.suite_schemes
                    .iter()
                    .map(|(k, o)| format!("{}:{}", k.label(), o))
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.suite_seeds.is_empty() {
            kv.insert(
                "suite_seeds",
                self.suite_seeds
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a hash of the canonical text; identifies an experiment.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.to_text().as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

fn parse_system(value: &str) -> Result<SystemSpec, ConfigError> {
    match value {
        "dho" => Ok(SystemSpec::Dho),
        "vdp" => Ok(SystemSpec::Vdp),
        other => match other.strip_prefix("csv:") {
            Some(path) if !path.is_empty() => Ok(SystemSpec::Csv(PathBuf::from(path))),
            _ => Err(ConfigError::UnknownSystem(other.to_string())),
        },
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: idx + 1,
            text: raw.to_string(),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }

    // The system key selects the preset everything else overrides.
    let system = pairs
        .iter()
        .find(|(k, _)| k == "system")
        .map(|(_, v)| parse_system(v))
        .transpose()?
        .unwrap_or(SystemSpec::Dho);
    let mut cfg = ExperimentConfig::defaults_for(&system);

    macro_rules! num {
        ($key:expr, $value:expr) => {
            $value.parse().map_err(|_| ConfigError::BadValue {
                key: $key.to_string(),
                value: $value.to_string(),
            })?
        };
    }

    for (key, value) in &pairs {
        match key.as_str() {
            "system" => {}
            "x0" => {
                cfg.x0 = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                    })?
            }
            "h" => cfg.h = num!(key, value),
            "b" => cfg.b = num!(key, value),
            "n_steps" => cfg.n_steps = num!(key, value),
            "seed" => cfg.seed = num!(key, value),
            "train_steps" => cfg.train_steps = num!(key, value),
            "scheme" => {
                cfg.scheme = SchemeKind::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.clone(),
                    value: value.clone(),
                })?
            }
            "order" => cfg.order = num!(key, value),
            "taylor_mode" => {
                cfg.taylor_adapted = match value.as_str() {
                    "adapted" => true,
                    "independent" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        })
                    }
                }
            }
            "noise_variant" => {
                cfg.noise_variant =
                    NoiseVariant::parse(value).ok_or_else(|| ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                    })?
            }
            "noise_sigma" => cfg.noise_sigma = num!(key, value),
            "train_iters" => cfg.train_iters = num!(key, value),
            "pretrain_iters" => cfg.pretrain_iters = num!(key, value),
            "learning_rate" => cfg.learning_rate = num!(key, value),
            "grad_mode" => {
                cfg.grad_mode = match value.as_str() {
                    "fd" => GradientMode::FiniteDifference,
                    "analytic" => GradientMode::Analytic,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        })
                    }
                }
            }
            "restarts" => cfg.restarts = num!(key, value),
            "jitter" => cfg.jitter = num!(key, value),
            "predict_integrator" => {
                cfg.predict_integrator = match value.as_str() {
                    "rk45" => PredictIntegratorKind::Rk45,
                    "training" => PredictIntegratorKind::Training,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        })
                    }
                }
            }
            "rk45_rtol" => cfg.rk45_rtol = num!(key, value),
            "rk45_atol" => cfg.rk45_atol = num!(key, value),
            "predict_mode" => {
                cfg.predict_mode = match value.as_str() {
                    "ds" => PredictMode::DecoupledSampling,
                    "mean" => PredictMode::Mean,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.clone(),
                            value: value.clone(),
                        })
                    }
                }
            }
            "n_samples" => cfg.n_samples = num!(key, value),
            "n_features" => cfg.n_features = num!(key, value),
            "max_norm" => cfg.max_norm = num!(key, value),
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "suite_schemes" => {
                cfg.suite_schemes = value
                    .split(',')
                    .map(|cell| {
                        let (k, o) = cell.trim().split_once(':')?;
                        Some((SchemeKind::parse(k)?, o.parse().ok()?))
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                    })?
            }
            "suite_seeds" => {
                cfg.suite_seeds = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                    })?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }

    let too_many = match cfg.system {
        SystemSpec::Csv(_) => false, // grid length comes from the file
        _ => cfg.train_steps >= cfg.n_steps + 1,
    };
    if cfg.train_steps < 4 || too_many {
        return Err(ConfigError::BadSplit {
            train: cfg.train_steps,
            min: 4,
            total: cfg.n_steps + 1,
        });
    }
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}
