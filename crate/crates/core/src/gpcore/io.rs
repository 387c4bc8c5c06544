//! Model persistence as plain text.
//!
//! A model file stores the scheme identity, seed, learned hyperparameters
//! (log space) and a hash of the training data. Loading re-derives datasets
//! and factorizations from the trajectory and refuses to proceed if the
//! data hash does not match.

use std::fmt::Write as _;

use crate::dynsys::Trajectory;
use crate::kernels::ArdHypers;
use crate::mscoef::SchemeKind;
use crate::obsmodel::NoiseVariant;

use super::train::build_datasets;
use super::{
    factorize_dim, data_hash, DimKernels, DimModel, GpError, ModelKind, ModelSpec, TrainedModel,
};

fn kind_label(kind: &ModelKind) -> String {
    match kind {
        ModelKind::Multistep { kind, order } => format!("multistep {} {}", kind.label(), order),
        ModelKind::Taylor { order, adapted } => format!(
            "taylor {} {}",
            order,
            if *adapted { "adapted" } else { "independent" }
        ),
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, GpError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["multistep", kind, order] => Ok(ModelKind::Multistep {
            kind: SchemeKind::parse(kind)
                .ok_or_else(|| GpError::ModelFormat(format!("bad scheme kind `{kind}`")))?,
            order: order
                .parse()
                .map_err(|_| GpError::ModelFormat(format!("bad order `{order}`")))?,
        }),
        ["taylor", order, mode] => Ok(ModelKind::Taylor {
            order: order
                .parse()
                .map_err(|_| GpError::ModelFormat(format!("bad order `{order}`")))?,
            adapted: match *mode {
                "adapted" => true,
                "independent" => false,
                other => return Err(GpError::ModelFormat(format!("bad taylor mode `{other}`"))),
            },
        }),
        _ => Err(GpError::ModelFormat(format!("bad kind line `{s}`"))),
    }
}

fn write_logs(out: &mut String, h: &ArdHypers) {
    let _ = write!(out, "{:.17e}", h.log_signal_variance());
    for v in h.log_lengthscales() {
        let _ = write!(out, " {v:.17e}");
    }
}

fn parse_logs(s: &str) -> Result<ArdHypers, GpError> {
    let vals: Result<Vec<f64>, _> = s.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|_| GpError::ModelFormat(format!("bad hyper line `{s}`")))?;
    if vals.len() < 2 {
        return Err(GpError::ModelFormat(format!("hyper line too short `{s}`")));
    }
    Ok(ArdHypers::from_log_vec(&vals))
}

/// Serialize a trained model.
pub fn model_to_text(model: &TrainedModel) -> String {
    let mut out = String::from("odegp model v1\n");
    let _ = writeln!(out, "kind = {}", kind_label(&model.spec.kind));
    let _ = writeln!(out, "noise_variant = {}", model.spec.noise_variant.label());
    let _ = writeln!(out, "seed = {}", model.seed);
    let _ = writeln!(out, "data_hash = {:016x}", model.data_hash);
    let _ = writeln!(out, "dims = {}", model.dims.len());
    for (u, dm) in model.dims.iter().enumerate() {
        let _ = writeln!(out, "sigma {u} = {:.17e}", dm.sigma);
        match &dm.kernels {
            DimKernels::Multistep(h) => {
                let _ = write!(out, "kernel {u} 0 = ");
                write_logs(&mut out, h);
                out.push('\n');
            }
            DimKernels::TaylorIndependent(levels) => {
                for (l, h) in levels.iter().enumerate() {
                    let _ = write!(out, "kernel {u} {l} = ");
                    write_logs(&mut out, h);
                    out.push('\n');
                }
            }
            DimKernels::TaylorAdapted { base } => {
                if u == 0 {
                    for (j, h) in base.iter().enumerate() {
                        let _ = write!(out, "base {j} = ");
                        write_logs(&mut out, h);
                        out.push('\n');
                    }
                }
            }
        }
    }
    out
}

/// Rebuild a trained model from its text form and the training trajectory.
pub fn load_model(text: &str, traj: &Trajectory, jitter_rel: f64) -> Result<TrainedModel, GpError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("odegp model v1") => {}
        other => {
            return Err(GpError::ModelFormat(format!(
                "bad magic line `{}`",
                other.unwrap_or("")
            )))
        }
    }

    let mut kind = None;
    let mut variant = None;
    let mut seed = 0u64;
    let mut file_hash = None;
    let mut n_dims = None;
    let mut sigmas: Vec<Option<f64>> = Vec::new();
    let mut kernels: Vec<Vec<ArdHypers>> = Vec::new();
    let mut base: Vec<ArdHypers> = Vec::new();

    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| GpError::ModelFormat(format!("bad line `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let mut key_parts = key.split_whitespace();
        match key_parts.next() {
            Some("kind") => kind = Some(parse_kind(value)?),
            Some("noise_variant") => {
                variant = Some(NoiseVariant::parse(value).ok_or_else(|| {
                    GpError::ModelFormat(format!("bad noise variant `{value}`"))
                })?)
            }
            Some("seed") => {
                seed = value
                    .parse()
                    .map_err(|_| GpError::ModelFormat("bad seed".into()))?
            }
            Some("data_hash") => {
                file_hash = Some(
                    u64::from_str_radix(value, 16)
                        .map_err(|_| GpError::ModelFormat("bad data hash".into()))?,
                )
            }
            Some("dims") => {
                let n: usize = value
                    .parse()
                    .map_err(|_| GpError::ModelFormat("bad dims".into()))?;
                n_dims = Some(n);
                sigmas = vec![None; n];
                kernels = vec![Vec::new(); n];
            }
            Some("sigma") => {
                let u: usize = key_parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| GpError::ModelFormat("bad sigma index".into()))?;
                sigmas[u] = Some(
                    value
                        .parse()
                        .map_err(|_| GpError::ModelFormat("bad sigma".into()))?,
                );
            }
            Some("kernel") => {
                let u: usize = key_parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| GpError::ModelFormat("bad kernel index".into()))?;
                kernels[u].push(parse_logs(value)?);
            }
            Some("base") => base.push(parse_logs(value)?),
            other => {
                return Err(GpError::ModelFormat(format!(
                    "unknown key `{}`",
                    other.unwrap_or("")
                )))
            }
        }
    }

    let kind = kind.ok_or_else(|| GpError::ModelFormat("missing kind".into()))?;
    let variant = variant.ok_or_else(|| GpError::ModelFormat("missing noise variant".into()))?;
    let file_hash = file_hash.ok_or_else(|| GpError::ModelFormat("missing data hash".into()))?;
    let n_dims = n_dims.ok_or_else(|| GpError::ModelFormat("missing dims".into()))?;

    let hash = data_hash(traj);
    if hash != file_hash {
        return Err(GpError::DataHashMismatch {
            file: file_hash,
            data: hash,
        });
    }
    if traj.dim() != n_dims {
        return Err(GpError::ModelFormat(format!(
            "model has {n_dims} dims, trajectory has {}",
            traj.dim()
        )));
    }

    let spec = ModelSpec {
        kind,
        noise_variant: variant,
    };
    let (levels, adapted) = match kind {
        ModelKind::Multistep { .. } => (1, false),
        ModelKind::Taylor { order, adapted } => (order, adapted),
    };
    let datasets = build_datasets(traj, &spec, 0.0)?;

    let mut dims = Vec::with_capacity(n_dims);
    for (u, ds) in datasets.into_iter().enumerate() {
        let sigma =
            sigmas[u].ok_or_else(|| GpError::ModelFormat(format!("missing sigma {u}")))?;
        let dk = if adapted {
            if base.len() != n_dims {
                return Err(GpError::ModelFormat("missing base kernels".into()));
            }
            DimKernels::TaylorAdapted { base: base.clone() }
        } else {
            match kind {
                ModelKind::Multistep { .. } => {
                    if kernels[u].len() != 1 {
                        return Err(GpError::ModelFormat(format!("dim {u} needs one kernel")));
                    }
                    DimKernels::Multistep(kernels[u][0].clone())
                }
                ModelKind::Taylor { order, .. } => {
                    if kernels[u].len() != order {
                        return Err(GpError::ModelFormat(format!(
                            "dim {u} needs {order} kernels"
                        )));
                    }
                    DimKernels::TaylorIndependent(kernels[u].clone())
                }
            }
        };
        let factor = factorize_dim(&ds, &dk, u, levels, sigma, jitter_rel)?;
        dims.push(DimModel {
            dataset: ds,
            kernels: dk,
            sigma,
            factor,
        });
    }

    Ok(TrainedModel {
        spec,
        dims,
        seed,
        data_hash: hash,
    })
}
