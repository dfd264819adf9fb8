//! Residual libraries: subtract a general adapter from every task expert, or
//! subtract the experts' own mean (the mean-normalization baseline).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{average_adapters, AdapterLibrary, Provenance};
use crate::lowrank::LowRankDelta;
use crate::real::Real;

/// Semantics of adapter subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtractMode {
    /// `ΔW_ts − ΔW_g`, exact, represented at rank `r_ts + r_g`.
    #[default]
    DeltaSpace,
    /// `(A_ts − A_g, B_ts − B_g)` at unchanged rank. Not equal to the
    /// delta-space difference in general.
    ParameterSpace,
}

impl fmt::Display for SubtractMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubtractMode::DeltaSpace => "delta",
            SubtractMode::ParameterSpace => "param",
        })
    }
}

impl std::str::FromStr for SubtractMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" | "delta_space" => Ok(SubtractMode::DeltaSpace),
            "param" | "parameter_space" => Ok(SubtractMode::ParameterSpace),
            other => Err(Error::InvalidArgument(format!(
                "unknown subtraction mode `{other}` (expected delta or param)"
            ))),
        }
    }
}

fn param_space_diff<T: Real>(
    expert: &str,
    site: crate::library::SiteId,
    ts: &LowRankDelta<T>,
    g: &LowRankDelta<T>,
) -> Result<LowRankDelta<T>> {
    if ts.rank() != g.rank() || ts.alpha() != g.alpha() || ts.base_rank() != g.base_rank() {
        return Err(Error::RankMismatch {
            adapter: expert.to_string(),
            site: site.to_string(),
            detail: format!(
                "parameter-space subtraction needs equal rank/alpha; expert has rank {} alpha {}, general has rank {} alpha {}",
                ts.rank(),
                ts.alpha(),
                g.rank(),
                g.alpha()
            ),
        });
    }
    if ts.dims() != g.dims() {
        return Err(Error::dim(
            "parameter-space subtraction",
            format!("{:?}", ts.dims()),
            format!("{:?}", g.dims()),
        ));
    }
    LowRankDelta::new(
        ts.a().sub(g.a())?,
        ts.b().sub(g.b())?,
        ts.alpha(),
        ts.base_rank(),
    )
}

/// Replaces every expert with `expert − general`. Generals are carried over
/// unchanged and the input is left untouched.
pub fn subtract_general<T: Real>(
    lib: &AdapterLibrary<T>,
    general_name: &str,
    mode: SubtractMode,
) -> Result<AdapterLibrary<T>> {
    let general = lib.general(general_name)?;
    let mut experts = Vec::with_capacity(lib.experts.len());
    for e in &lib.experts {
        let mut residual = e.try_map(|site, d| {
            let g = general.delta(site).ok_or_else(|| {
                Error::Signature(format!("general `{general_name}` lacks site {site}"))
            })?;
            match mode {
                SubtractMode::DeltaSpace => d.subtract(g),
                SubtractMode::ParameterSpace => param_space_diff(&e.name, site, d, g),
            }
        })?;
        residual.metadata.insert("subtracted_general".into(), general_name.to_string());
        residual.metadata.insert("subtract_mode".into(), mode.to_string());
        experts.push(residual);
    }
    Ok(AdapterLibrary {
        signature: lib.signature.clone(),
        experts,
        generals: lib.generals.clone(),
        provenance: Provenance::Residual {
            general: general_name.to_string(),
            mode,
        },
    })
}

/// Replaces every expert with `expert − mean(experts)` in delta space.
pub fn mean_normalize<T: Real>(lib: &AdapterLibrary<T>) -> Result<AdapterLibrary<T>> {
    if lib.experts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean normalization needs at least 2 experts, library has {}",
            lib.experts.len()
        )));
    }
    let refs: Vec<_> = lib.experts.iter().collect();
    let mean = average_adapters("expert_mean", &refs)?;
    let mut experts = Vec::with_capacity(lib.experts.len());
    for e in &lib.experts {
        let mut residual = e.try_map(|site, d| d.subtract(&mean.deltas[&site]))?;
        residual.metadata.insert("mean_normalized".into(), "true".into());
        experts.push(residual);
    }
    Ok(AdapterLibrary {
        signature: lib.signature.clone(),
        experts,
        generals: lib.generals.clone(),
        provenance: Provenance::MeanNormalized,
    })
}
