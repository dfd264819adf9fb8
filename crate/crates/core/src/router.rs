//! Prototype-based per-token routing over an adapter library.
//!
//! Each expert is summarized at each site by the top right singular vector
//! of its increment. A token activation is scored against every prototype,
//! the best `k_top` experts are kept, and their increments are mixed with
//! softmax weights over the kept scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{AdapterLibrary, ModelSignature, Provenance, SiteId};
use crate::linalg::{dot, softmax_f64, top_k_indices, Accumulate, DenseMatrix};
use crate::lowrank::LowRankDelta;
use crate::real::Real;

/// How a token is scored against a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `|⟨x, v⟩|`. Singular vectors have no intrinsic sign.
    #[default]
    Absolute,
    /// `⟨x, v⟩` with the canonical prototype sign.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub k_top: usize,
    pub temperature: f64,
    pub score: ScoreMode,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            k_top: 3,
            temperature: 1.0,
            score: ScoreMode::Absolute,
        }
    }
}

impl RouterConfig {
    pub fn with_k(k_top: usize) -> Self {
        Self {
            k_top,
            ..Self::default()
        }
    }
}

/// Prototypes of every expert at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteBank<T = f32> {
    /// `n × k_in`; row `i` belongs to expert `i`. Degenerate rows are zero.
    pub prototypes: DenseMatrix<T>,
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T = f32> {
    pub signature: ModelSignature,
    pub built_from: Provenance,
    pub expert_names: Vec<String>,
    pub sites: BTreeMap<SiteId, SiteBank<T>>,
}

impl<T: Real> PrototypeBank<T> {
    pub fn n_experts(&self) -> usize {
        self.expert_names.len()
    }

    pub fn site(&self, site: SiteId) -> Result<&SiteBank<T>> {
        self.sites
            .get(&site)
            .ok_or_else(|| Error::Signature(format!("prototype bank has no site {site}")))
    }

    /// Checks that this bank was built from a library with the same experts
    /// and provenance, so residual experts are never routed by raw prototypes.
    pub fn check_matches(&self, lib: &AdapterLibrary<T>) -> Result<()> {
        if self.signature != lib.signature {
            return Err(Error::Signature("prototype bank and library signatures differ".into()));
        }
        let names: Vec<&str> = self.expert_names.iter().map(String::as_str).collect();
        if names != lib.expert_names() {
            return Err(Error::Signature(
                "prototype bank expert order does not match the library".into(),
            ));
        }
        if self.built_from != lib.provenance {
            return Err(Error::Signature(format!(
                "prototype bank was built from a {} library but this library is {}",
                self.built_from, lib.provenance
            )));
        }
        Ok(())
    }
}

/// Computes the prototype of every expert at every site. Zero experts get a
/// zero row and are flagged degenerate.
pub fn build_prototypes<T: Real>(lib: &AdapterLibrary<T>) -> Result<PrototypeBank<T>> {
    let mut sites = BTreeMap::new();
    for site in lib.signature.site_ids() {
        let (_, k) = lib.signature.site_dims(site.kind);
        let n = lib.experts.len();
        let mut prototypes = DenseMatrix::zeros(n, k);
        let mut degenerate = vec![false; n];
        for (i, e) in lib.experts.iter().enumerate() {
            let delta = e.delta(site).ok_or_else(|| {
                Error::Signature(format!("expert `{}` lacks site {site}", e.name))
            })?;
            match delta.prototype() {
                Ok(v) => prototypes.row_mut(i).copy_from_slice(&v),
                Err(Error::Degenerate(_)) => degenerate[i] = true,
                Err(e) => return Err(e),
            }
        }
        sites.insert(
            site,
            SiteBank {
                prototypes,
                degenerate,
            },
        );
    }
    Ok(PrototypeBank {
        signature: lib.signature.clone(),
        built_from: lib.provenance.clone(),
        expert_names: lib.experts.iter().map(|e| e.name.clone()).collect(),
        sites,
    })
}

/// Selected experts and their mixing weights for one token at one site.
/// Experts not listed have weight exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub indices: Vec<usize>,
    pub coeffs: Vec<f64>,
    /// Raw scores of the selected experts, aligned with `indices`.
    pub scores: Vec<f64>,
    /// Every expert was degenerate; the decision is a uniform fallback.
    pub all_degenerate: bool,
}

impl RoutingDecision {
    /// Coefficient vector over all `n` experts.
    pub fn dense_coefficients(&self, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n];
        for (&i, &w) in self.indices.iter().zip(&self.coeffs) {
            c[i] = w;
        }
        c
    }
}

/// Per-expert scores of `x` at `site`; degenerate experts score exactly 0.
pub fn scores<T: Real>(bank: &PrototypeBank<T>, site: SiteId, x: &[T], mode: ScoreMode) -> Result<Vec<f64>> {
    let sb = bank.site(site)?;
    if x.len() != sb.prototypes.cols() {
        return Err(Error::dim("route", sb.prototypes.cols(), x.len()));
    }
    Ok((0..sb.prototypes.rows())
        .map(|i| {
            if sb.degenerate[i] {
                return 0.0;
            }
            let s = dot(sb.prototypes.row(i), x, Accumulate::Wide).as_f64();
            match mode {
                ScoreMode::Absolute => s.abs(),
                ScoreMode::Signed => s,
            }
        })
        .collect())
}

pub fn route<T: Real>(bank: &PrototypeBank<T>, site: SiteId, x: &[T], cfg: &RouterConfig) -> Result<RoutingDecision> {
    if cfg.k_top == 0 {
        return Err(Error::InvalidArgument("k_top must be at least 1".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "routing temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let raw = scores(bank, site, x, cfg.score)?;
    let n = raw.len();
    if n == 0 {
        return Err(Error::Empty("route"));
    }
    let sb = bank.site(site)?;
    let k = cfg.k_top.min(n);

    if sb.degenerate.iter().all(|&d| d) {
        return Ok(RoutingDecision {
            indices: (0..k).collect(),
            coeffs: vec![1.0 / k as f64; k],
            scores: vec![0.0; k],
            all_degenerate: true,
        });
    }

    // Degenerate experts lose every tie against live ones.
    let keys: Vec<f64> = raw
        .iter()
        .zip(&sb.degenerate)
        .map(|(&s, &d)| if d { f64::NEG_INFINITY } else { s })
        .collect();
    let indices = top_k_indices(&keys, k)?;
    let selected: Vec<f64> = indices.iter().map(|&i| raw[i]).collect();
    let scaled: Vec<f64> = selected.iter().map(|s| s / cfg.temperature).collect();
    Ok(RoutingDecision {
        indices,
        coeffs: softmax_f64(&scaled)?,
        scores: selected,
        all_degenerate: false,
    })
}

/// Weighted concatenation `Σ c_j · ΔW_{indices[j]}`.
pub fn compose<T: Real>(lib: &AdapterLibrary<T>, site: SiteId, decision: &RoutingDecision) -> Result<LowRankDelta<T>> {
    let mut acc: Option<LowRankDelta<T>> = None;
    for (&i, &c) in decision.indices.iter().zip(&decision.coeffs) {
        let d = expert_delta(lib, site, i)?.scale(c);
        acc = Some(match acc {
            None => d,
            Some(a) => a.add(&d)?,
        });
    }
    acc.ok_or(Error::Empty("compose"))
}

fn expert_delta<T: Real>(lib: &AdapterLibrary<T>, site: SiteId, i: usize) -> Result<&LowRankDelta<T>> {
    let e = lib.experts.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: lib.experts.len(),
    })?;
    e.delta(site)
        .ok_or_else(|| Error::Signature(format!("expert `{}` lacks site {site}", e.name)))
}

/// `Σ c_j · B_j (A_j x)` for an existing decision, in 64-bit.
pub fn apply_decision<T: Real>(
    lib: &AdapterLibrary<T>,
    site: SiteId,
    decision: &RoutingDecision,
    x: &[T],
) -> Result<Vec<T>> {
    let mut out: Option<Vec<f64>> = None;
    for (&i, &c) in decision.indices.iter().zip(&decision.coeffs) {
        let y = expert_delta(lib, site, i)?.apply_wide(x)?;
        match out.as_mut() {
            None => out = Some(y.into_iter().map(|v| c * v).collect()),
            Some(acc) => acc.iter_mut().zip(y).for_each(|(a, v)| *a += c * v),
        }
    }
    Ok(out.ok_or(Error::Empty("apply_decision"))?.into_iter().map(T::of).collect())
}

/// Routes `x` and applies the mixed increment without building the composed delta.
pub fn apply_routed<T: Real>(
    lib: &AdapterLibrary<T>,
    bank: &PrototypeBank<T>,
    site: SiteId,
    x: &[T],
    cfg: &RouterConfig,
) -> Result<Vec<T>> {
    let decision = route(bank, site, x, cfg)?;
    apply_decision(lib, site, &decision, x)
}
