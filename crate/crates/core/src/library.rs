//! Adapter libraries: task experts in a fixed order plus named general adapters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genknowsub::SubtractMode;
use crate::lowrank::LowRankDelta;
use crate::real::Real;

/// Weight matrices that carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Fused query/key/value projection, `3·d_model × d_model`.
    QkvFused,
    /// Attention output projection, `d_model × d_model`.
    OutputProjection,
}

impl SiteKind {
    pub const ALL: [SiteKind; 2] = [SiteKind::QkvFused, SiteKind::OutputProjection];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::QkvFused => "qkv_fused",
            SiteKind::OutputProjection => "output_projection",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/{}", self.layer, self.kind)
    }
}

/// Shape contract shared by a model and every adapter attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub d_model: usize,
    pub n_layers: usize,
    pub sites: Vec<SiteKind>,
}

impl ModelSignature {
    pub fn new(d_model: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            n_layers,
            sites: SiteKind::ALL.to_vec(),
        }
    }

    /// `(d_out, k_in)` of the base weight at a site kind.
    pub fn site_dims(&self, kind: SiteKind) -> (usize, usize) {
        match kind {
            SiteKind::QkvFused => (3 * self.d_model, self.d_model),
            SiteKind::OutputProjection => (self.d_model, self.d_model),
        }
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        (0..self.n_layers)
            .flat_map(|layer| self.sites.iter().map(move |&kind| SiteId::new(layer, kind)))
            .collect()
    }
}

/// How a library's experts were derived.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Raw,
    Residual {
        general: String,
        mode: SubtractMode,
    },
    MeanNormalized,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Raw => f.write_str("raw"),
            Provenance::Residual { general, mode } => write!(f, "residual({general}, {mode})"),
            Provenance::MeanNormalized => f.write_str("mean_normalized"),
        }
    }
}

/// One named adapter: an increment at every site of the signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAdapter<T = f32> {
    pub name: String,
    pub deltas: BTreeMap<SiteId, LowRankDelta<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> ExpertAdapter<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            deltas: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// All-zero adapter of the given rank at every site.
    pub fn zeros(name: impl Into<String>, signature: &ModelSignature, rank: usize) -> Self {
        let mut out = Self::new(name);
        for site in signature.site_ids() {
            let (d, k) = signature.site_dims(site.kind);
            out.deltas.insert(site, LowRankDelta::zeros(d, k, rank));
        }
        out
    }

    pub fn delta(&self, site: SiteId) -> Option<&LowRankDelta<T>> {
        self.deltas.get(&site)
    }

    pub fn cast<U: Real>(&self) -> ExpertAdapter<U> {
        ExpertAdapter {
            name: self.name.clone(),
            deltas: self.deltas.iter().map(|(&s, d)| (s, d.cast())).collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Applies `f` to every site's delta, keeping name and metadata.
    pub fn try_map(&self, mut f: impl FnMut(SiteId, &LowRankDelta<T>) -> Result<LowRankDelta<T>>) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        for (&site, d) in &self.deltas {
            deltas.insert(site, f(site, d)?);
        }
        Ok(Self {
            name: self.name.clone(),
            deltas,
            metadata: self.metadata.clone(),
        })
    }

    fn violations(&self, signature: &ModelSignature, out: &mut Vec<Violation>) {
        let expected: BTreeSet<SiteId> = signature.site_ids().into_iter().collect();
        for &site in &expected {
            match self.deltas.get(&site) {
                None => out.push(Violation::MissingSite {
                    adapter: self.name.clone(),
                    site,
                }),
                Some(d) => {
                    let want = signature.site_dims(site.kind);
                    if d.dims() != want {
                        out.push(Violation::DimMismatch {
                            adapter: self.name.clone(),
                            site,
                            expected: want,
                            actual: d.dims(),
                        });
                    }
                    if !d.a().is_finite() || !d.b().is_finite() {
                        out.push(Violation::NonFinite {
                            adapter: self.name.clone(),
                            site,
                        });
                    }
                }
            }
        }
        for site in self.deltas.keys().filter(|s| !expected.contains(s)) {
            out.push(Violation::UnexpectedSite {
                adapter: self.name.clone(),
                site: *site,
            });
        }
    }
}

/// Ordered task experts plus named general adapters over one model signature.
///
/// The position of an expert in `experts` is its routing index.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLibrary<T = f32> {
    pub signature: ModelSignature,
    pub experts: Vec<ExpertAdapter<T>>,
    pub generals: BTreeMap<String, ExpertAdapter<T>>,
    pub provenance: Provenance,
}

impl<T: Real> AdapterLibrary<T> {
    pub fn new(signature: ModelSignature) -> Self {
        Self {
            signature,
            experts: Vec::new(),
            generals: BTreeMap::new(),
            provenance: Provenance::Raw,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_names(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn general(&self, name: &str) -> Result<&ExpertAdapter<T>> {
        self.generals.get(name).ok_or_else(|| Error::UnknownGeneral {
            name: name.to_string(),
            available: self.generals.keys().cloned().collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> AdapterLibrary<U> {
        AdapterLibrary {
            signature: self.signature.clone(),
            experts: self.experts.iter().map(ExpertAdapter::cast).collect(),
            generals: self.generals.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Checks every structural invariant without mutating anything.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.signature.d_model == 0 || self.signature.n_layers == 0 || self.signature.sites.is_empty() {
            violations.push(Violation::BadSignature(format!("{:?}", self.signature)));
        }
        if self.experts.is_empty() {
            violations.push(Violation::NoExperts);
        }
        let mut seen = BTreeSet::new();
        for (index, e) in self.experts.iter().enumerate() {
            if e.name.is_empty() {
                violations.push(Violation::EmptyName { index });
            } else if !seen.insert(e.name.as_str()) {
                violations.push(Violation::DuplicateName { name: e.name.clone() });
            }
            e.violations(&self.signature, &mut violations);
        }
        for (key, g) in &self.generals {
            if key.is_empty() || *key != g.name {
                violations.push(Violation::GeneralKey {
                    key: key.clone(),
                    name: g.name.clone(),
                });
            }
            g.violations(&self.signature, &mut violations);
        }
        ValidationReport { violations }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BadSignature(String),
    NoExperts,
    EmptyName { index: usize },
    DuplicateName { name: String },
    GeneralKey { key: String, name: String },
    MissingSite { adapter: String, site: SiteId },
    UnexpectedSite { adapter: String, site: SiteId },
    DimMismatch {
        adapter: String,
        site: SiteId,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    NonFinite { adapter: String, site: SiteId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadSignature(s) => write!(f, "invalid model signature {s}"),
            Violation::NoExperts => f.write_str("library has no experts"),
            Violation::EmptyName { index } => write!(f, "expert {index} has an empty name"),
            Violation::DuplicateName { name } => write!(f, "duplicate expert name `{name}`"),
            Violation::GeneralKey { key, name } => {
                write!(f, "general stored under `{key}` is named `{name}`")
            }
            Violation::MissingSite { adapter, site } => write!(f, "`{adapter}` is missing site {site}"),
            Violation::UnexpectedSite { adapter, site } => {
                write!(f, "`{adapter}` has site {site} outside the signature")
            }
            Violation::DimMismatch {
                adapter,
                site,
                expected,
                actual,
            } => write!(
                f,
                "`{adapter}` at {site}: expected dims {}x{}, found {}x{}",
                expected.0, expected.1, actual.0, actual.1
            ),
            Violation::NonFinite { adapter, site } => {
                write!(f, "`{adapter}` at {site} has non-finite entries")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Delta-space mean of adapters: at each site, the concatenation of all
/// inputs scaled by `1/m`.
pub fn average_adapters<T: Real>(name: &str, adapters: &[&ExpertAdapter<T>]) -> Result<ExpertAdapter<T>> {
    let first = adapters.first().ok_or(Error::Empty("average_adapters"))?;
    let sites: Vec<SiteId> = first.deltas.keys().copied().collect();
    for other in &adapters[1..] {
        let other_sites: Vec<SiteId> = other.deltas.keys().copied().collect();
        if other_sites != sites {
            return Err(Error::Signature(format!(
                "`{}` and `{}` cover different sites",
                first.name, other.name
            )));
        }
        for site in &sites {
            if other.deltas[site].dims() != first.deltas[site].dims() {
                return Err(Error::Signature(format!(
                    "`{}` and `{}` disagree on dims at {site}",
                    first.name, other.name
                )));
            }
        }
    }
    let w = 1.0 / adapters.len() as f64;
    let mut out = ExpertAdapter::new(name);
    for site in sites {
        let mut acc = adapters[0].deltas[&site].scale(w);
        for other in &adapters[1..] {
            acc = acc.add(&other.deltas[&site].scale(w))?;
        }
        out.deltas.insert(site, acc);
    }
    out.metadata.insert(
        "averaged_from".into(),
        adapters.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(","),
    );
    Ok(out)
}
