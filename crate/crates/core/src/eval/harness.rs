use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::fnv1a64;
use crate::error::{Error, Result};
use crate::genknowsub::{mean_normalize, subtract_general, SubtractMode};
use crate::library::{AdapterLibrary, ExpertAdapter};
use crate::model::{init_model, Adapters, ToyConfig, ToyModel};
use crate::real::Real;
use crate::router::{build_prototypes, PrototypeBank, RouterConfig};
use crate::train::{train_expert, Example, StepRecord, TrainConfig};

use super::metrics::{accuracy, mean_rouge_l};
use super::suite::{gen_suite, SuiteConfig, SyntheticSuite};

pub const REPORT_FORMAT: &str = "evalreport/1";
pub const GENERAL_NAME: &str = "gen";
pub const SHARED_NAME: &str = "shared";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Shared,
    MeanNorm,
    Arrow,
    #[serde(rename = "genknowsub")]
    GenKnowSub,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Base, Method::Shared, Method::MeanNorm, Method::Arrow, Method::GenKnowSub];

    pub fn key(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Shared => "shared",
            Method::MeanNorm => "mean_norm",
            Method::Arrow => "arrow",
            Method::GenKnowSub => "genknowsub",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Shared => "Shared",
            Method::MeanNorm => "Mean-Norm",
            Method::Arrow => "Arrow",
            Method::GenKnowSub => "GenKnowSub",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.key() == norm || m.label().to_ascii_lowercase().replace('-', "_") == norm)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method `{s}` (expected one of base, shared, mean_norm, arrow, genknowsub)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub model: ToyConfig,
    pub suite: SuiteConfig,
    pub expert_train: TrainConfig,
    pub general_train: TrainConfig,
    pub router: RouterConfig,
    pub methods: Vec<Method>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let expert_train = TrainConfig {
            learning_rate: 5e-3,
            epochs: 2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let general_train = TrainConfig {
            batch_size: 16,
            epochs: 16,
            ..expert_train.clone()
        };
        Self {
            model: ToyConfig::default(),
            suite: SuiteConfig::default(),
            expert_train,
            general_train,
            router: RouterConfig::default(),
            methods: Method::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    /// Same configuration with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.model.seed = seed;
        out.suite.seed = seed;
        out.expert_train.seed = seed;
        out.general_train.seed = seed;
        out
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut out = self.clone();
        out.suite.gamma = gamma;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.suite.validate(self.model.vocab_size, self.model.max_seq)?;
        self.expert_train.validate()?;
        self.general_train.validate()?;
        if self.router.k_top == 0 {
            return Err(Error::InvalidArgument("router k_top must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Everything produced by the training stage.
#[derive(Debug, Clone)]
pub struct Artifacts<T = f32> {
    pub model: ToyModel<T>,
    pub suite: SyntheticSuite,
    /// Task experts plus the general adapter and the shared adapter under
    /// `generals`.
    pub library: AdapterLibrary<T>,
    pub logs: Vec<(String, Vec<StepRecord>)>,
}

impl<T: Real> Artifacts<T> {
    pub fn shared(&self) -> Result<&ExpertAdapter<T>> {
        self.library.general(SHARED_NAME)
    }

    /// Library of the task experts with only the general adapter attached.
    pub fn raw_library(&self) -> Result<AdapterLibrary<T>> {
        let mut lib = self.library.clone();
        lib.generals.retain(|k, _| k == GENERAL_NAME);
        if lib.generals.is_empty() {
            return Err(self.library.general(GENERAL_NAME).unwrap_err());
        }
        Ok(lib)
    }
}

/// Initializes the model, generates the suite and trains every adapter.
pub fn train_stage<T: Real>(cfg: &EvalConfig) -> Result<Artifacts<T>> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let model = init_model::<T>(&cfg.model).map_err(|e| e.in_stage("model"))?;
    let suite = gen_suite(&cfg.suite, cfg.model.vocab_size, cfg.model.max_seq).map_err(|e| e.in_stage("suite"))?;

    let pooled = suite.pooled_train_set();
    let mut jobs: Vec<(String, &[Example], &TrainConfig)> = suite
        .tasks
        .iter()
        .zip(&suite.train_sets)
        .map(|(t, set)| (t.name.clone(), set.as_slice(), &cfg.expert_train))
        .collect();
    jobs.push((GENERAL_NAME.to_string(), &suite.general_corpus, &cfg.general_train));
    jobs.push((SHARED_NAME.to_string(), &pooled, &cfg.expert_train));

    let trained = jobs
        .par_iter()
        .map(|(name, data, tc)| train_expert(name, &model, data, tc))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("train"))?;

    let mut library = AdapterLibrary::new(model.signature());
    let mut logs = Vec::new();
    for (k, t) in trained.into_iter().enumerate() {
        logs.push((t.adapter.name.clone(), t.log));
        let mut adapter = t.adapter;
        if k < cfg.suite.n_tasks {
            adapter.metadata.insert("role".into(), "expert".into());
            library.experts.push(adapter);
        } else {
            let role = if adapter.name == GENERAL_NAME { "general" } else { "shared" };
            adapter.metadata.insert("role".into(), role.into());
            library.generals.insert(adapter.name.clone(), adapter);
        }
    }
    library.validate().into_result().map_err(|e| e.in_stage("train"))?;
    Ok(Artifacts {
        model,
        suite,
        library,
        logs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub method: Method,
    pub task: String,
    pub accuracy: f64,
    pub rouge_l: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub accuracy: f64,
    pub rouge_l: f64,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config_fingerprint: String,
    pub eval_items_fnv1a64: String,
    pub scoring: String,
    pub rouge_convention: String,
    pub summary: Vec<MethodSummary>,
    pub records: Vec<TaskRecord>,
}

impl EvalReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.summary.iter_mut().for_each(|s| s.wall_clock_ms = 0);
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<12} {:>10} {:>10} {:>10}\n", "method", "accuracy", "rouge_l", "time_ms");
        for s in &self.summary {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>10}\n",
                s.method.label(),
                s.accuracy,
                s.rouge_l,
                s.wall_clock_ms
            ));
        }
        out
    }

    /// One JSON record per line: a header, then one line per method × task.
    pub fn to_jsonl(&self) -> String {
        let header = serde_json::json!({
            "format": self.format,
            "config_fingerprint": self.config_fingerprint,
            "eval_items_fnv1a64": self.eval_items_fnv1a64,
            "scoring": self.scoring,
            "rouge_convention": self.rouge_convention,
            "summary": self.summary,
        });
        let mut out = header.to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Adapter configurations built from trained artifacts.
pub struct MethodSet<T: Real> {
    pub raw: AdapterLibrary<T>,
    pub raw_bank: PrototypeBank<T>,
    pub mean_norm: AdapterLibrary<T>,
    pub mean_norm_bank: PrototypeBank<T>,
    pub residual: AdapterLibrary<T>,
    pub residual_bank: PrototypeBank<T>,
    pub shared: ExpertAdapter<T>,
    pub router: RouterConfig,
}

impl<T: Real> MethodSet<T> {
    pub fn build(art: &Artifacts<T>, router: RouterConfig) -> Result<Self> {
        let raw = art.raw_library()?;
        let mean_norm = mean_normalize(&raw)?;
        let residual = subtract_general(&raw, GENERAL_NAME, SubtractMode::DeltaSpace)?;
        Ok(Self {
            raw_bank: build_prototypes(&raw)?,
            mean_norm_bank: build_prototypes(&mean_norm)?,
            residual_bank: build_prototypes(&residual)?,
            raw,
            mean_norm,
            residual,
            shared: art.shared()?.clone(),
            router,
        })
    }

    pub fn adapters(&self, method: Method) -> Adapters<'_, T> {
        let routed = |library, bank| Adapters::Routed {
            library,
            bank,
            router: self.router,
        };
        match method {
            Method::Base => Adapters::None,
            Method::Shared => Adapters::Fixed(&self.shared),
            Method::MeanNorm => routed(&self.mean_norm, &self.mean_norm_bank),
            Method::Arrow => routed(&self.raw, &self.raw_bank),
            Method::GenKnowSub => routed(&self.residual, &self.residual_bank),
        }
    }
}

/// Scores the chosen methods on every held-out task.
pub fn evaluate<T: Real>(art: &Artifacts<T>, cfg: &EvalConfig) -> Result<EvalReport> {
    let set = MethodSet::build(art, cfg.router).map_err(|e| e.in_stage("compose"))?;
    let per_method = cfg
        .methods
        .par_iter()
        .map(|&method| {
            let start = Instant::now();
            let adapters = set.adapters(method);
            let records = art
                .suite
                .heldout
                .iter()
                .map(|h| {
                    Ok(TaskRecord {
                        method,
                        task: h.task.name.clone(),
                        accuracy: accuracy(&art.model, &adapters, &h.mc)?,
                        rouge_l: mean_rouge_l(&art.model, &adapters, &h.generation)?,
                        n_items: h.mc.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let n = records.len() as f64;
            let summary = MethodSummary {
                method,
                accuracy: records.iter().map(|r| r.accuracy).sum::<f64>() / n,
                rouge_l: records.iter().map(|r| r.rouge_l).sum::<f64>() / n,
                wall_clock_ms: start.elapsed().as_millis() as u64,
            };
            Ok((summary, records))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e: Error| e.in_stage("evaluate"))?;
    let mut summary = Vec::new();
    let mut records = Vec::new();
    for (s, r) in per_method {
        summary.push(s);
        records.extend(r);
    }
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        config_fingerprint: cfg.fingerprint(),
        eval_items_fnv1a64: art.suite.eval_fingerprint(),
        scoring: "multiple choice by length-normalized log-likelihood, ties to the lowest index".into(),
        rouge_convention: "token-level LCS F1 (beta = 1) over greedily decoded answer slots".into(),
        summary,
        records,
    })
}

/// Train, compose and evaluate in one go.
pub fn run_comparison<T: Real>(cfg: &EvalConfig) -> Result<EvalReport> {
    let art = train_stage::<T>(cfg)?;
    evaluate(&art, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub rouge_l: f64,
}

/// Runs the comparison for every `(gamma, seed)` pair.
pub fn contamination_sweep<T: Real>(cfg: &EvalConfig, gammas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &gamma in gammas {
        for &seed in seeds {
            let report = run_comparison::<T>(&cfg.with_gamma(gamma).with_seed(seed))?;
            rows.extend(report.summary.iter().map(|s| SweepRow {
                gamma,
                method: s.method,
                seed,
                accuracy: s.accuracy,
                rouge_l: s.rouge_l,
            }));
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,method,seed,accuracy,rouge_l\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.gamma, r.method, r.seed, r.accuracy, r.rouge_l));
    }
    out
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
