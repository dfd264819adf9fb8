//! LoRA training against a frozen toy model.
//!
//! Only adapter factors receive gradients. Training always runs in 64-bit
//! and the finished adapter is cast to the caller's precision.

mod grad;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::fnv1a64;
use crate::error::{Error, Result};
use crate::library::ExpertAdapter;
use crate::linalg::DenseMatrix;
use crate::lowrank::LowRankDelta;
use crate::model::ToyModel;
use crate::real::Real;

pub use grad::{grad_lora, AdapterGrads, Example, SiteGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdamLite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Std of the `A` init is `init_gain / √k_in`.
    pub init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 1,
            warmup_fraction: 0.06,
            clip_norm: 1.0,
            batch_size: 1,
            rank: 4,
            seed: 0,
            optimizer: OptimizerKind::AdamLite,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            init_gain: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rank == 0 {
            return bad("epochs, batch_size and rank must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum and betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.init_gain >= 0.0) {
            return bad("eps must be positive, weight_decay and init_gain nonnegative");
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON form, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size)
    }
}

/// Linear warmup from 0 to the peak rate over `warmup_fraction · total`
/// steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!("lr_at: step {step} outside 0..={total}")));
    }
    let peak = cfg.learning_rate;
    let (s, n) = (step as f64, total as f64);
    let warm = cfg.warmup_fraction * n;
    if s < warm {
        return Ok(peak * s / warm);
    }
    let progress = (s - warm) / (n - warm);
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<T = f32> {
    pub adapter: ExpertAdapter<T>,
    pub log: Vec<StepRecord>,
}

pub fn write_log_jsonl(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Fresh adapter with `A` drawn from the seed and `B = 0`.
pub fn init_adapter<T: Real>(name: &str, model: &ToyModel<T>, cfg: &TrainConfig) -> ExpertAdapter<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let sig = model.signature();
    let mut out = ExpertAdapter::new(name);
    for site in sig.site_ids() {
        let (d_out, k_in) = sig.site_dims(site.kind);
        let std = cfg.init_gain / (k_in as f64).sqrt();
        let a = DenseMatrix::from_fn(cfg.rank, k_in, |_, _| T::of(normal.sample(&mut rng) * std));
        let b = DenseMatrix::zeros(d_out, cfg.rank);
        out.deltas
            .insert(site, LowRankDelta::from_factors(a, b).expect("shapes agree"));
    }
    out
}

fn params_flat(adapter: &ExpertAdapter<f64>) -> Vec<f64> {
    adapter
        .deltas
        .values()
        .flat_map(|d| d.a().as_slice().iter().chain(d.b().as_slice()).copied())
        .collect()
}

fn set_params(adapter: &mut ExpertAdapter<f64>, flat: &[f64]) {
    let mut off = 0;
    for d in adapter.deltas.values_mut() {
        let (a, b) = d.factors_mut();
        for m in [a, b] {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, &g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = cfg.momentum * *m + g + cfg.weight_decay * *p;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::AdamLite => {
                let c1 = 1.0 - cfg.beta1.powi(self.t);
                let c2 = 1.0 - cfg.beta2.powi(self.t);
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    *p -= lr * (update + cfg.weight_decay * *p);
                }
            }
        }
    }
}

/// Trains one adapter on `dataset`. Deterministic in `(cfg, dataset)`; the
/// base model is only read.
pub fn train_expert<T: Real>(name: &str, model: &ToyModel<T>, dataset: &[Example], cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("train_expert: dataset"));
    }
    let base = model.cast::<f64>();
    let mut adapter = init_adapter(name, &base, cfg);
    let mut params = params_flat(&adapter);
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let total = cfg.total_steps(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grads) = grad::grad_f64(&base, &adapter, &batch)?;
            let mut g = grads.flatten();
            let norm = grads.global_norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let mut clipped = norm;
            if norm > cfg.clip_norm {
                let c = cfg.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= c);
                clipped = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            let lr = lr_at(step, total, cfg)?;
            opt.step(&mut params, &g, lr, cfg);
            set_params(&mut adapter, &params);
            log.push(StepRecord {
                step,
                lr,
                loss,
                grad_norm: norm,
                clipped_norm: clipped,
            });
            step += 1;
        }
    }
    let (final_loss, _) = grad::grad_f64(&base, &adapter, dataset)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step, loss: final_loss });
    }
    adapter.metadata.insert("train_config_fnv1a64".into(), cfg.fingerprint());
    adapter.metadata.insert("final_loss".into(), format!("{final_loss:.6}"));
    adapter.metadata.insert("steps".into(), total.to_string());
    adapter.metadata.insert("examples".into(), dataset.len().to_string());
    Ok(Trained {
        adapter: adapter.cast(),
        log,
    })
}
