//! A small decoder-only transformer with frozen weights and adapter hooks
//! at the fused QKV projection and the attention output projection.
//!
//! Blocks are pre-norm with RMS normalization, no biases, a GELU MLP and an
//! output head tied to the token embedding.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::ModelSignature;
use crate::linalg::DenseMatrix;
use crate::real::Real;

pub use checkpoint::{load_model, save_model, MODEL_FORMAT};
pub use forward::{
    forward, lm_loss, lm_loss_grad, site_kinds, Adapters, RoutingTrace, RoutingTracer, SiteAdapter,
};
pub(crate) use forward::{forward_cached, gelu_grad, mv};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub mlp_mult: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            max_seq: 32,
            mlp_mult: 4,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
            ("mlp_mult", self.mlp_mult),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model config: {name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "model config: d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new(self.d_model, self.n_layers)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_mult * self.d_model
    }

    /// Number of frozen parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 3 * d * d + d * d + 2 * self.mlp_dim() * d;
        self.vocab_size * d + self.n_layers * per_layer + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Vec<T>,
    /// `3·d × d`; rows are query, then key, then value.
    pub qkv: DenseMatrix<T>,
    /// `d × d`.
    pub out: DenseMatrix<T>,
    pub mlp_norm: Vec<T>,
    /// `mlp_dim × d`.
    pub up: DenseMatrix<T>,
    /// `d × mlp_dim`.
    pub down: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T = f32> {
    pub cfg: ToyConfig,
    /// `vocab × d`, also the output head.
    pub embed: DenseMatrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
}

/// Std of embedding entries. Unit scale keeps the tied head able to reach
/// confident logits from an RMS-normalized final state.
pub const EMBED_STD: f64 = 1.0;
/// Projections use std `1/√fan_in`; residual-writing projections are
/// further divided by `√(2·n_layers)`.
pub const RESIDUAL_DAMPING: f64 = 2.0;

/// Draws a model deterministically from `cfg.seed`.
pub fn init_model<T: Real>(cfg: &ToyConfig) -> Result<ToyModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut draw = |rows: usize, cols: usize, std: f64| {
        DenseMatrix::from_fn(rows, cols, |_, _| T::of(normal.sample(&mut rng) * std))
    };
    let d = cfg.d_model;
    let m = cfg.mlp_dim();
    let damp = (RESIDUAL_DAMPING * cfg.n_layers as f64).sqrt();
    let embed = draw(cfg.vocab_size, d, EMBED_STD);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![T::one(); d],
            qkv: draw(3 * d, d, 1.0 / (d as f64).sqrt()),
            out: draw(d, d, 1.0 / (d as f64).sqrt() / damp),
            mlp_norm: vec![T::one(); d],
            up: draw(m, d, 1.0 / (d as f64).sqrt()),
            down: draw(d, m, 1.0 / (m as f64).sqrt() / damp),
        })
        .collect();
    Ok(ToyModel {
        cfg: cfg.clone(),
        embed,
        layers,
        final_norm: vec![T::one(); d],
    })
}

impl<T: Real> ToyModel<T> {
    pub fn signature(&self) -> ModelSignature {
        self.cfg.signature()
    }

    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        let v = |x: &[T]| x.iter().map(|&a| U::of(a.as_f64())).collect::<Vec<U>>();
        ToyModel {
            cfg: self.cfg.clone(),
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: v(&l.attn_norm),
                    qkv: l.qkv.cast(),
                    out: l.out.cast(),
                    mlp_norm: v(&l.mlp_norm),
                    up: l.up.cast(),
                    down: l.down.cast(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
        }
    }

    /// Base weight at a site.
    pub fn site_weight(&self, site: crate::library::SiteId) -> &DenseMatrix<T> {
        let layer = &self.layers[site.layer];
        match site.kind {
            crate::library::SiteKind::QkvFused => &layer.qkv,
            crate::library::SiteKind::OutputProjection => &layer.out,
        }
    }

    pub fn site_weight_mut(&mut self, site: crate::library::SiteId) -> &mut DenseMatrix<T> {
        let layer = &mut self.layers[site.layer];
        match site.kind {
            crate::library::SiteKind::QkvFused => &mut layer.qkv,
            crate::library::SiteKind::OutputProjection => &mut layer.out,
        }
    }

    /// Every weight, in a fixed order, as `(name, rows, cols, values)`.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[T])> {
        let d = self.cfg.d_model;
        let mut out = vec![("embed".to_string(), self.embed.rows(), self.embed.cols(), self.embed.as_slice())];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), 1, d, &w.attn_norm[..]));
            out.push((format!("layers.{l}.qkv"), w.qkv.rows(), w.qkv.cols(), w.qkv.as_slice()));
            out.push((format!("layers.{l}.out"), w.out.rows(), w.out.cols(), w.out.as_slice()));
            out.push((format!("layers.{l}.mlp_norm"), 1, d, &w.mlp_norm[..]));
            out.push((format!("layers.{l}.up"), w.up.rows(), w.up.cols(), w.up.as_slice()));
            out.push((format!("layers.{l}.down"), w.down.rows(), w.down.cols(), w.down.as_slice()));
        }
        out.push(("final_norm".to_string(), 1, d, &self.final_norm[..]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }
}
