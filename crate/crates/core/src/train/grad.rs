use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{ExpertAdapter, SiteId, SiteKind};
use crate::linalg::DenseMatrix;
use crate::model::{forward_cached, gelu_grad, lm_loss_grad, mv, Adapters, TokenId, ToyModel};
use crate::real::Real;

/// A training sequence. `loss_on[t]` marks token `t` as a prediction target;
/// `loss_on[0]` is ignored since nothing precedes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub loss_on: Vec<bool>,
}

impl Example {
    /// Every token after the first is a target.
    pub fn full(tokens: Vec<TokenId>) -> Self {
        let loss_on = (0..tokens.len()).map(|t| t > 0).collect();
        Self { tokens, loss_on }
    }

    pub fn n_targets(&self) -> usize {
        self.loss_on.iter().skip(1).filter(|&&m| m).count()
    }

    fn check(&self) -> Result<()> {
        if self.tokens.len() != self.loss_on.len() {
            return Err(Error::dim("example mask", self.tokens.len(), self.loss_on.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGrad {
    pub a: DenseMatrix<f64>,
    pub b: DenseMatrix<f64>,
}

/// Gradients of the mean batch loss with respect to every adapter factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub sites: BTreeMap<SiteId, SiteGrad>,
}

impl AdapterGrads {
    fn zeros_like(adapter: &ExpertAdapter<f64>) -> Self {
        let sites = adapter
            .deltas
            .iter()
            .map(|(&site, d)| {
                let (a, b) = (d.a(), d.b());
                (
                    site,
                    SiteGrad {
                        a: DenseMatrix::zeros(a.rows(), a.cols()),
                        b: DenseMatrix::zeros(b.rows(), b.cols()),
                    },
                )
            })
            .collect();
        Self { sites }
    }

    fn accumulate(&mut self, other: &Self, c: f64) {
        for (site, g) in self.sites.iter_mut() {
            let o = &other.sites[site];
            for (x, y) in g.a.as_mut_slice().iter_mut().zip(o.a.as_slice()) {
                *x += c * y;
            }
            for (x, y) in g.b.as_mut_slice().iter_mut().zip(o.b.as_slice()) {
                *x += c * y;
            }
        }
    }

    /// All entries, site by site, `A` before `B`.
    pub fn flatten(&self) -> Vec<f64> {
        self.sites
            .values()
            .flat_map(|g| g.a.as_slice().iter().chain(g.b.as_slice()).copied())
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.sites
            .values()
            .flat_map(|g| g.a.as_slice().iter().chain(g.b.as_slice()))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_signature(model: &ToyModel<f64>, adapter: &ExpertAdapter<f64>) -> Result<()> {
    let sig = model.signature();
    for site in sig.site_ids() {
        match adapter.delta(site) {
            Some(d) if d.dims() == sig.site_dims(site.kind) => {}
            _ => {
                return Err(Error::Signature(format!(
                    "adapter `{}` does not fit the model at {site}",
                    adapter.name
                )))
            }
        }
    }
    if adapter.deltas.len() != sig.site_ids().len() {
        return Err(Error::Signature(format!("adapter `{}` has sites the model lacks", adapter.name)));
    }
    Ok(())
}

fn rms_back(x: &[f64], inv: f64, g: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let s: f64 = x.iter().zip(g).zip(dy).map(|((x, g), dy)| g * dy * x).sum();
    let k = inv * inv * inv * s / n;
    x.iter()
        .zip(g)
        .zip(dy)
        .map(|((x, g), dy)| inv * g * dy - x * k)
        .collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Backward through `y = W x + s·B(A x)`: accumulates factor gradients and
/// returns `dx`.
fn site_back(w: &DenseMatrix<f64>, adapter: &ExpertAdapter<f64>, site: SiteId, x: &[f64], dy: &[f64], grads: &mut AdapterGrads) -> Vec<f64> {
    let delta = adapter.delta(site).expect("signature checked");
    let s = delta.scaling();
    let (a, b) = (delta.a(), delta.b());
    let ax = mv(a, x);
    let btdy = b.matvec_t(dy, crate::linalg::Accumulate::Native).expect("shapes checked");
    let g = grads.sites.get_mut(&site).expect("same sites");
    for (i, &dyi) in dy.iter().enumerate() {
        if dyi != 0.0 {
            for (gb, &axj) in g.b.row_mut(i).iter_mut().zip(&ax) {
                *gb += s * dyi * axj;
            }
        }
    }
    for (j, &bj) in btdy.iter().enumerate() {
        for (ga, &xk) in g.a.row_mut(j).iter_mut().zip(x) {
            *ga += s * bj * xk;
        }
    }
    let mut dx = w.matvec_t(dy, crate::linalg::Accumulate::Native).expect("shapes checked");
    let adx = a.matvec_t(&btdy, crate::linalg::Accumulate::Native).expect("shapes checked");
    dx.iter_mut().zip(adx).for_each(|(d, v)| *d += s * v);
    dx
}

/// Summed loss, target count and summed gradients for one sequence.
fn example_grad(model: &ToyModel<f64>, adapter: &ExpertAdapter<f64>, ex: &Example) -> Result<(f64, usize, AdapterGrads)> {
    ex.check()?;
    let mut grads = AdapterGrads::zeros_like(adapter);
    let n_in = ex.tokens.len().saturating_sub(1);
    if n_in == 0 || ex.n_targets() == 0 {
        return Ok((0.0, 0, grads));
    }
    let input = &ex.tokens[..n_in];
    let (logits, cache) = forward_cached(model, input, &Adapters::Fixed(adapter), true)?;
    let cache = cache.expect("cache requested");
    let (loss, count, dlogits) = lm_loss_grad(&logits, &ex.tokens[1..], &ex.loss_on[1..])?;

    let cfg = &model.cfg;
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dh_res: Vec<Vec<f64>> = (0..n_in)
        .map(|t| {
            let dn = model
                .embed
                .matvec_t(dlogits.row(t), crate::linalg::Accumulate::Native)
                .expect("shapes checked");
            rms_back(&cache.h_final[t], cache.inv_final[t], &model.final_norm, &dn)
        })
        .collect();

    for (l, (w, c)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        // MLP block
        for t in 0..n_in {
            let da = w.down.matvec_t(&dh_res[t], crate::linalg::Accumulate::Native).expect("shapes checked");
            let dz: Vec<f64> = da.iter().zip(&c.z[t]).map(|(a, &z)| a * gelu_grad(z)).collect();
            let dxm = w.up.matvec_t(&dz, crate::linalg::Accumulate::Native).expect("shapes checked");
            let dhm = rms_back(&c.h_mid[t], c.inv_mlp[t], &w.mlp_norm, &dxm);
            add_into(&mut dh_res[t], &dhm);
        }

        // attention output projection
        let out_site = SiteId::new(l, SiteKind::OutputProjection);
        let dctx: Vec<Vec<f64>> = (0..n_in)
            .map(|t| site_back(&w.out, adapter, out_site, &c.ctx[t], &dh_res[t], &mut grads))
            .collect();

        // attention core
        let mut dqkv = vec![vec![0.0; 3 * d]; n_in];
        for t in 0..n_in {
            for head in 0..n_heads {
                let off = head * dh;
                let p = &c.probs[t][head];
                let dc = &dctx[t][off..off + dh];
                let dp: Vec<f64> = (0..=t)
                    .map(|u| dc.iter().zip(&c.qkv[u][2 * d + off..2 * d + off + dh]).map(|(a, b)| a * b).sum())
                    .collect();
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - mean) * scale;
                    for i in 0..dh {
                        dqkv[u][2 * d + off + i] += p[u] * dc[i];
                        dqkv[t][off + i] += ds * c.qkv[u][d + off + i];
                        dqkv[u][d + off + i] += ds * c.qkv[t][off + i];
                    }
                }
            }
        }

        // fused qkv projection and attention norm
        let qkv_site = SiteId::new(l, SiteKind::QkvFused);
        for t in 0..n_in {
            let dxa = site_back(&w.qkv, adapter, qkv_site, &c.xa[t], &dqkv[t], &mut grads);
            if l > 0 {
                let dhin = rms_back(&c.h_in[t], c.inv_attn[t], &w.attn_norm, &dxa);
                add_into(&mut dh_res[t], &dhin);
            }
        }
    }
    Ok((loss, count, grads))
}

pub(crate) fn grad_f64(model: &ToyModel<f64>, adapter: &ExpertAdapter<f64>, batch: &[Example]) -> Result<(f64, AdapterGrads)> {
    check_signature(model, adapter)?;
    let parts = batch
        .par_iter()
        .map(|ex| example_grad(model, adapter, ex))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::Empty("grad_lora: batch has no loss targets"));
    }
    let mut total = AdapterGrads::zeros_like(adapter);
    let mut loss = 0.0;
    let inv = 1.0 / count as f64;
    for (l, _, g) in &parts {
        loss += l;
        total.accumulate(g, inv);
    }
    Ok((loss * inv, total))
}

/// Mean loss over every target token in `batch` and its exact gradient with
/// respect to the adapter factors. Computation runs in 64-bit.
pub fn grad_lora<T: Real>(model: &ToyModel<T>, adapter: &ExpertAdapter<T>, batch: &[Example]) -> Result<(f64, AdapterGrads)> {
    grad_f64(&model.cast(), &adapter.cast(), batch)
}
