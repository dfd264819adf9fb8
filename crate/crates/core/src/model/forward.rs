use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::library::{AdapterLibrary, ExpertAdapter, ModelSignature, SiteId, SiteKind};
use crate::linalg::{Accumulate, DenseMatrix};
use crate::real::Real;
use crate::router::{apply_decision, route, PrototypeBank, RouterConfig, RoutingDecision};

use super::{TokenId, ToyModel};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Supplies the adapter term `ΔW·x` for one token at one site.
pub trait SiteAdapter<T: Real> {
    /// Shape check against the model before a pass.
    fn check(&self, _signature: &ModelSignature) -> Result<()> {
        Ok(())
    }

    /// `None` leaves the site at its base output.
    fn increment(&self, site: SiteId, pos: usize, x: &[T]) -> Result<Option<Vec<T>>>;
}

/// The three ways a forward pass can use adapters.
pub enum Adapters<'a, T: Real> {
    None,
    Fixed(&'a ExpertAdapter<T>),
    Routed {
        library: &'a AdapterLibrary<T>,
        bank: &'a PrototypeBank<T>,
        router: RouterConfig,
    },
}

fn check_adapter<T: Real>(adapter: &ExpertAdapter<T>, signature: &ModelSignature) -> Result<()> {
    for site in signature.site_ids() {
        let want = signature.site_dims(site.kind);
        match adapter.delta(site) {
            Some(d) if d.dims() == want => {}
            Some(d) => {
                return Err(Error::Signature(format!(
                    "adapter `{}` at {site} is {:?}, model needs {:?}",
                    adapter.name,
                    d.dims(),
                    want
                )))
            }
            None => {
                return Err(Error::Signature(format!(
                    "adapter `{}` lacks site {site}",
                    adapter.name
                )))
            }
        }
    }
    Ok(())
}

impl<T: Real> SiteAdapter<T> for Adapters<'_, T> {
    fn check(&self, signature: &ModelSignature) -> Result<()> {
        match self {
            Adapters::None => Ok(()),
            Adapters::Fixed(a) => check_adapter(a, signature),
            Adapters::Routed { library, bank, .. } => {
                if &library.signature != signature {
                    return Err(Error::Signature(format!(
                        "library signature {:?} does not match model {:?}",
                        library.signature, signature
                    )));
                }
                bank.check_matches(library)
            }
        }
    }

    fn increment(&self, site: SiteId, _pos: usize, x: &[T]) -> Result<Option<Vec<T>>> {
        match self {
            Adapters::None => Ok(None),
            Adapters::Fixed(a) => {
                let d = a
                    .delta(site)
                    .ok_or_else(|| Error::Signature(format!("adapter lacks site {site}")))?;
                Ok(Some(d.apply(x)?))
            }
            Adapters::Routed {
                library,
                bank,
                router,
            } => {
                let decision = route(bank, site, x, router)?;
                Ok(Some(apply_decision(library, site, &decision, x)?))
            }
        }
    }
}

/// One routing event recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub pos: usize,
    pub site: SiteId,
    pub decision: RoutingDecision,
}

/// Routed adapters that also record every decision.
pub struct RoutingTracer<'a, T: Real> {
    pub library: &'a AdapterLibrary<T>,
    pub bank: &'a PrototypeBank<T>,
    pub router: RouterConfig,
    trace: RefCell<Vec<RoutingTrace>>,
}

impl<'a, T: Real> RoutingTracer<'a, T> {
    pub fn new(library: &'a AdapterLibrary<T>, bank: &'a PrototypeBank<T>, router: RouterConfig) -> Self {
        Self {
            library,
            bank,
            router,
            trace: RefCell::new(Vec::new()),
        }
    }

    pub fn into_trace(self) -> Vec<RoutingTrace> {
        self.trace.into_inner()
    }
}

impl<T: Real> SiteAdapter<T> for RoutingTracer<'_, T> {
    fn check(&self, signature: &ModelSignature) -> Result<()> {
        Adapters::Routed {
            library: self.library,
            bank: self.bank,
            router: self.router,
        }
        .check(signature)
    }

    fn increment(&self, site: SiteId, pos: usize, x: &[T]) -> Result<Option<Vec<T>>> {
        let decision = route(self.bank, site, x, &self.router)?;
        let y = apply_decision(self.library, site, &decision, x)?;
        self.trace.borrow_mut().push(RoutingTrace { pos, site, decision });
        Ok(Some(y))
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache<T> {
    pub h_in: Vec<Vec<T>>,
    pub inv_attn: Vec<T>,
    pub xa: Vec<Vec<T>>,
    pub qkv: Vec<Vec<T>>,
    /// `[pos][head][src]`, `src ≤ pos`.
    pub probs: Vec<Vec<Vec<T>>>,
    pub ctx: Vec<Vec<T>>,
    pub h_mid: Vec<Vec<T>>,
    pub inv_mlp: Vec<T>,
    pub z: Vec<Vec<T>>,
}

pub(crate) struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub h_final: Vec<Vec<T>>,
    pub inv_final: Vec<T>,
}

pub(crate) fn rms_norm<T: Real>(x: &[T], g: &[T]) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |s, &v| s + v * v) / n;
    let inv = T::one() / (ms + T::of(RMS_EPS)).sqrt();
    (x.iter().zip(g).map(|(&v, &g)| g * v * inv).collect(), inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(z: T) -> T {
    let u = T::of(GELU_C) * (z + T::of(GELU_K) * z * z * z);
    T::of(0.5) * z * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(z: T) -> T {
    let u = T::of(GELU_C) * (z + T::of(GELU_K) * z * z * z);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * z * z);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * z * (T::one() - t * t) * du
}

#[inline]
pub(crate) fn mv<T: Real>(w: &DenseMatrix<T>, x: &[T]) -> Vec<T> {
    w.matvec(x, Accumulate::Native).expect("model shapes are consistent")
}

fn site_output<T: Real>(
    w: &DenseMatrix<T>,
    adapters: &dyn SiteAdapter<T>,
    site: SiteId,
    pos: usize,
    x: &[T],
) -> Result<Vec<T>> {
    let mut y = mv(w, x);
    if let Some(inc) = adapters.increment(site, pos, x)? {
        if inc.len() != y.len() {
            return Err(Error::dim("adapter increment", y.len(), inc.len()));
        }
        y.iter_mut().zip(inc).for_each(|(a, b)| *a = *a + b);
    }
    Ok(y)
}

fn check_tokens<T: Real>(model: &ToyModel<T>, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("forward"));
    }
    if tokens.len() > model.cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} exceeds max_seq {}",
            tokens.len(),
            model.cfg.max_seq
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= model.cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {t} out of range for vocabulary of {}",
            model.cfg.vocab_size
        )));
    }
    Ok(())
}

/// Logits (`seq × vocab`) under causal masking.
pub fn forward<T: Real>(model: &ToyModel<T>, tokens: &[TokenId], adapters: &dyn SiteAdapter<T>) -> Result<DenseMatrix<T>> {
    Ok(forward_cached(model, tokens, adapters, false)?.0)
}

pub(crate) fn forward_cached<T: Real>(
    model: &ToyModel<T>,
    tokens: &[TokenId],
    adapters: &dyn SiteAdapter<T>,
    keep: bool,
) -> Result<(DenseMatrix<T>, Option<ForwardCache<T>>)> {
    check_tokens(model, tokens)?;
    adapters.check(&model.signature())?;
    let cfg = &model.cfg;
    let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let len = tokens.len();
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut h: Vec<Vec<T>> = tokens
        .iter()
        .map(|&t| model.embed.row(t as usize).to_vec())
        .collect();
    let mut caches = Vec::new();

    for (l, w) in model.layers.iter().enumerate() {
        let qkv_site = SiteId::new(l, SiteKind::QkvFused);
        let out_site = SiteId::new(l, SiteKind::OutputProjection);

        let mut xa = Vec::with_capacity(len);
        let mut inv_attn = Vec::with_capacity(len);
        let mut qkv = Vec::with_capacity(len);
        for (pos, hp) in h.iter().enumerate() {
            let (x, inv) = rms_norm(hp, &w.attn_norm);
            qkv.push(site_output(&w.qkv, adapters, qkv_site, pos, &x)?);
            xa.push(x);
            inv_attn.push(inv);
        }

        let mut probs = Vec::with_capacity(len);
        let mut ctx = Vec::with_capacity(len);
        for t in 0..len {
            let mut c = vec![T::zero(); d];
            let mut p_heads = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let off = head * dh;
                let q = &qkv[t][off..off + dh];
                let mut s: Vec<T> = (0..=t)
                    .map(|u| {
                        let k = &qkv[u][d + off..d + off + dh];
                        q.iter().zip(k).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale
                    })
                    .collect();
                let max = s.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in s.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in s.iter_mut() {
                    *v = *v / total;
                }
                for (u, &p) in s.iter().enumerate() {
                    let v = &qkv[u][2 * d + off..2 * d + off + dh];
                    for (ci, &vi) in c[off..off + dh].iter_mut().zip(v) {
                        *ci = *ci + p * vi;
                    }
                }
                p_heads.push(s);
            }
            probs.push(p_heads);
            ctx.push(c);
        }

        let mut h_mid = Vec::with_capacity(len);
        for (pos, c) in ctx.iter().enumerate() {
            let o = site_output(&w.out, adapters, out_site, pos, c)?;
            h_mid.push(h[pos].iter().zip(&o).map(|(&a, &b)| a + b).collect::<Vec<T>>());
        }

        let mut inv_mlp = Vec::with_capacity(len);
        let mut zs = Vec::with_capacity(len);
        let mut h_out = Vec::with_capacity(len);
        for hm in &h_mid {
            let (x, inv) = rms_norm(hm, &w.mlp_norm);
            let z = mv(&w.up, &x);
            let a: Vec<T> = z.iter().map(|&v| gelu(v)).collect();
            let m = mv(&w.down, &a);
            h_out.push(hm.iter().zip(&m).map(|(&a, &b)| a + b).collect::<Vec<T>>());
            if keep {
                inv_mlp.push(inv);
                zs.push(z);
            }
        }

        let h_in = std::mem::replace(&mut h, h_out);
        if keep {
            caches.push(LayerCache {
                h_in,
                inv_attn,
                xa,
                qkv,
                probs,
                ctx,
                h_mid,
                inv_mlp,
                z: zs,
            });
        }
    }

    let mut logits = DenseMatrix::zeros(len, cfg.vocab_size);
    let mut inv_final = Vec::with_capacity(len);
    for (pos, hp) in h.iter().enumerate() {
        let (n, inv) = rms_norm(hp, &model.final_norm);
        logits.row_mut(pos).copy_from_slice(&mv(&model.embed, &n));
        inv_final.push(inv);
    }
    let cache = keep.then_some(ForwardCache {
        layers: caches,
        h_final: h,
        inv_final,
    });
    Ok((logits, cache))
}

/// Site kinds in forward order within a layer.
pub fn site_kinds() -> [SiteKind; 2] {
    SiteKind::ALL
}

/// Summed next-token negative log-likelihood over unmasked rows, the number
/// of those rows, and the gradient of the sum with respect to the logits.
pub fn lm_loss_grad<T: Real>(
    logits: &DenseMatrix<T>,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<(f64, usize, DenseMatrix<f64>)> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::dim(
            "lm_loss",
            format!("{} targets and mask entries", logits.rows()),
            format!("{} / {}", targets.len(), mask.len()),
        ));
    }
    let v = logits.cols();
    let mut grad = DenseMatrix::zeros(logits.rows(), v);
    let mut total = 0.0f64;
    let mut count = 0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let target = target as usize;
        if target >= v {
            return Err(Error::InvalidArgument(format!("target {target} out of vocabulary")));
        }
        let row: Vec<f64> = logits.row(t).iter().map(|x| x.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        count += 1;
        for (j, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = (row[j] - lse).exp() - if j == target { 1.0 } else { 0.0 };
        }
    }
    Ok((total, count, grad))
}

/// Mean cross-entropy over unmasked positions; row `t` of `logits` predicts `targets[t]`.
pub fn lm_loss<T: Real>(logits: &DenseMatrix<T>, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    let (total, count, _) = lm_loss_grad(logits, targets, mask)?;
    if count == 0 {
        return Err(Error::InvalidArgument("lm_loss: every position is masked".into()));
    }
    Ok(total / count as f64)
}
