//! Independent reference implementations used as test oracles. Everything
//! here works on plain `Vec<f64>` and shares no numerics with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residual_lora::model::{forward, init_model, lm_loss, Adapters, TokenId, ToyConfig, ToyModel};
use residual_lora::train::{grad_lora, Example};
use residual_lora::{DenseMatrix, ExpertAdapter, LowRankDelta, Real};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<T: Real>(m: &DenseMatrix<T>) -> Mat {
    (0..m.rows()).map(|i| m.row(i).iter().map(|x| x.as_f64()).collect()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, |r| r.len()));
    let mut out = zeros(n, m);
    for i in 0..n {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..m {
                out[i][j] += aip * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let c = a.first().map_or(0, |r| r.len());
    (0..c).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat, cb: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + cb * q).collect())
        .collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| c * x).collect()).collect()
}

pub fn frob(a: &Mat) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// `(alpha / base_rank) · B · A`, computed densely.
pub fn dense_delta<T: Real>(d: &LowRankDelta<T>) -> Mat {
    scale(&matmul(&to_mat(d.b()), &to_mat(d.a())), d.alpha() / d.base_rank() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns of the second value)
/// sorted by decreasing eigenvalue.
pub fn sym_eigen(s: &Mat) -> (Vec<f64>, Mat) {
    let n = s.len();
    let mut a = s.clone();
    let mut v = zeros(n, n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - sn * vq;
                    row[q] = sn * vp + c * vq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = idx.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..n).map(|r| idx.iter().map(|&i| v[r][i]).collect()).collect();
    (vals, vecs)
}

/// Singular values of `m` from the eigenvalues of `mᵀm`.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    let (vals, _) = sym_eigen(&matmul(&transpose(m), m));
    vals.into_iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Top right singular vector with the first clearly nonzero entry positive;
/// `None` for a zero matrix.
pub fn top_right_singular(m: &Mat) -> Option<Vec<f64>> {
    if frob(m) <= 1e-12 {
        return None;
    }
    let (_, vecs) = sym_eigen(&matmul(&transpose(m), m));
    let mut v: Vec<f64> = vecs.iter().map(|r| r[0]).collect();
    if let Some(x) = v.iter().find(|x| x.abs() > 1e-8) {
        if *x < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Some(v)
}

/// Brute-force routing over dense deltas: scores `|⟨x, v_i⟩|` (0 for a zero
/// delta), full sort by (score desc, index asc), softmax of the kept scores.
pub fn brute_route(dense: &[Mat], x: &[f64], k: usize, temperature: f64) -> (Vec<usize>, Vec<f64>) {
    let scores: Vec<f64> = dense
        .iter()
        .map(|m| match top_right_singular(m) {
            Some(v) => v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs(),
            None => 0.0,
        })
        .collect();
    let mut order: Vec<usize> = (0..dense.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let kept: Vec<usize> = order.into_iter().take(k.min(dense.len())).collect();
    let logits: Vec<f64> = kept.iter().map(|&i| scores[i] / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    (kept, e.iter().map(|v| v / z).collect())
}

/// Reference decoder forward in 64-bit. `site(layer, is_qkv, pos, x)` returns
/// the adapter increment to add to the base output of that site.
pub fn ref_forward<T: Real>(
    model: &ToyModel<T>,
    tokens: &[TokenId],
    site: &dyn Fn(usize, bool, usize, &[f64]) -> Vec<f64>,
) -> Mat {
    let cfg = &model.cfg;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let e = to_mat(&model.embed);
    let v64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let norm = |x: &[f64], g: &[f64]| {
        let ms = x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-6).sqrt();
        x.iter().zip(g).map(|(a, g)| a * r * g).collect::<Vec<f64>>()
    };
    let gelu = |z: f64| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
    let mut h: Mat = tokens.iter().map(|&t| e[t as usize].clone()).collect();
    for (l, w) in model.layers.iter().enumerate() {
        let (wq, wo, wu, wd) = (to_mat(&w.qkv), to_mat(&w.out), to_mat(&w.up), to_mat(&w.down));
        let qkv: Mat = h
            .iter()
            .enumerate()
            .map(|(t, ht)| {
                let x = norm(ht, &v64(&w.attn_norm));
                add(&vec![matvec(&wq, &x)], &vec![site(l, true, t, &x)], 1.0).remove(0)
            })
            .collect();
        let n = tokens.len();
        let mut outs: Mat = Vec::with_capacity(n);
        for t in 0..n {
            let mut ctx = vec![0.0; d];
            for hd in 0..nh {
                let o = hd * dh;
                let s: Vec<f64> = (0..=t)
                    .map(|u| (0..dh).map(|i| qkv[t][o + i] * qkv[u][d + o + i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for u in 0..=t {
                    let p = (s[u] - m).exp() / z;
                    for i in 0..dh {
                        ctx[o + i] += p * qkv[u][2 * d + o + i];
                    }
                }
            }
            outs.push(add(&vec![matvec(&wo, &ctx)], &vec![site(l, false, t, &ctx)], 1.0).remove(0));
        }
        for t in 0..n {
            for i in 0..d {
                h[t][i] += outs[t][i];
            }
            let x = norm(&h[t], &v64(&w.mlp_norm));
            let a: Vec<f64> = matvec(&wu, &x).into_iter().map(gelu).collect();
            let m = matvec(&wd, &a);
            for i in 0..d {
                h[t][i] += m[i];
            }
        }
    }
    h.iter()
        .map(|ht| matvec(&e, &norm(ht, &v64(&model.final_norm))))
        .collect()
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0) * s)
}

pub fn rand_delta(rng: &mut ChaCha8Rng, d: usize, k: usize, r: usize) -> LowRankDelta<f64> {
    let a = rand_mat(rng, r, k, 1.0);
    let b = rand_mat(rng, d, r, 1.0);
    let alpha = rng.gen_range(0.5..2.0) * r as f64;
    LowRankDelta::new(a, b, alpha, r).unwrap()
}

pub fn rel_frob(got: &Mat, want: &Mat) -> f64 {
    frob(&add(got, want, -1.0)) / frob(want).max(1e-300)
}

/// Random delta-algebra expression over deltas of one shape.
pub enum Expr {
    Leaf(LowRankDelta<f64>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Scale(f64, Box<Expr>),
    Avg(Vec<Expr>),
}

pub fn rand_expr(rng: &mut ChaCha8Rng, d: usize, k: usize, depth: usize) -> Expr {
    if depth == 0 || rng.gen_bool(0.25) {
        let r = rng.gen_range(1..=8usize.min(d).min(k));
        return Expr::Leaf(rand_delta(rng, d, k, r));
    }
    let sub = |rng: &mut ChaCha8Rng| Box::new(rand_expr(rng, d, k, depth - 1));
    match rng.gen_range(0..4) {
        0 => Expr::Add(sub(rng), sub(rng)),
        1 => Expr::Sub(sub(rng), sub(rng)),
        2 => Expr::Scale(rng.gen_range(-2.0..2.0), sub(rng)),
        _ => Expr::Avg((0..rng.gen_range(2..=3)).map(|_| rand_expr(rng, d, k, depth - 1)).collect()),
    }
}

/// Evaluates with the library's factor arithmetic at precision `T`.
pub fn eval_lowrank<T: Real>(e: &Expr) -> LowRankDelta<T> {
    use residual_lora::{average_adapters, ExpertAdapter, SiteId, SiteKind};
    match e {
        Expr::Leaf(d) => d.cast(),
        Expr::Add(a, b) => eval_lowrank::<T>(a).add(&eval_lowrank(b)).unwrap(),
        Expr::Sub(a, b) => eval_lowrank::<T>(a).subtract(&eval_lowrank(b)).unwrap(),
        Expr::Scale(c, a) => eval_lowrank::<T>(a).scale(*c),
        Expr::Avg(xs) => {
            let site = SiteId::new(0, SiteKind::OutputProjection);
            let adapters: Vec<ExpertAdapter<T>> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut a = ExpertAdapter::new(format!("x{i}"));
                    a.deltas.insert(site, eval_lowrank(x));
                    a
                })
                .collect();
            let refs: Vec<&ExpertAdapter<T>> = adapters.iter().collect();
            average_adapters("avg", &refs).unwrap().deltas.remove(&site).unwrap()
        }
    }
}

/// Evaluates densely in 64-bit.
pub fn eval_dense(e: &Expr) -> Mat {
    match e {
        Expr::Leaf(d) => dense_delta(d),
        Expr::Add(a, b) => add(&eval_dense(a), &eval_dense(b), 1.0),
        Expr::Sub(a, b) => add(&eval_dense(a), &eval_dense(b), -1.0),
        Expr::Scale(c, a) => scale(&eval_dense(a), *c),
        Expr::Avg(xs) => {
            let mut acc = eval_dense(&xs[0]);
            for x in &xs[1..] {
                acc = add(&acc, &eval_dense(x), 1.0);
            }
            scale(&acc, 1.0 / xs.len() as f64)
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Library of `n` random experts plus named generals, one shared rank.
pub fn rand_library(
    rng: &mut ChaCha8Rng,
    sig: &residual_lora::ModelSignature,
    n: usize,
    generals: &[&str],
    rank: usize,
) -> residual_lora::AdapterLibrary<f64> {
    use residual_lora::{AdapterLibrary, ExpertAdapter};
    let adapter = |name: String, rng: &mut ChaCha8Rng| {
        let mut a = ExpertAdapter::new(name);
        for site in sig.site_ids() {
            let (d, k) = sig.site_dims(site.kind);
            let delta = LowRankDelta::new(rand_mat(rng, rank, k, 1.0), rand_mat(rng, d, rank, 1.0), 2.0 * rank as f64, rank).unwrap();
            a.deltas.insert(site, delta);
        }
        a
    };
    let mut lib = AdapterLibrary::new(sig.clone());
    for i in 0..n {
        lib.experts.push(adapter(format!("task{i:02}"), rng));
    }
    for g in generals {
        lib.generals.insert(g.to_string(), adapter(g.to_string(), rng));
    }
    lib
}

pub fn small_cfg(seed: u64) -> ToyConfig {
    ToyConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        max_seq: 8,
        mlp_mult: 2,
        seed,
    }
}

pub fn random_adapter(model: &ToyModel<f64>, rank: usize, rng: &mut ChaCha8Rng) -> ExpertAdapter<f64> {
    let mut a = ExpertAdapter::new("probe");
    let sig = model.signature();
    for site in sig.site_ids() {
        let (d, k) = sig.site_dims(site.kind);
        a.deltas.insert(site, rand_delta(rng, d, k, rank).scale(0.3));
    }
    a
}

pub fn batch_loss(model: &ToyModel<f64>, adapter: &ExpertAdapter<f64>, batch: &[Example]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let n = ex.tokens.len() - 1;
        let logits = forward(model, &ex.tokens[..n], &Adapters::Fixed(adapter)).unwrap();
        let k = ex.n_targets();
        total += lm_loss(&logits, &ex.tokens[1..], &ex.loss_on[1..]).unwrap() * k as f64;
        count += k;
    }
    total / count as f64
}

pub fn perturbed(adapter: &ExpertAdapter<f64>, which: usize, h: f64) -> ExpertAdapter<f64> {
    let mut out = adapter.clone();
    let mut idx = which;
    for d in out.deltas.values_mut() {
        let mut a = d.a().clone();
        let mut b = d.b().clone();
        let na = a.as_slice().len();
        let nb = b.as_slice().len();
        if idx < na {
            let (i, j) = (idx / a.cols(), idx % a.cols());
            a.set(i, j, a.get(i, j) + h);
        } else if idx < na + nb {
            let k = idx - na;
            let (i, j) = (k / b.cols(), k % b.cols());
            b.set(i, j, b.get(i, j) + h);
        } else {
            idx -= na + nb;
            continue;
        }
        *d = LowRankDelta::new(a, b, d.alpha(), d.base_rank()).unwrap();
        return out;
    }
    unreachable!("coordinate out of range")
}

pub fn random_batch(rng: &mut ChaCha8Rng, vocab: u32, max_len: usize, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=max_len);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let loss_on = (0..len).map(|t| t > 0 && rng.gen_bool(0.7)).collect::<Vec<_>>();
            let mut ex = Example { tokens, loss_on };
            ex.loss_on[len - 1] = true;
            ex
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients.
pub fn fd_max_rel_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = init_model::<f64>(&small_cfg(seed)).unwrap();
    let adapter = random_adapter(&model, 2, &mut rng);
    let batch = random_batch(&mut rng, 16, 8, 3);
    let (_, grads) = grad_lora(&model, &adapter, &batch).unwrap();
    let g = grads.flatten();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, &gi) in g.iter().enumerate() {
        let fp = batch_loss(&model, &perturbed(&adapter, i, h), &batch);
        let fm = batch_loss(&model, &perturbed(&adapter, i, -h), &batch);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

