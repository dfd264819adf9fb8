//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL ...` line.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residual_lora::container::{load_library, save_library};
use residual_lora::eval::{rouge_l, rouge_l_text, run_comparison, EvalConfig, Method};
use residual_lora::model::{forward, init_model, Adapters, ToyConfig};
use residual_lora::router::{build_prototypes, route};
use residual_lora::{mean_normalize, subtract_general, AdapterLibrary, ExpertAdapter, ModelSignature, RouterConfig, SiteId, SiteKind, SubtractMode};

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_delta_algebra_matches_dense_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let d = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=64);
        let e = common::rand_expr(&mut rng, d, k, 3);
        let want = common::eval_dense(&e);
        let got64 = common::to_mat(&common::eval_lowrank::<f64>(&e).materialize().unwrap());
        let got32 = common::to_mat(&common::eval_lowrank::<f32>(&e).materialize().unwrap());
        worst64 = worst64.max(common::rel_frob(&got64, &want));
        worst32 = worst32.max(common::rel_frob(&got32, &want));
    }
    let dt = t0.elapsed();
    report(
        1,
        worst32 <= 1e-5 && worst64 <= 1e-12 && dt < Duration::from_secs(10),
        format!("max rel frob f32 {worst32:.2e} (<= 1e-5), f64 {worst64:.2e} (<= 1e-12), {dt:.2?}"),
    );
}

#[test]
fn criterion_02_prototypes_match_dense_svd() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let d = rng.gen_range(2..=64);
        let k = rng.gen_range(2..=64);
        let r = rng.gen_range(1..=8usize.min(d).min(k));
        let delta = common::rand_delta(&mut rng, d, k, r);
        let got = delta.prototype().unwrap();
        let want = common::top_right_singular(&common::dense_delta(&delta)).unwrap();
        worst = worst.min(common::dot(&got, &want).abs());
    }
    let dt = t0.elapsed();
    report(
        2,
        worst >= 1.0 - 1e-6 && dt < Duration::from_secs(10),
        format!("min |<prototype, oracle>| {worst:.9} (>= 1 - 1e-6), {dt:.2?}"),
    );
}

#[test]
fn criterion_03_routing_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let mut worst_coeff = 0.0f64;
    for case in 0..1000 {
        // every fourth case uses n = 10, k_top = 3
        let (n, k_top) = if case % 4 == 0 {
            (10, 3)
        } else {
            let n = rng.gen_range(1..=12);
            (n, rng.gen_range(1..=n + 2))
        };
        let d = rng.gen_range(2..=12);
        let sig = ModelSignature::new(d, 1);
        let rank = rng.gen_range(1..=4);
        let lib = common::rand_library(&mut rng, &sig, n, &[], rank);
        let bank = build_prototypes(&lib).unwrap();
        let site = SiteId::new(0, SiteKind::ALL[rng.gen_range(0..2)]);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = route(&bank, site, &x, &RouterConfig::with_k(k_top)).unwrap();
        let dense: Vec<common::Mat> = lib.experts.iter().map(|e| common::dense_delta(&e.deltas[&site])).collect();
        let (idx, coeffs) = common::brute_route(&dense, &x, k_top, 1.0);
        let nonzero = got.dense_coefficients(n).iter().filter(|c| **c != 0.0).count();
        let sum: f64 = got.coeffs.iter().sum();
        let diff = got.coeffs.iter().zip(&coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_coeff = worst_coeff.max(diff);
        if got.indices != idx || diff > 1e-6 || nonzero != k_top.min(n) || (sum - 1.0).abs() > 1e-12 {
            failures.push(case);
        }
    }
    report(
        3,
        failures.is_empty(),
        format!("1000 cases, {} mismatches, max coeff diff {worst_coeff:.2e} (<= 1e-6)", failures.len()),
    );
}

#[test]
fn criterion_04_routed_forward_matches_dense_reference() {
    let cfg = ToyConfig::default();
    let model = init_model::<f32>(&cfg).unwrap();
    let sig = model.signature();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let lib = common::rand_library(&mut rng, &sig, 10, &[], 4).cast::<f64>();
    let lib = scale_library(&lib, 0.05).cast::<f32>();
    let bank = build_prototypes(&lib).unwrap();
    let router = RouterConfig::default();
    let dense: Vec<Vec<common::Mat>> = sig
        .site_ids()
        .iter()
        .map(|s| lib.experts.iter().map(|e| common::dense_delta(&e.deltas[s])).collect())
        .collect();
    let site_index = |layer: usize, qkv: bool| 2 * layer + usize::from(!qkv);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(1..=cfg.max_seq);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let got = forward(
            &model,
            &tokens,
            &Adapters::Routed {
                library: &lib,
                bank: &bank,
                router,
            },
        )
        .unwrap();
        let want = common::ref_forward(&model, &tokens, &|layer, qkv, _pos, x| {
            let ms = &dense[site_index(layer, qkv)];
            let (idx, coeffs) = common::brute_route(ms, x, router.k_top, router.temperature);
            let mut y = vec![0.0; ms[0].len()];
            for (&i, &c) in idx.iter().zip(&coeffs) {
                for (yi, v) in y.iter_mut().zip(common::matvec(&ms[i], x)) {
                    *yi += c * v;
                }
            }
            y
        });
        let err = common::to_mat(&got)
            .iter()
            .flatten()
            .zip(want.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }

    let mut zero = AdapterLibrary::new(sig.clone());
    for i in 0..10 {
        zero.experts.push(ExpertAdapter::zeros(format!("z{i}"), &sig, 4));
    }
    let zbank = build_prototypes(&zero).unwrap();
    let tokens: Vec<u32> = (0..cfg.max_seq as u32).map(|t| (7 * t + 3) % cfg.vocab_size as u32).collect();
    let base = forward(&model, &tokens, &Adapters::None).unwrap();
    let routed_zero = forward(
        &model,
        &tokens,
        &Adapters::Routed {
            library: &zero,
            bank: &zbank,
            router,
        },
    )
    .unwrap();
    let exact = base == routed_zero;
    report(
        4,
        worst <= 1e-4 && exact,
        format!("50 sequences, max |logit diff| {worst:.2e} (<= 1e-4); zero library equals base exactly: {exact}"),
    );
}

fn scale_library(lib: &AdapterLibrary<f64>, c: f64) -> AdapterLibrary<f64> {
    let mut out = lib.clone();
    for e in &mut out.experts {
        *e = e.try_map(|_, d| Ok(d.scale(c))).unwrap();
    }
    out
}

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let worst = (0..5).map(common::fd_max_rel_error).fold(0.0, f64::max);
    let dt = t0.elapsed();
    report(
        5,
        worst <= 1e-3 && dt < Duration::from_secs(60),
        format!("5 configs, max relative error {worst:.2e} (<= 1e-3), {dt:.2?}"),
    );
}

#[test]
fn criterion_06_duplicate_general_annihilates_its_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let sig = ModelSignature::new(16, 2);
    let mut lib = common::rand_library(&mut rng, &sig, 10, &[], 4);
    let target = 4;
    let mut dup = lib.experts[target].clone();
    dup.name = "dup".into();
    lib.generals.insert("dup".into(), dup);
    let residual = subtract_general(&lib, "dup", SubtractMode::DeltaSpace).unwrap();
    let worst_norm = residual.experts[target]
        .deltas
        .values()
        .map(|d| d.materialize().unwrap().frobenius_norm())
        .fold(0.0, f64::max);
    let bank = build_prototypes(&residual).unwrap();
    let all_flagged = bank.sites.values().all(|s| s.degenerate[target]);
    let mut selected = 0;
    for _ in 0..100 {
        let site = sig.site_ids()[rng.gen_range(0..4)];
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if route(&bank, site, &x, &RouterConfig::default()).unwrap().indices.contains(&target) {
            selected += 1;
        }
    }
    report(
        6,
        worst_norm <= 1e-12 && all_flagged && selected == 0,
        format!("residual norm {worst_norm:.1e} (<= 1e-12), degenerate at every site: {all_flagged}, selected {selected}/100"),
    );
}

#[test]
fn criterion_07_mean_normalized_residuals_sum_to_zero() {
    // tolerance: 1e-10 relative to the sum of the experts' Frobenius norms
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.gen_range(2..=16);
        let sig = ModelSignature::new(d, rng.gen_range(1..=2));
        let n = rng.gen_range(2..=10);
        let rank = rng.gen_range(1..=4);
        let lib = common::rand_library(&mut rng, &sig, n, &[], rank);
        let res = mean_normalize(&lib).unwrap();
        for site in sig.site_ids() {
            let mut sum = common::dense_delta(&res.experts[0].deltas[&site]);
            for e in &res.experts[1..] {
                sum = common::add(&sum, &common::dense_delta(&e.deltas[&site]), 1.0);
            }
            let scale: f64 = lib.experts.iter().map(|e| common::frob(&common::dense_delta(&e.deltas[&site]))).sum();
            worst = worst.max(common::frob(&sum) / scale);
        }
    }
    report(7, worst <= 1e-10, format!("20 libraries, max relative residual sum {worst:.2e} (<= 1e-10)"));
}

#[test]
fn criterion_08_desk_scale_ordering() {
    let t0 = Instant::now();
    let base_cfg = EvalConfig::default().with_gamma(0.5);
    let mut acc = std::collections::BTreeMap::<Method, Vec<f64>>::new();
    for seed in 0..3 {
        let report = run_comparison::<f32>(&base_cfg.with_seed(seed)).unwrap();
        for s in &report.summary {
            acc.entry(s.method).or_default().push(s.accuracy);
        }
    }
    let dt = t0.elapsed();
    let med = |m: Method| residual_lora::eval::median(&acc[&m]);
    let (g, a, b) = (med(Method::GenKnowSub), med(Method::Arrow), med(Method::Base));
    let all: Vec<String> = Method::ALL
        .iter()
        .map(|&m| format!("{} {:.3} {:?}", m.label(), med(m), acc[&m]))
        .collect();
    report(
        8,
        g >= a && a >= b && dt <= Duration::from_secs(15 * 60),
        format!(
            "median accuracy at gamma 0.5 over 3 seeds: GenKnowSub {g:.3} >= Arrow {a:.3} >= base {b:.3}; {dt:.1?}; {}",
            all.join("; ")
        ),
    );
}

#[test]
fn criterion_09_rouge_l_fixtures() {
    let s = rouge_l_text("a c", "a b c");
    let fixtures = s.precision == 1.0
        && s.recall == 2.0 / 3.0
        && s.f1 == 0.8
        && rouge_l_text("the cat sat", "the cat sat").f1 == 1.0
        && rouge_l(&[3u32, 9, 4], &[3u32, 9, 4]).f1 == 1.0
        && rouge_l_text("a b c d", "a x c y").f1 == 0.5
        && rouge_l_text("p q", "r s").f1 == 0.0;
    report(9, fixtures, format!("\"a c\" vs \"a b c\" F1 = {}", s.f1));
}

#[test]
fn criterion_10_container_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let sig = ToyConfig::default().signature();
    let lib = common::rand_library(&mut rng, &sig, 10, &["gen_a", "gen_b", "gen_c"], 4).cast::<f32>();
    // same stem in two directories: the manifest names its blob file
    let p1 = dir.path().join("a").join("lib");
    let p2 = dir.path().join("b").join("lib");
    save_library(&lib, &p1).unwrap();
    let loaded = load_library::<f32>(&p1).unwrap();
    save_library(&loaded, &p2).unwrap();
    let read = |p: &std::path::Path, ext: &str| std::fs::read(p.with_extension(ext)).unwrap();
    let same_blob = read(&p1, "blob") == read(&p2, "blob");
    let same_manifest = read(&p1, "manifest.json") == read(&p2, "manifest.json");
    let same_values = loaded == lib;
    let identical = same_blob && same_manifest && same_values;

    let blob = p1.with_extension("blob");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[1234] ^= 0x10;
    std::fs::write(&blob, bytes).unwrap();
    let detected = matches!(load_library::<f32>(&p1), Err(residual_lora::Error::Checksum { .. }));
    report(
        10,
        identical && detected,
        format!("10 experts + 3 generals: save/load/save byte-identical {identical} (blob {same_blob}, manifest {same_manifest}, values {same_values}), corruption detected {detected}"),
    );
}
