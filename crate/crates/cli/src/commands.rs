use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use residual_lora::container::{container_paths, fnv1a64, load_bank, load_library, save_bank, save_library};
use residual_lora::eval::{contamination_sweep, median, run_comparison, sweep_csv, train_stage, EvalConfig, Method};
use residual_lora::model::{forward, load_model, save_model, RoutingTracer, TokenId};
use residual_lora::router::build_prototypes;
use residual_lora::train::write_log_jsonl;
use residual_lora::{subtract_general, Real, RouterConfig, SubtractMode};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, parse_config, to_toml, DEFAULT_CONFIG};
use crate::{Cli, Command, PrecisionArg};

pub fn run(cli: &Cli) -> Result<()> {
    match cli.precision {
        PrecisionArg::F32 => dispatch::<f32>(cli),
        PrecisionArg::F64 => dispatch::<f64>(cli),
    }
}

fn dispatch<T: Real>(cli: &Cli) -> Result<()> {
    let root = &cli.out_root;
    match &cli.command {
        Command::TrainExperts { config, out, check, force } => {
            let cfg = effective_config(config.as_deref(), cli.seed)?;
            train_experts::<T>(&cfg, &resolve(root, out), *check, *force)
        }
        Command::Subtract { library, general, mode, out } => {
            subtract::<T>(&resolve(root, library), general, mode, &resolve(root, out))
        }
        Command::Prototypes { library, out } => prototypes::<T>(&resolve(root, library), &resolve(root, out)),
        Command::RouteInspect { library, bank, model, input, k } => {
            let table = route_inspect::<T>(&resolve(root, library), &resolve(root, bank), &resolve(root, model), input, *k)?;
            print!("{table}");
            Ok(())
        }
        Command::Eval { config, methods, sweep_gamma, seeds, out } => {
            let mut cfg = effective_config(config.as_deref(), cli.seed)?;
            if let Some(ms) = methods {
                cfg.methods = ms.iter().map(|m| m.parse::<Method>()).collect::<Result<_, _>>()?;
            }
            let seeds = seeds.clone().unwrap_or_else(|| vec![cfg.suite.seed]);
            eval::<T>(&cfg, sweep_gamma.as_deref(), &seeds, &resolve(root, out))
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn effective_config(path: Option<&Path>, seed: Option<u64>) -> Result<EvalConfig> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => parse_config(DEFAULT_CONFIG)?,
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Summary of a finished training run, written next to its artifacts.
#[derive(Debug, Serialize, Deserialize)]
struct RunStamp {
    config_fingerprint: String,
    library_blob_fnv1a64: String,
    experts: usize,
    generals: Vec<String>,
}

fn blob_hash(stem: &Path) -> Result<String> {
    let (_, blob) = container_paths(stem);
    let bytes = fs::read(&blob).with_context(|| format!("reading {}", blob.display()))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn train_experts<T: Real>(cfg: &EvalConfig, out: &Path, check: bool, force: bool) -> Result<()> {
    let lib_stem = out.join("library");
    let (manifest, _) = container_paths(&lib_stem);
    let exists = manifest.exists();
    if check && !exists {
        bail!("nothing to check: {} does not exist", manifest.display());
    }
    if exists && !check && !force {
        bail!("{} already exists; pass --force to overwrite or --check to verify it", out.display());
    }

    let art = train_stage::<T>(cfg)?;

    if check {
        let on_disk = load_library::<f32>(&lib_stem).context("on-disk library failed verification")?;
        let scratch = std::env::temp_dir().join(format!("rlora-check-{}", std::process::id()));
        let fresh_stem = scratch.join("library");
        save_library(&art.library, &fresh_stem)?;
        let (want, got) = (blob_hash(&fresh_stem)?, blob_hash(&lib_stem)?);
        let _ = fs::remove_dir_all(&scratch);
        if want != got || on_disk.n_experts() != art.library.n_experts() {
            bail!("library at {} does not match the configuration (blob {got}, expected {want})", out.display());
        }
        println!("check ok: {} matches (blob fnv1a64 {got})", lib_stem.display());
        return Ok(());
    }

    fs::create_dir_all(out.join("logs")).with_context(|| format!("creating {}", out.display()))?;
    save_library(&art.library, &lib_stem)?;
    save_model(&art.model, &out.join("model"))?;
    for (name, log) in &art.logs {
        write_log_jsonl(&out.join("logs").join(format!("{name}.jsonl")), log)?;
    }
    fs::write(out.join("config.toml"), to_toml(cfg)?)?;
    let stamp = RunStamp {
        config_fingerprint: cfg.fingerprint(),
        library_blob_fnv1a64: blob_hash(&lib_stem)?,
        experts: art.library.n_experts(),
        generals: art.library.generals.keys().cloned().collect(),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&stamp)? + "\n")?;
    println!(
        "trained {} experts and generals [{}] -> {}",
        stamp.experts,
        stamp.generals.join(", "),
        out.display()
    );
    Ok(())
}

fn subtract<T: Real>(library: &Path, general: &str, mode: &str, out: &Path) -> Result<()> {
    let mode: SubtractMode = mode.parse()?;
    let lib = load_library::<T>(library)?;
    let residual = subtract_general(&lib, general, mode)?;
    save_library(&residual, out)?;
    println!(
        "{}: {} experts -> {}",
        residual.provenance,
        residual.n_experts(),
        container_paths(out).0.display()
    );
    Ok(())
}

fn prototypes<T: Real>(library: &Path, out: &Path) -> Result<()> {
    let lib = load_library::<T>(library)?;
    let bank = build_prototypes(&lib)?;
    save_bank(&bank, out)?;
    let degenerate: usize = bank.sites.values().map(|s| s.degenerate.iter().filter(|d| **d).count()).sum();
    println!(
        "prototypes for {} experts at {} sites ({degenerate} degenerate) -> {}",
        bank.n_experts(),
        bank.sites.len(),
        container_paths(out).0.display()
    );
    Ok(())
}

fn parse_tokens(input: &str) -> Result<Vec<TokenId>> {
    input
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<TokenId>().with_context(|| format!("bad token id `{s}`")))
        .collect()
}

pub fn route_inspect<T: Real>(library: &Path, bank: &Path, model: &Path, input: &str, k: usize) -> Result<String> {
    let lib = load_library::<T>(library)?;
    let bank = load_bank::<T>(bank)?;
    bank.check_matches(&lib)?;
    let model = load_model::<T>(model)?;
    let tokens = parse_tokens(input)?;
    if k > lib.n_experts() {
        eprintln!(
            "warning: k = {k} exceeds the {} experts in the library; using {}",
            lib.n_experts(),
            lib.n_experts()
        );
    }
    let tracer = RoutingTracer::new(&lib, &bank, RouterConfig::with_k(k));
    forward(&model, &tokens, &tracer)?;
    let mut trace = tracer.into_trace();
    trace.sort_by_key(|t| (t.pos, t.site));

    let mut out = format!("{:>4} {:>5}  {:<18} {:<16} {:>6}\n", "pos", "layer", "site", "expert", "coeff");
    for t in &trace {
        let mut rows: Vec<(usize, f64)> = t.decision.indices.iter().copied().zip(t.decision.coeffs.iter().copied()).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (i, c) in rows {
            out.push_str(&format!(
                "{:>4} {:>5}  {:<18} {:<16} {:>6.4}\n",
                t.pos,
                t.site.layer,
                t.site.kind.as_str(),
                lib.experts[i].name,
                c
            ));
        }
    }
    Ok(out)
}

fn eval<T: Real>(cfg: &EvalConfig, gammas: Option<&[f64]>, seeds: &[u64], out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match gammas {
        None => {
            for &seed in seeds {
                let run_cfg = cfg.with_seed(seed);
                let report = run_comparison::<T>(&run_cfg)?;
                let path = out.join(format!("report_seed{seed}.jsonl"));
                fs::write(&path, report.to_jsonl())?;
                println!("seed {seed} (gamma {}):", run_cfg.suite.gamma);
                print!("{}", report.summary_table());
                println!("report -> {}", path.display());
            }
        }
        Some(gammas) => {
            let rows = contamination_sweep::<T>(cfg, gammas, seeds)?;
            let path = out.join("sweep.csv");
            fs::write(&path, sweep_csv(&rows))?;
            println!("{:<8} {:<12} {:>16}", "gamma", "method", "median accuracy");
            for &g in gammas {
                for &m in &cfg.methods {
                    let acc: Vec<f64> = rows.iter().filter(|r| r.gamma == g && r.method == m).map(|r| r.accuracy).collect();
                    println!("{:<8} {:<12} {:>16.4}", g, m.label(), median(&acc));
                }
            }
            println!("{} rows -> {}", rows.len(), path.display());
        }
    }
    Ok(())
}
