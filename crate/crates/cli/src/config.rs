use std::path::Path;

use anyhow::{bail, Context, Result};
use residual_lora::eval::{EvalConfig, Method, SuiteConfig};
use residual_lora::model::ToyConfig;
use residual_lora::train::TrainConfig;
use residual_lora::RouterConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

/// On-disk layout of a pipeline configuration.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    version: u32,
    #[serde(default)]
    model: ToyConfig,
    #[serde(default)]
    suite: SuiteConfig,
    #[serde(default = "default_expert_train")]
    expert_train: TrainConfig,
    #[serde(default = "default_general_train")]
    general_train: TrainConfig,
    #[serde(default)]
    router: RouterConfig,
    #[serde(default = "default_methods")]
    methods: Vec<Method>,
}

fn default_expert_train() -> TrainConfig {
    EvalConfig::default().expert_train
}

fn default_general_train() -> TrainConfig {
    EvalConfig::default().general_train
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

pub fn parse_config(text: &str) -> Result<EvalConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
    if file.version != CONFIG_VERSION {
        bail!("config version {} is not supported (expected {CONFIG_VERSION})", file.version);
    }
    let cfg = EvalConfig {
        model: file.model,
        suite: file.suite,
        expert_train: file.expert_train,
        general_train: file.general_train,
        router: file.router,
        methods: file.methods,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<EvalConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn to_toml(cfg: &EvalConfig) -> Result<String> {
    let file = ConfigFile {
        version: CONFIG_VERSION,
        model: cfg.model.clone(),
        suite: cfg.suite.clone(),
        expert_train: cfg.expert_train.clone(),
        general_train: cfg.general_train.clone(),
        router: cfg.router,
        methods: cfg.methods.clone(),
    };
    Ok(toml::to_string(&file)?)
}
