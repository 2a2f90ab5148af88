//! `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use uniembed::rng::derive_seed;
use uniembed::{DistillConfig, GenSpec, NetConfig, TripletConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read {
        path: String,
        message: String,
    },
    Syntax {
        line: usize,
        message: String,
    },
    UnknownKey {
        line: usize,
        key: String,
    },
    Type {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, message } => write!(f, "cannot read config {path}: {message}"),
            ConfigError::Syntax { line, message } => write!(f, "config line {line}: {message}"),
            ConfigError::UnknownKey { line, key } => write!(f, "config line {line}: unknown key `{key}`"),
            ConfigError::Type {
                line,
                key,
                value,
                expected,
            } => {
                write!(f, "config line {line}: `{key}` expects {expected}, got `{value}`")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every tunable of a run. Unset keys keep the defaults below.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub net: NetConfig,
    pub triplet: TripletConfig,
    pub distill: DistillConfig,
    /// Steps of the clean-label phase of `train --finetune`.
    pub finetune_steps: usize,
    /// Tolerance of greedy combination, in top-1 points.
    pub epsilon: f64,
    pub noise_rate: f64,
    pub noise_seed: u64,
    pub ks: Vec<usize>,
    /// Default dataset for commands that read one.
    pub data: Option<String>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenSpec::default(),
            net: NetConfig::default(),
            triplet: TripletConfig::default(),
            distill: DistillConfig::default(),
            finetune_steps: 500,
            epsilon: 1.0,
            noise_rate: 0.2,
            noise_seed: 0,
            ks: vec![1, 5, 20],
            data: None,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Derives every seed of the run from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.net.seed = derive_seed(seed, 1);
        self.triplet.seed = derive_seed(seed, 2);
        self.distill.seed = derive_seed(seed, 3);
        self.noise_seed = derive_seed(seed, 4);
    }

    /// The network shape for a dataset of the given width.
    pub fn net_for(&self, input_dim: usize) -> NetConfig {
        NetConfig {
            input_dim,
            ..self.net.clone()
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        apply(&mut cfg, line, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        line,
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(line, key, v.trim(), expected)).collect()
}

fn apply(cfg: &mut RunConfig, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
    const INT: &str = "a non-negative integer";
    const REAL: &str = "a real number";
    const BOOL: &str = "true or false";
    const INTS: &str = "a comma-separated list of integers";
    match key {
        "seed" => cfg.set_seed(parse(line, key, value, INT)?),
        "threads" => cfg.threads = parse(line, key, value, INT)?,
        "data" => cfg.data = Some(value.to_string()),

        "verticals" => cfg.gen.verticals = parse(line, key, value, INT)?,
        "products_per_vertical" => cfg.gen.products_per_vertical = parse(line, key, value, INT)?,
        "items_per_product" => cfg.gen.items_per_product = parse(line, key, value, INT)?,
        "input_dim" => cfg.gen.input_dim = parse(line, key, value, INT)?,
        "vertical_spread" => cfg.gen.vertical_spread = parse(line, key, value, REAL)?,
        "product_spread" => cfg.gen.product_spread = parse(line, key, value, REAL)?,
        "sample_noise" => cfg.gen.sample_noise = parse(line, key, value, REAL)?,
        "query_fraction" => cfg.gen.query_fraction = parse(line, key, value, REAL)?,
        "conflict_verticals" => cfg.gen.conflict_verticals = parse_list(line, key, value, INTS)?,
        "data_seed" => cfg.gen.seed = parse(line, key, value, INT)?,

        "hidden_dims" => cfg.net.hidden_dims = parse_list(line, key, value, INTS)?,
        "embedding_dim" => cfg.net.embedding_dim = parse(line, key, value, INT)?,
        "normalize_output" => cfg.net.normalize_output = parse(line, key, value, BOOL)?,
        "net_seed" => cfg.net.seed = parse(line, key, value, INT)?,

        "alpha" => cfg.triplet.alpha = parse(line, key, value, REAL)?,
        "batch_products" => cfg.triplet.batch_products = parse(line, key, value, INT)?,
        "images_per_product" => cfg.triplet.images_per_product = parse(line, key, value, INT)?,
        "steps" => cfg.triplet.steps = parse(line, key, value, INT)?,
        "lr" => cfg.triplet.lr = parse(line, key, value, REAL)?,
        "momentum" => cfg.triplet.momentum = parse(line, key, value, REAL)?,
        "train_seed" => cfg.triplet.seed = parse(line, key, value, INT)?,
        "checkpoint_every" => {
            let every = parse(line, key, value, INT)?;
            cfg.triplet.checkpoint_every = every;
            cfg.distill.checkpoint_every = every;
        }
        "finetune_steps" => cfg.finetune_steps = parse(line, key, value, INT)?,

        "distill_steps" => cfg.distill.steps = parse(line, key, value, INT)?,
        "distill_lr" => cfg.distill.lr = parse(line, key, value, REAL)?,
        "distill_momentum" => cfg.distill.momentum = parse(line, key, value, REAL)?,
        "distill_batch_size" => cfg.distill.batch_size = parse(line, key, value, INT)?,
        "distill_seed" => cfg.distill.seed = parse(line, key, value, INT)?,

        "epsilon" => cfg.epsilon = parse(line, key, value, REAL)?,
        "noise_rate" => cfg.noise_rate = parse(line, key, value, REAL)?,
        "noise_seed" => cfg.noise_seed = parse(line, key, value, INT)?,
        "ks" => cfg.ks = parse_list(line, key, value, INTS)?,
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}
