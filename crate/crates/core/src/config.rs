//! Experiment configuration: a flat key = value text format covering dataset
//! generation, training, fine-tuning, and run plumbing.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored; unknown keys are rejected. When a key repeats, the last
//! occurrence wins (so a file can be layered over defaults and CLI overrides
//! over the file). The resolved configuration is always written next to run
//! outputs so every artifact carries its provenance.

use crate::detect::BalanceStrategy;
use crate::error::{Error, Result};
use crate::losses::CombineMode;
use crate::train::TrainConfig;

/// Noise family to plant when generating a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    #[default]
    None,
    Symmetric,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "sym" | "symmetric" => Ok(NoiseKind::Symmetric),
            "asym" | "asymmetric" => Ok(NoiseKind::Asymmetric),
            other => Err(Error::InvalidConfig(format!("unknown noise kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Symmetric => write!(f, "sym"),
            NoiseKind::Asymmetric => write!(f, "asym"),
        }
    }
}

/// Dataset-generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_spread: f64,
    pub cluster_sigma: f64,
    pub noise: NoiseKind,
    pub noise_rate: f64,
    /// Group size for the circular asymmetric mapping; 0 means one group
    /// spanning all classes.
    pub asym_group: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            classes: 5,
            per_class: 200,
            dim: 16,
            center_spread: 5.0,
            cluster_sigma: 0.5,
            noise: NoiseKind::None,
            noise_rate: 0.0,
            asym_group: 0,
        }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub gen: GenParams,
    pub train: TrainConfig,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GenParams::default(),
            train: TrainConfig::default(),
            out_dir: "out".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("config key '{key}': bad value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Parse(format!("config key '{key}': bad boolean '{other}'"))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|f| {
            f.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("config key '{key}': bad list entry '{f}'")))
        })
        .collect()
}

fn render_usize_list(list: &[usize]) -> String {
    list.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one key = value pair.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let g = &mut self.gen;
        match key {
            // dataset
            "classes" => g.classes = parse_num(key, value)?,
            "per_class" => g.per_class = parse_num(key, value)?,
            "dim" => g.dim = parse_num(key, value)?,
            "center_spread" => g.center_spread = parse_num(key, value)?,
            "cluster_sigma" => g.cluster_sigma = parse_num(key, value)?,
            "noise" => g.noise = value.parse()?,
            "noise_rate" => g.noise_rate = parse_num(key, value)?,
            "asym_group" => g.asym_group = parse_num(key, value)?,
            // model
            "hidden_dims" => t.hidden_dims = parse_usize_list(key, value)?,
            "embed_dim" => t.embed_dim = parse_num(key, value)?,
            "proj_dim" => t.proj_dim = parse_num(key, value)?,
            // optimization
            "epochs" => t.epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "initial_lr" => t.initial_lr = parse_num(key, value)?,
            "lr_milestones" => t.lr_milestones = parse_usize_list(key, value)?,
            "lr_factor" => t.lr_factor = parse_num(key, value)?,
            "extra_decay_at_ssl" => t.extra_decay_at_ssl = parse_bool(key, value)?,
            "momentum" => t.momentum = parse_num(key, value)?,
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            // method
            "tau" => t.tau = parse_num(key, value)?,
            "alpha" => t.alpha = parse_num(key, value)?,
            "knn_k" => t.knn_k = parse_num(key, value)?,
            "memory_size" => t.memory_size = parse_num(key, value)?,
            "ssl_start_epoch" => t.ssl_start_epoch = parse_num(key, value)?,
            "balance" => t.balance = value.parse()?,
            "combine" => {
                t.combine = match value {
                    "sum" => CombineMode::Sum,
                    "mean" => CombineMode::Mean,
                    other => {
                        return Err(Error::Parse(format!("config key 'combine': bad value '{other}'")))
                    }
                }
            }
            "no_ssl" => t.no_ssl = parse_bool(key, value)?,
            "no_memory" => t.no_memory = parse_bool(key, value)?,
            // finetune
            "delta" => t.delta = parse_num(key, value)?,
            "finetune_epochs" => t.finetune_epochs = parse_num(key, value)?,
            "bootstrap_start_epoch" => t.bootstrap_start_epoch = parse_num(key, value)?,
            "finetune_lr" => t.finetune_lr = parse_num(key, value)?,
            "finetune_jitter" => t.finetune_jitter = parse_num(key, value)?,
            // augmentation
            "jitter_sigma" => t.augment.jitter_sigma = parse_num(key, value)?,
            "drop_prob" => t.augment.drop_prob = parse_num(key, value)?,
            "scale_lo" => t.augment.scale_lo = parse_num(key, value)?,
            "scale_hi" => t.augment.scale_hi = parse_num(key, value)?,
            // evaluation
            "test_fraction" => t.test_fraction = parse_num(key, value)?,
            "eval_knn_k" => t.eval_knn_k = parse_num(key, value)?,
            // run
            "seed" => t.seed = parse_num(key, value)?,
            "threads" => t.threads = parse_num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a config file body over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies a config file body over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value", lineno + 1)))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Renders every key in a fixed order; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let t = &self.train;
        let g = &self.gen;
        let balance = match t.balance {
            BalanceStrategy::Median => "median",
            BalanceStrategy::Min => "min",
            BalanceStrategy::Max => "max",
            BalanceStrategy::Unbalanced => "none",
        };
        let combine = match t.combine {
            CombineMode::Sum => "sum",
            CombineMode::Mean => "mean",
        };
        format!(
            "# dataset\n\
             classes = {}\n\
             per_class = {}\n\
             dim = {}\n\
             center_spread = {}\n\
             cluster_sigma = {}\n\
             noise = {}\n\
             noise_rate = {}\n\
             asym_group = {}\n\
             # model\n\
             hidden_dims = {}\n\
             embed_dim = {}\n\
             proj_dim = {}\n\
             # optimization\n\
             epochs = {}\n\
             batch_size = {}\n\
             initial_lr = {}\n\
             lr_milestones = {}\n\
             lr_factor = {}\n\
             extra_decay_at_ssl = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             # method\n\
             tau = {}\n\
             alpha = {}\n\
             knn_k = {}\n\
             memory_size = {}\n\
             ssl_start_epoch = {}\n\
             balance = {}\n\
             combine = {}\n\
             no_ssl = {}\n\
             no_memory = {}\n\
             # finetune\n\
             delta = {}\n\
             finetune_epochs = {}\n\
             bootstrap_start_epoch = {}\n\
             finetune_lr = {}\n\
             finetune_jitter = {}\n\
             # augmentation\n\
             jitter_sigma = {}\n\
             drop_prob = {}\n\
             scale_lo = {}\n\
             scale_hi = {}\n\
             # evaluation\n\
             test_fraction = {}\n\
             eval_knn_k = {}\n\
             # run\n\
             seed = {}\n\
             threads = {}\n\
             out_dir = {}\n",
            g.classes,
            g.per_class,
            g.dim,
            g.center_spread,
            g.cluster_sigma,
            g.noise,
            g.noise_rate,
            g.asym_group,
            render_usize_list(&t.hidden_dims),
            t.embed_dim,
            t.proj_dim,
            t.epochs,
            t.batch_size,
            t.initial_lr,
            render_usize_list(&t.lr_milestones),
            t.lr_factor,
            t.extra_decay_at_ssl,
            t.momentum,
            t.weight_decay,
            t.tau,
            t.alpha,
            t.knn_k,
            t.memory_size,
            t.ssl_start_epoch,
            balance,
            combine,
            t.no_ssl,
            t.no_memory,
            t.delta,
            t.finetune_epochs,
            t.bootstrap_start_epoch,
            t.finetune_lr,
            t.finetune_jitter,
            t.augment.jitter_sigma,
            t.augment.drop_prob,
            t.augment.scale_lo,
            t.augment.scale_hi,
            t.test_fraction,
            t.eval_knn_k,
            t.seed,
            t.threads,
            self.out_dir,
        )
    }
}
