//! Command-line interface: generate / train / finetune / eval / detect.
//!
//! Exit codes are fixed for scriptability: 0 success, 2 usage errors,
//! 3 I/O failures, 4 parse errors (dataset or config files), 5 checkpoint
//! problems; anything else that goes wrong at runtime exits 1.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, NoiseKind};
use crate::data::{self, Dataset, Split};
use crate::detect;
use crate::error::{Error, Result};
use crate::model;
use crate::rng::Rng;
use crate::train::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "moit",
    about = "Label-noise robust training: interpolated contrastive learning, k-NN noise detection, semi-supervised classification, and clean-set fine-tuning",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blob dataset with optional planted label noise.
    Generate(GenerateArgs),
    /// Train on a dataset file; writes metrics.csv, model.ckpt,
    /// detection.csv, and the resolved config.
    Train(TrainArgs),
    /// Fine-tune a trained checkpoint on its detected clean set.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint: prints `classifier_acc,knn_acc` to stdout.
    Eval(EvalArgs),
    /// Run noise detection with a checkpoint's embeddings; emits a CSV.
    Detect(DetectArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Noise family: none, sym, asym.
    #[arg(long, default_value = "none")]
    noise: String,
    /// Flip probability.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    /// Center coordinates are drawn uniformly in [-spread, spread].
    #[arg(long, default_value_t = 5.0)]
    spread: f64,
    /// Per-coordinate Gaussian std within a cluster.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Group size of the circular asymmetric mapping (0 = all classes).
    #[arg(long, default_value_t = 0)]
    asym_group: usize,
    #[arg(long)]
    seed: u64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    /// Key = value config file applied over the defaults (CLI flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "ssl-start")]
    ssl_start: Option<usize>,
    /// Detection neighbor count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Clean-set balancing: median, min, max, none.
    #[arg(long)]
    balance: Option<String>,
    /// Batch/memory loss combination: sum, mean.
    #[arg(long)]
    combine: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Keep one-hot targets for every epoch (no pseudo-labeling).
    #[arg(long, default_value_t = false)]
    no_ssl: bool,
    /// Disable the contrastive memory bank.
    #[arg(long, default_value_t = false)]
    no_memory: bool,
    /// Worker threads (falls back to MOIT_THREADS, then 1).
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self, base_out_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            config.apply_text(&text)?;
        }
        let t = &mut config.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.ssl_start {
            t.ssl_start_epoch = v;
        }
        if let Some(v) = self.k {
            t.knn_k = v;
        }
        if let Some(v) = self.memory_size {
            t.memory_size = v;
        }
        if let Some(v) = self.tau {
            t.tau = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.lr {
            t.initial_lr = v;
        }
        if let Some(v) = &self.balance {
            t.balance = v.parse()?;
        }
        if let Some(v) = &self.combine {
            t.combine = match v.as_str() {
                "sum" => crate::losses::CombineMode::Sum,
                "mean" => crate::losses::CombineMode::Mean,
                other => return Err(Error::InvalidConfig(format!("unknown combine mode '{other}'"))),
            };
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.test_fraction {
            t.test_fraction = v;
        }
        if self.no_ssl {
            t.no_ssl = true;
        }
        if self.no_memory {
            t.no_memory = true;
        }
        t.threads = self
            .threads
            .or_else(|| {
                std::env::var("MOIT_THREADS")
                    .ok()
                    .and_then(|s| s.parse().ok())
            })
            .unwrap_or(t.threads);
        if let Some(dir) = base_out_dir {
            config.out_dir = dir.display().to_string();
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset file produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// detection.csv from the same `train` run.
    #[arg(long)]
    detection: PathBuf,
    /// The dataset the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Key = value config file applied over the defaults (CLI flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs before bootstrapping starts (delta = 1 until then).
    #[arg(long = "bootstrap-start")]
    bootstrap_start: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Constant fine-tuning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Must match the test fraction the checkpoint was trained with.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Neighbors for the weighted k-NN evaluation.
    #[arg(long, default_value_t = 200)]
    knn_k: usize,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Detection neighbor count.
    #[arg(long)]
    k: Option<usize>,
    /// Clean-set balancing: median, min, max, none.
    #[arg(long, default_value = "median")]
    balance: String,
    /// Fraction held out of the analyzed split (0 = analyze every sample).
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 0 for --help/--version and 2 for usage errors.
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Finetune(args) => cmd_finetune(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Detect(args) => cmd_detect(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::BadK { .. } | Error::InvalidMapping { .. } => 2,
        Error::Io(_) => 3,
        Error::Parse(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

/// `--threads` flag, then the MOIT_THREADS variable, then 1.
fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("MOIT_THREADS").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(1)
}

fn generate_dataset(gen: &crate::config::GenParams, seed: u64) -> Result<Dataset> {
    let mut dataset = data::make_blobs(
        gen.classes,
        gen.per_class,
        gen.dim,
        gen.center_spread,
        gen.cluster_sigma,
        seed,
    )?;
    match gen.noise {
        NoiseKind::None => {}
        NoiseKind::Symmetric => {
            data::inject_symmetric(&mut dataset, gen.noise_rate, &mut Rng::new(seed).derive(0x5e11))
        }
        NoiseKind::Asymmetric => {
            let mapping = data::circular_group_mapping(gen.classes, gen.asym_group);
            data::inject_asymmetric(&mut dataset, gen.noise_rate, &mapping, &mut Rng::new(seed).derive(0x5e11))?;
        }
    }
    Ok(dataset)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.rate) {
        return Err(Error::InvalidConfig("--rate must be in [0, 1]".into()));
    }
    if args.classes == 0 || args.per_class == 0 || args.dim == 0 {
        return Err(Error::InvalidConfig("--classes/--per-class/--dim must be positive".into()));
    }
    let gen = crate::config::GenParams {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        center_spread: args.spread,
        cluster_sigma: args.sigma,
        noise: args.noise.parse()?,
        noise_rate: args.rate,
        asym_group: args.asym_group,
    };
    let dataset = generate_dataset(&gen, args.seed)?;
    data::save_dataset(&dataset, &args.out)?;
    eprintln!(
        "wrote {} samples ({} classes, dim {}) to {}",
        dataset.len(),
        dataset.classes,
        dataset.dim(),
        args.out.display()
    );
    Ok(())
}

fn prepare_split(dataset: &mut Dataset, config: &TrainConfig) {
    if config.test_fraction > 0.0 {
        dataset.assign_splits(config.test_fraction);
    }
}

fn write_provenance(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.render())?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.overrides.resolve(Some(&args.out))?;
    config.train.validate()?;
    let dataset = data::load_dataset(&args.data)?;
    write_provenance(&config, &args.out)?;

    let output = train::train_moit(&config.train, &dataset)?;

    std::fs::write(args.out.join("metrics.csv"), train::metrics_csv(&output.metrics))?;
    model::save_checkpoint(&output.params, &args.out.join("model.ckpt"))?;
    let train_labels: Vec<usize> = output.train_indices.iter().map(|&i| dataset.labels[i]).collect();
    let mask = dataset.noise_mask();
    let train_mask: Vec<bool> = output.train_indices.iter().map(|&i| mask[i]).collect();
    std::fs::write(
        args.out.join("detection.csv"),
        detect::detection_csv(&output.detection, &train_labels, &train_mask),
    )?;
    if let Some(last) = output.metrics.last() {
        eprintln!(
            "trained {} epochs: test_acc {:.4}, knn_acc {:.4}, clean set {}",
            output.metrics.len(),
            last.test_acc,
            last.knn_acc,
            last.clean_size
        );
    }
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        config.apply_text(&text)?;
    }
    config.out_dir = args.out.display().to_string();
    if let Some(v) = args.epochs {
        config.train.finetune_epochs = v;
    }
    if let Some(v) = args.bootstrap_start {
        config.train.bootstrap_start_epoch = v;
    }
    if let Some(v) = args.delta {
        config.train.delta = v;
    }
    if let Some(v) = args.lr {
        config.train.finetune_lr = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.test_fraction {
        config.train.test_fraction = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    config.train.threads = args
        .threads
        .or_else(|| std::env::var("MOIT_THREADS").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(config.train.threads);
    config.train.validate()?;

    let params = model::load_checkpoint(&args.checkpoint)?;
    let mut dataset = data::load_dataset(&args.data)?;
    prepare_split(&mut dataset, &config.train);
    let train_indices = dataset.indices_of(Split::Train);

    let detection_text = std::fs::read_to_string(&args.detection)?;
    let selected = detect::parse_detection_csv_selected(&detection_text)?;
    if selected.len() != train_indices.len() {
        return Err(Error::Parse(format!(
            "detection.csv covers {} samples but the train split has {}; \
             use the test_fraction the checkpoint was trained with",
            selected.len(),
            train_indices.len()
        )));
    }
    let clean_global: Vec<usize> = train_indices
        .iter()
        .zip(&selected)
        .filter_map(|(&g, &s)| s.then_some(g))
        .collect();

    write_provenance(&config, &args.out)?;
    let (ft_params, metrics) =
        train::finetune_moit_plus(&params, &clean_global, &dataset, &config.train)?;
    std::fs::write(args.out.join("metrics.csv"), train::metrics_csv(&metrics))?;
    model::save_checkpoint(&ft_params, &args.out.join("model.ckpt"))?;

    // Report final quality even for a zero-epoch run.
    let (cls_acc, knn_acc) = train::evaluate_on_split(&ft_params, &dataset, config.train.eval_knn_k.min(train_indices.len()), config.train.threads)?;
    eprintln!("finetuned {} epochs: test_acc {cls_acc:.4}, knn_acc {knn_acc:.4}", metrics.len());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = model::load_checkpoint(&args.checkpoint)?;
    let mut dataset = data::load_dataset(&args.data)?;
    let test_fraction = args.test_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig("--test-fraction must be in [0, 1)".into()));
    }
    if test_fraction > 0.0 {
        dataset.assign_splits(test_fraction);
    }
    if params.input_dim() != dataset.dim() || params.classes() != dataset.classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects dim {} / {} classes, dataset has dim {} / {} classes",
            params.input_dim(),
            params.classes(),
            dataset.dim(),
            dataset.classes
        )));
    }
    let threads = resolve_threads(args.threads);
    let (cls_acc, knn_acc) = train::evaluate_on_split(&params, &dataset, args.knn_k, threads)?;
    println!("{cls_acc:.6},{knn_acc:.6}");
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let params = model::load_checkpoint(&args.checkpoint)?;
    let mut dataset = data::load_dataset(&args.data)?;
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(Error::InvalidConfig("--test-fraction must be in [0, 1)".into()));
    }
    if args.test_fraction > 0.0 {
        dataset.assign_splits(args.test_fraction);
    }
    if params.input_dim() != dataset.dim() || params.classes() != dataset.classes {
        return Err(Error::Checkpoint(
            "checkpoint dimensions do not match the dataset".into(),
        ));
    }
    let indices = dataset.indices_of(Split::Train);
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels[i]).collect();
    let mask = dataset.noise_mask();
    let split_mask: Vec<bool> = indices.iter().map(|&i| mask[i]).collect();
    let threads = resolve_threads(args.threads);

    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| dataset.features.row(i).to_vec()).collect();
    let inputs = crate::math::Matrix::from_rows(&rows);
    let passes = model::forward_batch(&params, &inputs, threads)?;
    let z = crate::math::Matrix::from_rows(&passes.iter().map(|p| p.unit.clone()).collect::<Vec<_>>());

    let default_k = TrainConfig::default().knn_k;
    let k = args
        .k
        .unwrap_or(default_k)
        .min((indices.len() / 4).max(2))
        .min(indices.len().saturating_sub(1));
    let result = detect::run_detection(&z, &labels, dataset.classes, k, args.balance.parse()?, threads)?;
    let csv = detect::detection_csv(&result, &labels, &split_mask);
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
