use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dmwa_core::config::RunConfig;
use dmwa_core::data::{self, Dataset};
use dmwa_core::model::Model;
use dmwa_core::tensor::Precision;
use dmwa_core::train;

#[derive(Parser, Debug)]
#[command(name = "dmwa", version, about = "Train and evaluate weighted sketch/image retrieval models")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["literal", "attenuate"])]
    weight_mode: Option<String>,
    /// Pair scoring used by evaluation.
    #[arg(long, global = true, value_parser = ["cross", "fast"])]
    mode: Option<String>,
    /// Reject seen-class samples during evaluation.
    #[arg(long, global = true)]
    strict_zs: bool,
    /// Run the tape in 64-bit precision.
    #[arg(long, global = true)]
    f64: bool,
    /// Which encoder parameters the two modalities share.
    #[arg(long, global = true, value_parser = ["separate", "trunk", "full"])]
    encoder_sharing: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into --out.
    GenData,
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a checkpoint on the unseen split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the latest checkpoint under --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the per-sample weighting of the training set as CSV.
    DumpWeights {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Train and evaluate every ablation and write a comparison CSV.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run_config(opts: &GlobalOpts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    if let Some(m) = &opts.weight_mode {
        cfg.weight_mode = m.parse()?;
    }
    if let Some(m) = &opts.mode {
        cfg.score_mode = m.parse()?;
    }
    cfg.strict_zs |= opts.strict_zs;
    if let Some(s) = &opts.encoder_sharing {
        cfg.encoder_sharing = s.parse()?;
    }
    if opts.f64 {
        cfg.precision = Precision::F64;
    }
    for kv in &opts.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    let dir = data.as_ref().unwrap_or(&cfg.data);
    data::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_model(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Option<PathBuf>) -> Result<Model> {
    let dir = match checkpoint {
        Some(dir) => dir.clone(),
        None => train::latest_checkpoint(&cfg.out)
            .with_context(|| format!("no checkpoint given and none found under {}", cfg.out.display()))?,
    };
    info!("loading checkpoint {}", dir.display());
    Model::load(&dir, train::model_config(cfg, dataset)).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = run_config(&cli.global)?;
    match cli.command {
        Command::GenData => {
            let ds_cfg = data::DatasetConfig {
                seed: cfg.seed,
                ..cfg.dataset.clone()
            };
            let dataset = data::generate(&ds_cfg)?;
            data::save(&dataset, &cfg.out)?;
            info!(
                "wrote {} training pairs, {} queries, {} gallery images to {}",
                dataset.train.len(),
                dataset.queries.len(),
                dataset.gallery.len(),
                cfg.out.display()
            );
        }
        Command::Train { data } => {
            let dataset = load_data(&cfg, &data)?;
            let outcome = train::train(&cfg, &dataset, Some(&cfg.out))?;
            let means = train::epoch_mean_losses(&outcome.log);
            info!("trained {} steps; epoch mean losses {:?}", outcome.log.len(), means);
        }
        Command::Eval { data, checkpoint } => {
            let dataset = load_data(&cfg, &data)?;
            let model = load_model(&cfg, &dataset, &checkpoint)?;
            let report = train::evaluate(&model, &dataset, &cfg)?;
            let dir = cfg.out.join("eval");
            report.write(&dir, &format!("report_{}", cfg.score_mode))?;
            println!("{}", report.to_json());
        }
        Command::DumpWeights { data, checkpoint, epochs } => {
            let dataset = load_data(&cfg, &data)?;
            let model = load_model(&cfg, &dataset, &checkpoint)?;
            let rows = train::dump_weights(&model, &dataset, &cfg, epochs)?;
            let path = cfg.out.join("weights.csv");
            write(&path, &train::weights_csv(&rows))?;
            info!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Ablate { data } => {
            let dataset = load_data(&cfg, &data)?;
            let results = train::run_ablations(&cfg, &dataset, Some(&cfg.out))?;
            print!("{}", train::ablation_csv(&results));
        }
    }
    Ok(())
}
