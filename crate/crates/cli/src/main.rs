use std::path::{Path, PathBuf};

use aegan_core::config::{Aggregation, NormScheme, RunConfig};
use aegan_core::data::{synth_corpus, AnomalyType, SynthConfig, MANIFEST_FILE};
use aegan_core::detection::ScoreName;
use aegan_core::localization::Residual;
use aegan_core::pipeline::{self, SplitArg, StatsNet};
use aegan_core::store::write_json;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Anomalous machine-sound detection with an adversarially trained
/// autoencoder.
#[derive(Parser)]
#[command(name = "aegan", version)]
struct Cli {
    /// TOML run config; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, initialization and batch order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted anomalies.
    Synth(SynthArgs),
    /// Cut scaled log-mel segments and cache them per machine.
    Extract(ExtractArgs),
    /// Train the generator and critic of one machine.
    Train(TrainArgs),
    /// Score clips under all twelve score variants.
    Score(ScoreArgs),
    /// Choose the best score variant per machine and fit its threshold.
    Select(SelectArgs),
    /// AUC, pAUC and harmonic means of a score table.
    Evaluate(EvaluateArgs),
    /// Heatmaps of where a clip departs from the mean training spectrogram.
    Localize(LocalizeArgs),
    /// Export per-segment layer-norm statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    machine: Option<String>,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_anomaly: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    anomaly_types: Option<Vec<String>>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    anomaly_gain: Option<f64>,
    #[arg(long)]
    duration_secs: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these machine types (repeatable).
    #[arg(long)]
    machine: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    LnBoth,
    BnGeneratorLnCritic,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    machine: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, value_enum)]
    norm_scheme: Option<NormArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitFlag {
    Train,
    Dev,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Max,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    split: SplitFlag,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    lof_neighbors: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    #[arg(long)]
    shrinkage: Option<f64>,
}

#[derive(Args)]
struct SelectArgs {
    /// Labelled score tables (repeatable).
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    /// Training-split score tables used to fit the thresholds.
    #[arg(long)]
    train_scores: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_fpr: Option<f64>,
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    /// Selection file from `select`; without it and without
    /// `--score-name`, the best variant on these scores is used.
    #[arg(long, conflicts_with = "score_name")]
    selection: Option<PathBuf>,
    #[arg(long)]
    score_name: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_fpr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    ReconstructionVsMean,
    QueryVsReconstruction,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "reconstruction-vs-mean")]
    residual: ResidualArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Generator,
    Critic,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, value_enum)]
    net: NetArg,
    /// CSV with one row of statistics per segment.
    #[arg(long)]
    out: PathBuf,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Defaults, then the config file, then flags.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.train.seed, cli.seed);
    Ok(cfg)
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("expected output {} was not written", path.display());
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.machine, a.machine.clone());
    set(&mut cfg.n_normal, a.n_normal);
    set(&mut cfg.n_anomaly, a.n_anomaly);
    set(&mut cfg.domain_shift, a.domain_shift);
    set(&mut cfg.anomaly_gain, a.anomaly_gain);
    set(&mut cfg.duration_secs, a.duration_secs);
    if let Some(types) = &a.anomaly_types {
        cfg.anomaly_types = types
            .iter()
            .map(|t| t.parse::<AnomalyType>())
            .collect::<aegan_core::Result<_>>()?;
    }
    let rows = synth_corpus(&cfg, &a.out)?;
    write_json(&a.out.join("synth_config.json"), &cfg)?;
    require(&a.out.join(MANIFEST_FILE))?;
    let anomalies = rows.iter().filter(|r| r.anomaly_type.is_some()).count();
    println!(
        "wrote {} clips ({anomalies} anomalous) under {}",
        rows.len(),
        a.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Extract(a) => {
            let summary = pipeline::extract(&a.data, &a.out, &cfg, &a.machine)?;
            require(&a.out.join("extract_summary.json"))?;
            for m in &summary.machines {
                println!(
                    "{}: {} train clips ({} segments), {} test clips ({} segments)",
                    m.machine, m.train_clips, m.train_segments, m.test_clips, m.test_segments
                );
            }
            if !summary.skipped.is_empty() {
                println!(
                    "skipped {} files with unparseable names",
                    summary.skipped.len()
                );
            }
        }
        Command::Train(a) => {
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.learning_rate);
            if a.base_channels.is_some() || a.latent_dim.is_some() {
                let scheme = cfg.model.norm_scheme;
                cfg.model = aegan_core::config::ModelConfig {
                    norm_scheme: scheme,
                    ..aegan_core::config::ModelConfig::with_width(
                        a.base_channels.unwrap_or(cfg.model.base_channels),
                        a.latent_dim.unwrap_or(cfg.model.latent_dim),
                    )
                };
            }
            set(
                &mut cfg.model.norm_scheme,
                a.norm_scheme.map(|n| match n {
                    NormArg::LnBoth => NormScheme::LnBoth,
                    NormArg::BnGeneratorLnCritic => NormScheme::BnGeneratorLnCritic,
                }),
            );
            let summary = pipeline::train(&a.cache, &a.machine, &cfg, &a.out)?;
            require(&summary.checkpoint)?;
            println!(
                "{}: {} steps over {} epochs, final mse {:.5}; checkpoint {}",
                summary.machine,
                summary.steps,
                summary.epochs,
                summary.final_mse.unwrap_or(f64::NAN),
                summary.checkpoint.display()
            );
        }
        Command::Score(a) => {
            set(&mut cfg.detection.knn_k, a.knn_k);
            set(&mut cfg.detection.lof_neighbors, a.lof_neighbors);
            set(&mut cfg.detection.shrinkage, a.shrinkage);
            set(
                &mut cfg.detection.aggregation,
                a.aggregation.map(|m| match m {
                    AggregationArg::Mean => Aggregation::Mean,
                    AggregationArg::Max => Aggregation::Max,
                }),
            );
            let split = match a.split {
                SplitFlag::Train => SplitArg::Train,
                SplitFlag::Dev => SplitArg::Dev,
                SplitFlag::Eval => SplitArg::Eval,
            };
            let (_, summary) = pipeline::score(&a.ckpt, &a.data, split, &cfg, &a.out)?;
            require(&a.out)?;
            println!(
                "{} {}: scored {} clips ({} segments) into {}",
                summary.machine,
                summary.split,
                summary.clips,
                summary.segments,
                a.out.display()
            );
        }
        Command::Select(a) => {
            set(&mut cfg.evaluation.max_fpr, a.max_fpr);
            set(&mut cfg.detection.threshold_percentile, a.percentile);
            cfg.validate()?;
            let file = pipeline::select_files(&a.scores, &a.train_scores, &cfg, &a.out)?;
            require(&a.out)?;
            for (machine, m) in &file.machines {
                let threshold = m.threshold.map_or_else(
                    || "-".to_string(),
                    |t| {
                        format!(
                            "{:.6}{}",
                            t.value,
                            if t.degenerate { " (degenerate)" } else { "" }
                        )
                    },
                );
                println!(
                    "{machine}: {} (hmean {:.4}), threshold {threshold}",
                    m.selection.score_name, m.selection.hmean
                );
            }
        }
        Command::Evaluate(a) => {
            set(&mut cfg.evaluation.max_fpr, a.max_fpr);
            cfg.validate()?;
            let fixed = a
                .score_name
                .as_deref()
                .map(str::parse::<ScoreName>)
                .transpose()?;
            let summary =
                pipeline::evaluate_files(&a.scores, a.selection.as_deref(), fixed, &cfg, &a.out)?;
            require(&a.out.join("report.json"))?;
            print!("{}", summary.report.table());
        }
        Command::Localize(a) => {
            let residual = match a.residual {
                ResidualArg::ReconstructionVsMean => Residual::ReconstructionVsMean,
                ResidualArg::QueryVsReconstruction => Residual::QueryVsReconstruction,
            };
            let summary = pipeline::localize_clip(&a.ckpt, &a.clip, residual, &a.out)?;
            require(&a.out.join("clip.png"))?;
            println!(
                "{} segments, clip-level maximum {:.4}; images in {}",
                summary.segments.len(),
                summary.clip_max,
                a.out.display()
            );
        }
        Command::Stats(a) => {
            let net = match a.net {
                NetArg::Generator => StatsNet::Generator,
                NetArg::Critic => StatsNet::Critic,
            };
            let summary = pipeline::ln_stats(&a.ckpt, &a.clip, net, &a.out)?;
            require(&a.out)?;
            println!(
                "{} segments x {} features from {} layer-norm layers",
                summary.segments,
                summary.features,
                summary.layer_channels.len()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
