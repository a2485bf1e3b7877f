mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::Run;
use config::RunConfig;

/// Sparse mixture-of-experts vulnerability detection toolkit: data
/// synthesis, two-stage training, inference, routing analysis, scoring and
/// explanation annotation.
#[derive(Parser, Debug)]
#[command(name = "moetune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Base {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/test instruction sets and annotation items.
    SynthData {
        #[command(flatten)]
        base: Base,
    },
    /// Continual pre-training of a dense model on the dataset's code.
    Pretrain {
        #[command(flatten)]
        base: Base,
        /// Dense checkpoint to continue from, or a model preset.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Turn a dense checkpoint into a mixture-of-experts checkpoint.
    Upcycle {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long = "top-k")]
        top_k: Option<usize>,
    },
    /// Tune experts and routers with the non-expert weights frozen.
    MoeTune {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Generate label and explanation for every dataset item.
    Infer {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        n_votes: Option<usize>,
    },
    /// Per-class expert histograms, entropy and dominant experts.
    AnalyzeRouting {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated layer indices.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Detection metrics from a predictions file.
    Eval {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Pairwise Cohen's kappa from a ratings CSV.
    Kappa {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Rating distribution, aggregation and divergence queue from a ratings CSV.
    Likert {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Build an explanation dataset from vulnerable code items.
    Annotate {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Total and activated parameter counts.
    ParamCount {
        #[command(flatten)]
        base: Base,
        /// Model preset or checkpoint.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long = "top-k")]
        top_k: Option<usize>,
    },
}

fn start(name: &'static str, base: &Base, edit: impl FnOnce(&mut RunConfig)) -> Result<Run> {
    let mut config = RunConfig::load(base.config.as_deref())?;
    if let Some(s) = base.seed {
        config.seed = s;
    }
    if let Some(d) = &base.out_dir {
        config.out_dir = Some(d.clone());
    }
    edit(&mut config);
    Run::new(name, config)
}

fn dispatch(cmd: Command) -> Result<PathBuf> {
    use Command::*;
    match cmd {
        SynthData { base } => commands::synth_data(start("synth-data", &base, |_| {})?),
        Pretrain { base, model, dataset } => commands::pretrain(start("pretrain", &base, |_| {})?, model, &dataset),
        Upcycle {
            base,
            model,
            experts,
            top_k,
        } => {
            let run = start("upcycle", &base, |c| {
                c.model.experts = experts.or(c.model.experts);
                c.model.top_k = top_k.or(c.model.top_k);
            })?;
            commands::upcycle(run, &model)
        }
        MoeTune {
            base,
            model,
            dataset,
            alpha,
        } => {
            let run = start("moe-tune", &base, |c| c.tune.alpha = alpha.or(c.tune.alpha))?;
            commands::moe_tune_cmd(run, &model, &dataset)
        }
        Infer {
            base,
            model,
            dataset,
            n_votes,
        } => {
            let run = start("infer", &base, |c| c.infer.n_votes = n_votes.unwrap_or(c.infer.n_votes))?;
            commands::infer(run, &model, &dataset)
        }
        AnalyzeRouting {
            base,
            model,
            dataset,
            layers,
        } => {
            let run = start("analyze-routing", &base, |c| {
                c.analyze.layers = layers.or(c.analyze.layers.take())
            })?;
            commands::analyze_routing(run, &model, &dataset)
        }
        Eval { base, dataset } => commands::eval(start("eval", &base, |_| {})?, &dataset),
        Kappa { base, dataset } => commands::kappa(start("kappa", &base, |_| {})?, &dataset),
        Likert { base, dataset } => commands::likert(start("likert", &base, |_| {})?, &dataset),
        Annotate { base, dataset } => commands::annotate(start("annotate", &base, |_| {})?, &dataset),
        ParamCount {
            base,
            model,
            experts,
            top_k,
        } => {
            let run = start("param-count", &base, |c| {
                c.model.experts = experts.or(c.model.experts);
                c.model.top_k = top_k.or(c.model.top_k);
            })?;
            commands::param_count(run, model)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(manifest) => {
            eprintln!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
