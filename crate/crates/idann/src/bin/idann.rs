//! Experiment CLI: single runs, sweeps, policy comparisons, feature
//! export, and pseudo-label scoring, all driven by a flat key-value
//! config file plus a few overriding flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idann::config::ExperimentConfig;
use idann::runner;
use idann::selection::PolicyTag;

#[derive(Parser)]
#[command(name = "idann", about = "Incremental domain-adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment config file (flat `key = value` with dotted sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the selection policy.
    #[arg(long)]
    policy: Option<String>,
    /// Override the neighbor count of the kNN policy.
    #[arg(long)]
    k: Option<usize>,
    /// Override the architecture id.
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end and write all reports.
    Run(CommonOpts),
    /// Run the (batch size x lambda0 x seed) grid from the config's sweep section.
    Sweep(CommonOpts),
    /// Compare the confidence and kNN selection policies on the same data and seeds.
    ComparePolicies {
        #[command(flatten)]
        common: CommonOpts,
        /// Seeds to average over (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write the feature representation of all samples as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: CommonOpts,
        /// Model checkpoint to restore (fresh initialization otherwise).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a pseudo-label CSV against the ground truth from the config.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Pseudo-label CSV written by `run`.
        #[arg(long)]
        labels: PathBuf,
    },
}

fn load_config(opts: &CommonOpts) -> idann::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
        cfg.hyperparams.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    if let Some(policy) = &opts.policy {
        cfg.hyperparams.policy = PolicyTag::parse(policy)?;
    }
    if let Some(k) = opts.k {
        cfg.hyperparams.k = k;
    }
    if let Some(arch) = &opts.arch {
        cfg.arch = idann::model::ArchitectureId::parse(arch)?;
    }
    cfg.hyperparams.validate()?;
    Ok(cfg)
}

fn real_main() -> idann::Result<()> {
    match Cli::parse().command {
        Command::Run(opts) => {
            let cfg = load_config(&opts)?;
            let outcome = runner::run(&cfg)?;
            println!("iterations: {}", outcome.summary.iterations);
            if let Some(acc) = outcome.summary.pseudo_label_acc {
                println!("pseudo-label accuracy: {acc:.4}");
            }
            if let Some(acc) = outcome.summary.final_cnn_acc {
                println!("final classifier accuracy: {acc:.4}");
            }
            println!("reports written to {}", cfg.out_dir.display());
        }
        Command::Sweep(opts) => {
            let cfg = load_config(&opts)?;
            let spec = cfg.sweep.clone().ok_or_else(|| {
                idann::Error::Config("config has no sweep section (sweep.batch_sizes etc.)".into())
            })?;
            let outcome = runner::sweep(&cfg, &spec)?;
            runner::write_sweep_reports(&cfg.out_dir, &outcome)?;
            for row in &outcome.rows {
                let acc = row
                    .mean_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into());
                let mut flags = String::new();
                if row.non_convergent {
                    flags.push_str(" [non-convergent]");
                }
                if row.crashed {
                    flags.push_str(" [crashed]");
                }
                println!("b={:<4} lambda0={:<8} acc={acc}{flags}", row.batch_size, row.lambda0);
            }
            println!("reports written to {}", cfg.out_dir.display());
        }
        Command::ComparePolicies { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let cmp = runner::compare_policies(&cfg, &seeds)?;
            runner::write_policy_report(&cfg.out_dir, &cmp)?;
            println!("confidence mean selected-label accuracy: {:.4}", cmp.confidence_mean);
            println!("knn mean selected-label accuracy: {:.4}", cmp.knn_mean);
            println!("mean gap (knn - confidence): {:+.4}", cmp.mean_gap);
            println!("reports written to {}", cfg.out_dir.display());
        }
        Command::ExportFeatures { common, checkpoint } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&cfg.out_dir)
                .map_err(|e| idann::Error::io(&cfg.out_dir, e))?;
            let out = cfg.out_dir.join("features.csv");
            runner::export_features(&cfg, checkpoint.as_deref(), &out)?;
            println!("features written to {}", out.display());
        }
        Command::Eval { common, labels } => {
            let cfg = load_config(&common)?;
            let acc = runner::eval_pseudo_labels(&cfg, &labels)?;
            println!("pseudo-label accuracy: {acc:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
