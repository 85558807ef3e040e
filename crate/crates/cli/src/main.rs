use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use meb_core::config::ExperimentConfig;
use meb_core::experiment::{self, CHECKPOINT_DIR, PRETRAIN_DIR, SOURCE_FILE, TARGET_FILE};
use meb_core::train::Ablation;

/// Multi-expert mutual learning on a synthetic re-identification benchmark.
#[derive(Parser, Debug)]
#[command(name = "meb", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML, or JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source and target datasets.
    Gen,
    /// Train every expert on the labelled source domain.
    Pretrain,
    /// Adapt the pre-trained experts to the unlabelled target domain.
    Adapt {
        /// Comma-separated ablation flags, e.g. `no_ar` or `no_mid,no_mtri`.
        #[arg(long)]
        ablation: Option<String>,
        /// Write the last epoch's pseudo-labels as CSV.
        #[arg(long)]
        dump_clusters: bool,
    },
    /// Evaluate checkpoints on a domain's query/gallery split.
    Eval {
        /// Checkpoint directory; defaults to the pre-trained experts, which
        /// on the target domain gives the direct transfer numbers.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Domain to evaluate on.
        #[arg(long, default_value = "target", value_parser = ["source", "target"])]
        domain: String,
        /// Also write per-query average precision.
        #[arg(long)]
        per_query: bool,
    },
    /// Run the configured variants over the sweep seeds and tabulate.
    Sweep {
        /// Number of variants trained at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Gen => {
            experiment::run_gen(&cfg, &out)?;
            println!("wrote {} and {}", out.join(SOURCE_FILE).display(), out.join(TARGET_FILE).display());
        }
        Command::Pretrain => {
            let (experts, _) = experiment::run_pretrain(&cfg, &out)?;
            println!(
                "pre-trained {} experts into {}",
                experts.len(),
                out.join(PRETRAIN_DIR).display()
            );
        }
        Command::Adapt { ablation, dump_clusters } => {
            if let Some(a) = ablation {
                cfg.adapt.ablation = Ablation::parse(&a)?;
            }
            let report = experiment::run_adapt(&cfg, &out, dump_clusters)?;
            let last = report.epochs.last().context("no epochs recorded")?;
            println!(
                "[{}] epoch {}: mean mAP {:.4}, ensemble mAP {:.4} ({})",
                report.variant,
                last.epoch,
                last.mean_map(),
                last.ensemble.map,
                experiment::adapt_dir(&out, &cfg.adapt.ablation).display()
            );
        }
        Command::Eval {
            checkpoints,
            domain,
            per_query,
        } => {
            let (dir, name) = match checkpoints {
                Some(dir) => {
                    let name = dir
                        .parent()
                        .and_then(|p| p.file_name())
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "checkpoints".into());
                    (dir, name)
                }
                None => (out.join(PRETRAIN_DIR).join(CHECKPOINT_DIR), "pretrain".to_string()),
            };
            let file = if domain == "source" { SOURCE_FILE } else { TARGET_FILE };
            let name = format!("{name}-on-{domain}");
            let s = experiment::run_eval(&cfg, &out, &dir, file, &name, per_query)?;
            for (expert, e) in &s.experts {
                println!("{expert:>12}  mAP {:.4}  CMC@1 {:.4}  CMC@5 {:.4}  CMC@10 {:.4}", e.map, e.cmc1, e.cmc5, e.cmc10);
            }
            println!("{:>12}  mAP {:.4}  CMC@1 {:.4}", "ensemble", s.ensemble.map, s.ensemble.cmc1);
        }
        Command::Sweep { parallel } => {
            let outcome = experiment::run_sweep(&cfg, &out, parallel)?;
            println!("{:<20} {:>8} {:>8}", "method", "mAP", "CMC@1");
            for row in outcome.table.iter().filter(|r| r.expert == "mean") {
                println!("{:<20} {:>8.4} {:>8.4}", row.method, row.map, row.cmc1);
            }
            println!("table: {}", out.join(experiment::TABLE_FILE).display());
        }
    }
    info!("done");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
