//! `planlm`: run the writing-action pipeline one stage at a time.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use planlm::config::RunConfig;
use planlm::pipeline::{Workspace, SWEEP};
use planlm::Error;

#[derive(Parser, Debug)]
#[command(name = "planlm", version, about = "Writing-action planning for small language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact and manifest.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Base seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Accept upstream artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args, Debug, Default)]
struct RegimeFlags {
    /// none, fixed, oracle, predicted-oa or predicted-pa.
    #[arg(long)]
    regime: Option<String>,
    /// adapter or insert.
    #[arg(long)]
    style: Option<String>,
    /// external or internal (insert style only).
    #[arg(long)]
    locus: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the corpus (or generate the synthetic one), split it and build the vocabulary.
    Ingest,
    /// Embed every sentence.
    Embed,
    /// Fit the action centroids on the training sentences.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Assign every sentence its nearest action.
    Actions,
    /// Train the unconditioned base language model.
    PretrainLm,
    /// Train the next-action planner.
    TrainPlanner,
    /// Finetune the base model under a regime.
    Finetune(RegimeFlags),
    /// Continue evaluation articles and write the generations as JSON lines.
    Generate {
        #[command(flatten)]
        regime: RegimeFlags,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score a finetuned model and merge it into the evaluation report.
    Evaluate(RegimeFlags),
    /// Rank every action at every sentence under the oracle model.
    ScanOracle,
    /// List the sentences nearest to one action's centroid.
    InspectCluster {
        #[arg(long)]
        action: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Re-cluster, retrain and score at several cluster counts.
    SweepK {
        /// Comma-separated cluster counts.
        #[arg(long)]
        ks: Option<String>,
    },
    /// Every stage from ingestion to evaluation of the configured regime.
    Run(RegimeFlags),
}

fn set(cfg: &mut RunConfig, key: &str, value: Option<String>) -> planlm::Result<()> {
    match value {
        Some(v) => cfg.set(key, &v),
        None => Ok(()),
    }
}

fn apply_regime(cfg: &mut RunConfig, f: RegimeFlags) -> planlm::Result<()> {
    set(cfg, "regime", f.regime)?;
    set(cfg, "style", f.style)?;
    set(cfg, "locus", f.locus)
}

fn load_config(common: &Common) -> planlm::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.apply_overrides(common.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let ws_config = |cfg: RunConfig| -> planlm::Result<Workspace> {
        cfg.validate()?;
        let mut ws = Workspace::new(&cli.common.out_dir, cfg)?;
        ws.force = cli.common.force;
        Ok(ws)
    };
    match cli.command {
        Command::Ingest => ws_config(cfg)?.ingest()?,
        Command::Embed => ws_config(cfg)?.embed()?,
        Command::Cluster { k, max_iters, restarts } => {
            set(&mut cfg, "k", k.map(|v| v.to_string()))?;
            set(&mut cfg, "kmeans_max_iters", max_iters.map(|v| v.to_string()))?;
            set(&mut cfg, "kmeans_restarts", restarts.map(|v| v.to_string()))?;
            ws_config(cfg)?.cluster()?;
        }
        Command::Actions => ws_config(cfg)?.actions()?,
        Command::PretrainLm => ws_config(cfg)?.pretrain_lm()?,
        Command::TrainPlanner => ws_config(cfg)?.train_planner()?,
        Command::Finetune(r) => {
            apply_regime(&mut cfg, r)?;
            ws_config(cfg)?.finetune()?;
        }
        Command::Generate { regime, temperature, top_k } => {
            apply_regime(&mut cfg, regime)?;
            set(&mut cfg, "gen_temperature", temperature.map(|v| v.to_string()))?;
            set(&mut cfg, "gen_top_k", top_k.map(|v| v.to_string()))?;
            let records = ws_config(cfg)?.generate()?;
            println!("wrote {} generations", records.len());
        }
        Command::Evaluate(r) => {
            apply_regime(&mut cfg, r)?;
            let report = ws_config(cfg)?.evaluate()?;
            println!("{}", report.to_pretty_json()?);
        }
        Command::ScanOracle => {
            let (scan, noise) = ws_config(cfg)?.scan_oracle()?;
            println!(
                "oracle ppl {:.4}, mean oracle rank {:.3}, equivalent rank {}, best action ppl {:.4}, best noise ppl {:.4} (sigma {:.4})",
                scan.oracle_ppl, scan.mean_oracle_rank, scan.equivalent_rank, scan.curve[0], noise.curve[0], noise.sigma
            );
        }
        Command::InspectCluster { action, top } => {
            let report = ws_config(cfg)?.inspect_cluster(action, top)?;
            println!("{}", serde_json::to_string_pretty(&report).context("serializing cluster report")?);
        }
        Command::SweepK { ks } => {
            set(&mut cfg, "sweep_ks", ks)?;
            let ws = ws_config(cfg)?;
            ws.sweep_k()?;
            print!("{}", std::fs::read_to_string(ws.path(SWEEP))?);
        }
        Command::Run(r) => {
            apply_regime(&mut cfg, r)?;
            let report = ws_config(cfg)?.run_all()?;
            println!("{}", report.to_pretty_json()?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
