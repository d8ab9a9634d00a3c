use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tasgen::artifacts::Workspace;
use tasgen::config::{standard_config, PipelineConfig};
use tasgen::pipeline::{self, Prepared};
use tasgen::report::emit_plots;
use tasgen::robustness::{protocols, robustness_suite, Protocol};
use tasgen::{HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "tasgen",
    version,
    about = "Anomaly-aware dynamic relabeling of satellite time series"
)]
struct Cli {
    /// TOML or JSON pipeline config; defaults to the standard synthetic fixture.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesise the sample set.
    Generate,
    /// Pretrain the curation autoencoder.
    Pretrain,
    /// Train the feature model and per-class detectors.
    Train,
    /// Compute baselines and per-cell scores.
    Score,
    /// Threshold scores into anomaly flags.
    Detect,
    /// Gibbs attribution of flagged runs.
    Attribute,
    /// Significance filter, classifier and relabeling.
    Relabel,
    /// Metrics against the ground truth.
    Evaluate,
    /// Degraded-input protocols on the trained detectors.
    Robustness {
        /// Overrides the configured list, e.g. `decimate:2`.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
    },
    /// SVG figures and an HTML index.
    Report,
    /// Every stage from data to evaluation.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => standard_config(cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.output_dir)?;
    let prepared = || Prepared::load(&ws);
    match &cli.command {
        Command::Generate => {
            pipeline::stage_generate(&cfg, &ws)?;
        }
        Command::Pretrain => {
            pipeline::stage_pretrain(&cfg, &ws, &prepared()?)?;
        }
        Command::Train => pipeline::stage_train(&cfg, &ws, &prepared()?)?,
        Command::Score => {
            pipeline::stage_score(&cfg, &ws, &prepared()?)?;
        }
        Command::Detect => {
            pipeline::stage_detect(&cfg, &ws, &prepared()?)?;
        }
        Command::Attribute => {
            pipeline::stage_attribute(&cfg, &ws, &prepared()?)?;
        }
        Command::Relabel => {
            pipeline::stage_relabel(&cfg, &ws, &prepared()?)?;
        }
        Command::Evaluate => {
            let r = pipeline::stage_evaluate(&cfg, &ws, &prepared()?)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Robustness { protocols: names } => {
            let list = if names.is_empty() {
                protocols(&cfg)?
            } else {
                names
                    .iter()
                    .map(|s| Protocol::parse(s))
                    .collect::<Result<_>>()?
            };
            for o in robustness_suite(&cfg, &ws, &list)? {
                match (o.report, o.error) {
                    (Some(r), _) => println!("{:<14} F1-A {:.4}", o.protocol, r.f1_a),
                    (None, e) => println!("{:<14} failed: {}", o.protocol, e.unwrap_or_default()),
                }
            }
        }
        Command::Report => {
            let summary = emit_plots(&ws)?;
            for w in &summary.warnings {
                log::warn!("{w}");
            }
            println!("wrote {} files", summary.files.len());
        }
        Command::Pipeline => {
            let r = pipeline::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", report_chain(&e));
            ExitCode::from(e.exit_code())
        }
    }
}

fn report_chain(e: &HarnessError) -> String {
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        src = s.source();
    }
    msg
}
