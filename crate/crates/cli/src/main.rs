use anyhow::Context;
use clap::{Parser, Subcommand};
use ndr_core::fixture::{synth_fixture, FixtureConfig};
use ndr_core::pipeline::{load_config, run_ablation, run_all, run_stage, Ablation, Pipeline, PipelineError, Stage};
use std::path::PathBuf;
use std::process::ExitCode;

/// Narrative-driven recommendation pipeline.
#[derive(Parser)]
#[command(name = "ndr", version)]
struct Cli {
    /// JSON configuration file; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train_bi.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run even when upstream artifacts no longer match their manifests.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for within-stage parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single stage.
    RunStage {
        /// ingest, select-users, gen-queries, filter-pairs, train-bi,
        /// mine-negatives, train-cross, index, retrieve, evaluate or report.
        stage: Stage,
    },
    /// Run every stage in order.
    RunAll,
    /// Run one ablation against an existing base run.
    Ablation {
        /// no-filter, per-item-qgen or weak-qgen.
        which: Ablation,
    },
    /// Print the effective configuration.
    ShowConfig,
    /// Write the synthetic planted-signal corpus and a matching config.
    SynthFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn pipeline(cli: &Cli) -> anyhow::Result<Pipeline> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    Ok(Pipeline::new(cfg)?.force(cli.force))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::RunStage { stage } => run_stage(&pipeline(&cli)?, *stage)?,
        Command::RunAll => {
            let p = pipeline(&cli)?;
            run_all(&p)?;
            let report = p.dir(Stage::Report).join("report.txt");
            print!("{}", std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?);
        }
        Command::Ablation { which } => {
            let dir = run_ablation(&pipeline(&cli)?, *which)?;
            let report = dir.join("report.txt");
            print!("{}", std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?);
        }
        Command::ShowConfig => {
            let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::SynthFixture { out, seed } => {
            let fx = synth_fixture(*seed, &FixtureConfig::default());
            let paths = fx.write(&out.join("data")).with_context(|| format!("writing {}", out.display()))?;
            let cfg = paths.pipeline_config(&out.join("work"), *seed);
            let cfg_path = out.join("config.json");
            std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)
                .with_context(|| format!("writing {}", cfg_path.display()))?;
            log::info!("{} items, {} reviews", fx.items.len(), fx.reviews.len());
            println!("{}", cfg_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
