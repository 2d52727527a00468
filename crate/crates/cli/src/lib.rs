//! Batch driver for the spamtrail pipeline. Every stage reads the NDJSON
//! written by the stage before it from the output directory and leaves a
//! manifest under `manifests/`.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod store;

use std::path::PathBuf;

use chrono::SecondsFormat;
use clap::{Parser, Subcommand};
use spamtrail_core::corpus::TweetRecord;
use spamtrail_core::Execution;

use crate::config::{PipelineConfig, Settings};
use crate::pipeline::{Context, Stage, COLLECTED};
use crate::store::{CliError, Result, Store};

#[derive(Debug, Parser)]
#[command(
    name = "spamtrail",
    version,
    about = "SMS spam intelligence from public spam reports"
)]
pub struct Cli {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads within a stage (1 runs sequentially, 0 uses every core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// First day of the collection window (YYYY-MM-DD, inclusive).
    #[arg(long, global = true)]
    pub from: Option<String>,
    /// Last day of the collection window (YYYY-MM-DD, inclusive).
    #[arg(long, global = true)]
    pub to: Option<String>,
    /// Resolve shortened URLs over the network instead of the redirect fixture.
    #[arg(long, global = true)]
    pub live_urls: bool,
    /// Send the evaluation set through the real bulk SMS endpoint configured
    /// in SPAMTRAIL_SMS_URL / SPAMTRAIL_SMS_KEY. Without it the simulated
    /// carrier is used.
    #[arg(long, global = true)]
    pub live_sends: bool,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Select keyword-matching tweets with images inside the window.
    Ingest,
    /// Keep tweets whose screenshots contain SMS text cells.
    Extract,
    /// Train the spam-report classifier and cross-validate it.
    ClassifyTrain,
    /// Classify tweets and read the messages out of their screenshots.
    Classify,
    /// Follow shortened URLs to their landing pages.
    ResolveUrls,
    /// Threat-intel verdicts, timeliness and sender typing.
    Enrich,
    /// URL-linked campaigns and template families.
    Cluster,
    /// Language, victim-service and reporter statistics.
    Stats,
    /// Anti-spam detection and carrier blocking evaluation.
    Eval,
    /// Every stage in order, plus a run manifest.
    All,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::Ingest => vec![Stage::Ingest],
            Command::Extract => vec![Stage::Extract],
            Command::ClassifyTrain => vec![Stage::ClassifyTrain],
            Command::Classify => vec![Stage::Classify],
            Command::ResolveUrls => vec![Stage::ResolveUrls],
            Command::Enrich => vec![Stage::Enrich],
            Command::Cluster => vec![Stage::Cluster],
            Command::Stats => vec![Stage::Stats],
            Command::Eval => vec![Stage::Eval],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

/// Merge defaults, the config file and flags into a validated config.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let mut flags = Settings::default();
    let path = |p: &PathBuf| p.display().to_string();
    if let Some(v) = &cli.data_dir {
        flags.set("data_dir", path(v))?;
    }
    if let Some(v) = &cli.out {
        flags.set("out", path(v))?;
    }
    if let Some(v) = cli.jobs {
        flags.set("jobs", v.to_string())?;
    }
    if let Some(v) = cli.seed {
        flags.set("seed", v.to_string())?;
    }
    if let Some(v) = &cli.from {
        flags.set("from", v.clone())?;
    }
    if let Some(v) = &cli.to {
        flags.set("to", v.clone())?;
    }
    settings.merge(flags);
    Ok(PipelineConfig::from_settings(
        &settings,
        cli.live_urls,
        cli.live_sends,
    )?)
}

fn execution(jobs: usize) -> Execution {
    if jobs == 1 {
        return Execution::Sequential;
    }
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    Execution::Parallel
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ctx = Context {
        cfg: &cfg,
        exec: execution(cfg.jobs),
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Output {
        path: cfg.out.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut store = Store::new(&cfg.out);
    let mut manifests = Vec::new();
    for stage in cli.command.stages() {
        ctx.run(stage, &mut store)?;
        let record = store.take_record();
        manifests.push(manifest::write_stage_manifest(
            &mut store,
            stage.name(),
            &cfg,
            record,
        )?);
        store.take_record();
    }
    if matches!(cli.command, Command::All) {
        let tweets: Vec<TweetRecord> = store.read_stage(COLLECTED, Stage::Ingest.name())?;
        let span = pipeline::tweet_span(&tweets).map(|(a, b)| {
            (
                a.to_rfc3339_opts(SecondsFormat::Secs, true),
                b.to_rfc3339_opts(SecondsFormat::Secs, true),
            )
        });
        let run = manifest::run_manifest(&store, &cfg, &manifests, span)?;
        store.write_json("manifest.json", &run)?;
        for s in &run.stages {
            tracing::info!(stage = %s.stage, count = s.count, "funnel");
        }
    }
    Ok(())
}
