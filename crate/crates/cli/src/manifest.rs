use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::pipeline::{COLLECTED, MESSAGES, RECOGNIZED, SMS_IMAGES, SPAM_REPORTS};
use crate::store::{count_lines, CliError, Result, StageRecord, Store};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config: serde_json::Value,
    /// Input file → sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file → line count.
    pub outputs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub window_from: Option<String>,
    pub window_to: Option<String>,
    pub first_tweet: Option<String>,
    pub last_tweet: Option<String>,
}

/// Summary of a full run. Stage counts follow the tweet funnel and equal
/// the line counts of the named files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageCount>,
    pub distinct_messages: usize,
    pub timestamps: Timestamps,
}

pub const FUNNEL: [(&str, &str); 4] = [
    ("collected", COLLECTED),
    ("sms_image_tweets", SMS_IMAGES),
    ("spam_reporting", SPAM_REPORTS),
    ("messages_extracted", RECOGNIZED),
];

pub fn config_snapshot(cfg: &PipelineConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| CliError::Run(e.to_string()))
}

pub fn write_stage_manifest(
    store: &mut Store,
    stage: &str,
    cfg: &PipelineConfig,
    record: StageRecord,
) -> Result<StageManifest> {
    let manifest = StageManifest {
        stage: stage.to_string(),
        config: config_snapshot(cfg)?,
        inputs: record.inputs,
        outputs: record.outputs,
    };
    store.write_json(&format!("manifests/{stage}.json"), &manifest)?;
    Ok(manifest)
}

pub fn run_manifest(
    store: &Store,
    cfg: &PipelineConfig,
    stages: &[StageManifest],
    tweet_span: Option<(String, String)>,
) -> Result<RunManifest> {
    let mut inputs = BTreeMap::new();
    for s in stages {
        for (k, v) in &s.inputs {
            if !k.starts_with("out/") {
                inputs.insert(k.clone(), v.clone());
            }
        }
    }
    let counts = FUNNEL
        .iter()
        .map(|(stage, file)| {
            Ok(StageCount {
                stage: stage.to_string(),
                file: file.to_string(),
                count: count_lines(&store.path(file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (first_tweet, last_tweet) = tweet_span.unzip();
    Ok(RunManifest {
        config: config_snapshot(cfg)?,
        inputs,
        stages: counts,
        distinct_messages: count_lines(&store.path(MESSAGES))?,
        timestamps: Timestamps {
            window_from: cfg.from.map(|d| d.to_string()),
            window_to: cfg.to.map(|d| d.to_string()),
            first_tweet,
            last_tweet,
        },
    })
}
