use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::Serialize;
use spamtrail_core::corpus::{QuerySpec, TimeWindow};
use spamtrail_core::evalharness::{DELIVERY_WINDOW_SECS, SMS_LIMIT};
use spamtrail_core::screenshot::{DEFAULT_IOU_MATCH, DEFAULT_OVERLAP_THRESHOLD};
use spamtrail_core::srtc::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}: line {line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

const PATH_KEYS: &[&str] = &[
    "data_dir",
    "out",
    "corpus",
    "detections",
    "ocr",
    "labeled",
    "redirects",
    "threat",
    "replies",
    "accounts",
    "victim_services",
    "language_profiles",
    "phone_lookup",
    "blacklist",
    "suffix_list",
    "eval_dir",
];

const VALUE_KEYS: &[&str] = &[
    "keywords",
    "anchor",
    "require_images",
    "from",
    "to",
    "overlap_threshold",
    "iou_match",
    "score_cutoff",
    "max_hops",
    "hop_timeout_secs",
    "template_similarity",
    "folds",
    "epochs",
    "hidden_size",
    "batch_size",
    "learning_rate",
    "seed",
    "jobs",
    "receivers",
    "sms_limit",
    "delivery_window_secs",
];

/// `base/value` without `.` components.
fn join_clean(base: &Path, value: &str) -> PathBuf {
    base.join(value)
        .components()
        .filter(|c| !matches!(c, Component::CurDir))
        .collect()
}

/// Raw `key = value` settings. Later layers override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    /// Parse a flat config file. Relative paths are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Self::default();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: path.display().to_string(),
                line: idx + 1,
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    origin: path.display().to_string(),
                    line: idx + 1,
                });
            }
            let value = if PATH_KEYS.contains(&key) && Path::new(value).is_relative() {
                join_clean(base, value).display().to_string()
            } else {
                value.to_string()
            };
            out.set(key, value)?;
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !PATH_KEYS.contains(&key) && !VALUE_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn merge(&mut self, other: Settings) {
        self.0.extend(other.0);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| invalid(key, format!("{v:?}: {e}"))),
        }
    }
}

/// Every knob of a pipeline run, after defaults, file and flags are merged
/// and validated.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub corpus: PathBuf,
    pub detections: PathBuf,
    pub ocr: PathBuf,
    pub labeled: PathBuf,
    pub redirects: PathBuf,
    pub threat: PathBuf,
    pub replies: PathBuf,
    pub accounts: PathBuf,
    pub victim_services: PathBuf,
    pub language_profiles: PathBuf,
    pub phone_lookup: PathBuf,
    pub blacklist: PathBuf,
    pub suffix_list: PathBuf,
    pub eval_dir: PathBuf,
    pub query: QuerySpec,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub overlap_threshold: f64,
    pub iou_match: f64,
    pub score_cutoff: f64,
    pub max_hops: usize,
    pub hop_timeout_secs: u64,
    pub template_similarity: f64,
    pub folds: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub jobs: usize,
    pub receivers: Vec<String>,
    pub sms_limit: usize,
    pub delivery_window_secs: i64,
    pub live_urls: bool,
    pub live_sends: bool,
    #[serde(skip)]
    pub out: PathBuf,
}

fn unit_interval(key: &str, v: f64, zero_ok: bool) -> Result<f64, ConfigError> {
    let ok = if zero_ok {
        (0.0..=1.0).contains(&v)
    } else {
        v > 0.0 && v <= 1.0
    };
    if ok {
        Ok(v)
    } else {
        let range = if zero_ok { "[0, 1]" } else { "(0, 1]" };
        Err(invalid(key, format!("{v} outside {range}")))
    }
}

fn at_least<T: PartialOrd + std::fmt::Display>(key: &str, v: T, min: T) -> Result<T, ConfigError> {
    if v >= min {
        Ok(v)
    } else {
        Err(invalid(key, format!("{v} is below the minimum {min}")))
    }
}

fn list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl PipelineConfig {
    pub fn from_settings(
        s: &Settings,
        live_urls: bool,
        live_sends: bool,
    ) -> Result<Self, ConfigError> {
        let data_dir = PathBuf::from(s.get("data_dir").unwrap_or("data"));
        let path = |key: &str, default: &str| {
            s.get(key)
                .map(PathBuf::from)
                .unwrap_or_else(|| data_dir.join(default))
        };

        let keywords = match s.get("keywords") {
            Some(raw) => list(raw),
            None => QuerySpec::default().keyword_set.into_iter().collect(),
        };
        let anchor = s.get("anchor").unwrap_or("sms");
        let query = QuerySpec::new(keywords, anchor, s.parse("require_images", true)?)
            .map_err(|e| invalid("keywords", e.to_string()))?;

        let date = |key: &str| -> Result<Option<NaiveDate>, ConfigError> {
            s.get(key)
                .map(|v| {
                    NaiveDate::parse_from_str(v, "%Y-%m-%d")
                        .map_err(|e| invalid(key, format!("{v:?}: {e}")))
                })
                .transpose()
        };
        let (from, to) = (date("from")?, date("to")?);
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(invalid("from", format!("{f} is after to = {t}")));
            }
        }

        let defaults = TrainConfig::default();
        let seed = s.parse("seed", 7u64)?;
        let train = TrainConfig {
            learning_rate: s.parse("learning_rate", defaults.learning_rate)?,
            epochs: s.parse("epochs", defaults.epochs)?,
            hidden_size: at_least(
                "hidden_size",
                s.parse("hidden_size", defaults.hidden_size)?,
                1,
            )?,
            batch_size: at_least("batch_size", s.parse("batch_size", defaults.batch_size)?, 1)?,
            seed,
        };
        if !(train.learning_rate > 0.0 && train.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be a positive number"));
        }

        let receivers = list(s.get("receivers").unwrap_or("receiver-a,receiver-b"));
        if receivers.is_empty() {
            return Err(invalid("receivers", "at least one receiver is required"));
        }

        Ok(Self {
            corpus: path("corpus", "corpus.ndjson"),
            detections: path("detections", "detections.ndjson"),
            ocr: path("ocr", "ocr.ndjson"),
            labeled: path("labeled", "labeled.ndjson"),
            redirects: path("redirects", "redirects.ndjson"),
            threat: path("threat", "threat.ndjson"),
            replies: path("replies", "replies.ndjson"),
            accounts: path("accounts", "accounts.json"),
            victim_services: path("victim_services", "victim_services.json"),
            language_profiles: path("language_profiles", "language_profiles.json"),
            phone_lookup: path("phone_lookup", "phone_lookup.ndjson"),
            blacklist: path("blacklist", "blacklist.txt"),
            suffix_list: path("suffix_list", "suffixes.txt"),
            eval_dir: path("eval_dir", "eval"),
            out: PathBuf::from(s.get("out").unwrap_or("out")),
            data_dir,
            query,
            from,
            to,
            overlap_threshold: unit_interval(
                "overlap_threshold",
                s.parse("overlap_threshold", DEFAULT_OVERLAP_THRESHOLD)?,
                false,
            )?,
            iou_match: unit_interval("iou_match", s.parse("iou_match", DEFAULT_IOU_MATCH)?, false)?,
            score_cutoff: unit_interval("score_cutoff", s.parse("score_cutoff", 0.5)?, true)?,
            max_hops: at_least("max_hops", s.parse("max_hops", 10usize)?, 1)?,
            hop_timeout_secs: at_least("hop_timeout_secs", s.parse("hop_timeout_secs", 10u64)?, 1)?,
            template_similarity: unit_interval(
                "template_similarity",
                s.parse("template_similarity", 0.8)?,
                false,
            )?,
            folds: at_least("folds", s.parse("folds", 5usize)?, 2)?,
            train,
            seed,
            jobs: s.parse("jobs", 0usize)?,
            receivers,
            sms_limit: at_least("sms_limit", s.parse("sms_limit", SMS_LIMIT)?, 8)?,
            delivery_window_secs: at_least(
                "delivery_window_secs",
                s.parse("delivery_window_secs", DELIVERY_WINDOW_SECS)?,
                0,
            )?,
            live_urls,
            live_sends,
        })
    }

    /// The inclusive collection window; open ends are unbounded.
    pub fn window(&self) -> TimeWindow {
        let start = self
            .from
            .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc())
            .unwrap_or(DateTime::<Utc>::MIN_UTC);
        let end = self
            .to
            .map(|d| d.and_hms_opt(23, 59, 59).unwrap().and_utc())
            .unwrap_or(DateTime::<Utc>::MAX_UTC);
        TimeWindow::new(start, end).expect("from <= to is validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> Settings {
        let mut s = Settings::default();
        for (k, v) in pairs {
            s.set(k, *v).unwrap();
        }
        s
    }

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::from_settings(&Settings::default(), false, false).unwrap();
        assert_eq!(c.overlap_threshold, 0.75);
        assert_eq!(c.iou_match, 0.5);
        assert_eq!(c.score_cutoff, 0.5);
        assert_eq!(c.max_hops, 10);
        assert_eq!(c.corpus, PathBuf::from("data/corpus.ndjson"));
    }

    #[test]
    fn rejects_out_of_range_thresholds() {
        for (k, v) in [
            ("overlap_threshold", "1.5"),
            ("overlap_threshold", "0"),
            ("score_cutoff", "-0.1"),
            ("max_hops", "0"),
        ] {
            let err =
                PipelineConfig::from_settings(&settings(&[(k, v)]), false, false).unwrap_err();
            assert!(matches!(err, ConfigError::Invalid { .. }), "{k}={v}");
        }
    }

    #[test]
    fn rejects_reversed_window_and_unknown_keys() {
        let s = settings(&[("from", "2021-02-01"), ("to", "2021-01-01")]);
        assert!(PipelineConfig::from_settings(&s, false, false).is_err());
        assert!(matches!(
            Settings::default().set("overlap", "0.5"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn window_is_inclusive_by_day() {
        let c = PipelineConfig::from_settings(
            &settings(&[("from", "2021-01-01"), ("to", "2021-01-01")]),
            false,
            false,
        )
        .unwrap();
        let w = c.window();
        assert!(w.contains("2021-01-01T23:59:59Z".parse().unwrap()));
        assert!(!w.contains("2021-01-02T00:00:00Z".parse().unwrap()));
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = std::env::temp_dir().join(format!("spamtrail-config-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.conf");
        fs::write(
            &file,
            "# fixture run\ndata_dir = fixtures\nseed = 11\nkeywords = scam, spam\n",
        )
        .unwrap();
        let s = Settings::from_file(&file).unwrap();
        let c = PipelineConfig::from_settings(&s, false, false).unwrap();
        assert_eq!(c.data_dir, dir.join("fixtures"));
        assert_eq!(c.seed, 11);
        assert_eq!(c.query.keyword_set.len(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
