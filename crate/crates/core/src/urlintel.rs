//! URL intelligence: extraction from message text, redirect-chain
//! resolution, FQDN derivation, threat-report aggregation and timeliness of
//! threat-intel flagging relative to the first public report.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::OnceLock;
use std::time::Duration;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum UrlIntelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("url {0:?} has no host")]
    NoHost(String),
    #[error("unparseable url {url:?}: {reason}")]
    Unparseable { url: String, reason: String },
    #[error("threat lookup failed for {subject}: {reason}")]
    Lookup { subject: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

const BUNDLED_SUFFIXES: &str = include_str!("../data/bare_domain_suffixes.txt");

/// Top-level labels accepted for scheme-less URLs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixList(HashSet<String>);

impl SuffixList {
    pub fn parse(raw: &str) -> Self {
        Self(
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.trim_start_matches('.').to_ascii_lowercase())
                .collect(),
        )
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(&label.to_ascii_lowercase())
    }
}

impl Default for SuffixList {
    fn default() -> Self {
        Self::parse(BUNDLED_SUFFIXES)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedUrl {
    pub raw: String,
    pub normalized: String,
    pub source_message_id: String,
}

/// Canonical identity form: lowercase scheme and host, default port
/// dropped, a lone "/" path dropped; path case, query and fragment kept.
/// Scheme-less input gets `http://`.
pub fn normalize_url(raw: &str) -> Result<String, UrlIntelError> {
    let u = parse_lenient(raw)?;
    let host = u
        .host_str()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| UrlIntelError::NoHost(raw.to_string()))?;
    let mut s = format!("{}://", u.scheme());
    if !u.username().is_empty() {
        s.push_str(u.username());
        if let Some(p) = u.password() {
            s.push(':');
            s.push_str(p);
        }
        s.push('@');
    }
    s.push_str(host);
    if let Some(port) = u.port() {
        s.push_str(&format!(":{port}"));
    }
    if u.path() != "/" {
        s.push_str(u.path());
    }
    if let Some(q) = u.query() {
        s.push('?');
        s.push_str(q);
    }
    if let Some(f) = u.fragment() {
        s.push('#');
        s.push_str(f);
    }
    Ok(s)
}

fn has_scheme(raw: &str) -> bool {
    raw.find("://").is_some_and(|i| {
        i > 0
            && raw[..i]
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
    })
}

const OPAQUE_SCHEMES: [&str; 5] = ["mailto:", "tel:", "sms:", "data:", "javascript:"];

fn parse_lenient(raw: &str) -> Result<Url, UrlIntelError> {
    let lower = raw.trim_start().to_ascii_lowercase();
    let explicit = has_scheme(raw) || OPAQUE_SCHEMES.iter().any(|s| lower.starts_with(s));
    let candidate = if explicit {
        raw.to_string()
    } else {
        format!("http://{raw}")
    };
    Url::parse(&candidate).map_err(|e| UrlIntelError::Unparseable {
        url: raw.to_string(),
        reason: e.to_string(),
    })
}

/// Lowercased host, port stripped. IP literals come back as written by the
/// URL parser (IPv6 keeps its brackets).
pub fn fqdn_of(url: &str) -> Result<String, UrlIntelError> {
    let u = parse_lenient(url)?;
    match u.host_str() {
        Some(h) if !h.is_empty() => Ok(h.to_ascii_lowercase()),
        _ => Err(UrlIntelError::NoHost(url.to_string())),
    }
}

fn scheme_url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)\bhttps?://[^\s<>"'`]+"#).unwrap())
}

fn bare_url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)\b(?:[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?\.)+([a-z]{2,24})(?::[0-9]{1,5})?(?:/[^\s<>"'`]*)?"#)
            .unwrap()
    })
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', ')', ']', '}', '"', '\''];

fn trim_trailing(s: &str) -> &str {
    s.trim_end_matches(TRAILING_PUNCT)
}

/// Find URLs in free text: `http(s)://` URLs anywhere, plus bare
/// `host/path` tokens whose last host label is in `suffixes`. Results are in
/// order of appearance, one per distinct normalized URL.
pub fn extract_urls(
    text: &str,
    source_message_id: &str,
    suffixes: &SuffixList,
) -> Vec<ExtractedUrl> {
    let mut spans: Vec<(usize, &str)> = Vec::new();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for m in scheme_url_re().find_iter(text) {
        spans.push((m.start(), trim_trailing(m.as_str())));
        taken.push((m.start(), m.end()));
    }
    for caps in bare_url_re().captures_iter(text) {
        let m = caps.get(0).unwrap();
        if taken.iter().any(|&(s, e)| m.start() < e && s < m.end()) {
            continue;
        }
        let before = text[..m.start()].chars().next_back();
        if matches!(before, Some('@' | '.' | '-' | '_' | '/')) {
            continue;
        }
        if !suffixes.contains(caps.get(1).unwrap().as_str()) {
            continue;
        }
        spans.push((m.start(), trim_trailing(m.as_str())));
    }
    spans.sort_by_key(|&(start, _)| start);
    let mut seen = HashSet::new();
    spans
        .into_iter()
        .filter_map(|(_, raw)| {
            let normalized = normalize_url(raw).ok()?;
            seen.insert(normalized.clone()).then(|| ExtractedUrl {
                raw: raw.to_string(),
                normalized,
                source_message_id: source_message_id.to_string(),
            })
        })
        .collect()
}

/// The twenty most common shorteners in reported spam.
pub const DEFAULT_SHORTENERS: [&str; 20] = [
    "bit.ly",
    "s.id",
    "bit.do",
    "wa.me",
    "cutt.ly",
    "tse.l.me",
    "chat-v.com",
    "goo.gl",
    "www.bit.ly",
    "tiny.cc",
    "tinyurl.com",
    "is.gd",
    "nmc.sg",
    "x.co",
    "linksplit.io",
    "t.co",
    "lihi1.cc",
    "tny.sh",
    "rebrand.ly",
    "rb.gy",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortenerSet(HashSet<String>);

impl ShortenerSet {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(hosts: I) -> Self {
        Self(
            hosts
                .into_iter()
                .map(|h| h.as_ref().trim().to_ascii_lowercase())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ShortenerSet {
    fn default() -> Self {
        Self::new(DEFAULT_SHORTENERS)
    }
}

pub fn is_shortener(fqdn: &str, shorteners: &ShortenerSet) -> bool {
    shorteners.0.contains(&fqdn.trim().to_ascii_lowercase())
}

/// Fraction of `urls` hosted on a shortener. Unparseable URLs count as not
/// shortened.
pub fn shortener_share<S: AsRef<str>>(
    urls: &[S],
    shorteners: &ShortenerSet,
) -> Result<f64, UrlIntelError> {
    if urls.is_empty() {
        return Err(UrlIntelError::InvalidArgument(
            "shortener share of an empty URL list".into(),
        ));
    }
    let hits = urls
        .iter()
        .filter(|u| fqdn_of(u.as_ref()).is_ok_and(|h| is_shortener(&h, shorteners)))
        .count();
    Ok(hits as f64 / urls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    NoMoreRedirects,
    MaxHops,
    LoopDetected,
    NetworkError,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NetworkError,
    Timeout,
    InvalidLocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FinalStatus {
    Http(u16),
    Failure(FailureKind),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrlResolution {
    pub chain: Vec<String>,
    pub final_status: FinalStatus,
    pub hop_count: usize,
    pub terminated_by: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl UrlResolution {
    pub fn requested(&self) -> &str {
        &self.chain[0]
    }

    /// The landing URL, when the chain ran to a non-redirect response.
    pub fn landing_url(&self) -> Option<&str> {
        (self.terminated_by == Termination::NoMoreRedirects)
            .then(|| self.chain.last().unwrap().as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopResponse {
    pub status: u16,
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HopError {
    #[error("network error: {0}")]
    Network(String),
    #[error("timed out")]
    Timeout,
}

/// One un-followed request per hop. Implementations must be safe to call
/// from several threads at once.
pub trait RedirectClient: Send + Sync {
    fn head_or_get(&self, url: &str, timeout: Duration) -> Result<HopResponse, HopError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolveOptions {
    pub max_hops: usize,
    pub per_hop_timeout: Duration,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        Self {
            max_hops: 10,
            per_hop_timeout: Duration::from_secs(10),
        }
    }
}

/// Follow 3xx `Location` headers from `url`, recording every URL visited.
/// Failures end the chain and are reported in the result, never as errors.
pub fn resolve(url: &str, client: &dyn RedirectClient, opts: &ResolveOptions) -> UrlResolution {
    let start = normalize_url(url).unwrap_or_else(|_| url.to_string());
    let mut chain = vec![start];
    let finish = |chain: Vec<String>, final_status, terminated_by, detail| UrlResolution {
        hop_count: chain.len() - 1,
        chain,
        final_status,
        terminated_by,
        detail,
    };
    loop {
        let current = chain.last().unwrap().clone();
        let resp = match client.head_or_get(&current, opts.per_hop_timeout) {
            Ok(r) => r,
            Err(HopError::Timeout) => {
                return finish(
                    chain,
                    FinalStatus::Failure(FailureKind::Timeout),
                    Termination::Timeout,
                    None,
                )
            }
            Err(HopError::Network(e)) => {
                return finish(
                    chain,
                    FinalStatus::Failure(FailureKind::NetworkError),
                    Termination::NetworkError,
                    Some(e),
                )
            }
        };
        let location = match (resp.status, resp.location) {
            (300..=399, Some(loc)) => loc,
            (status, _) => {
                return finish(
                    chain,
                    FinalStatus::Http(status),
                    Termination::NoMoreRedirects,
                    None,
                )
            }
        };
        if chain.len() > opts.max_hops {
            return finish(
                chain,
                FinalStatus::Http(resp.status),
                Termination::MaxHops,
                None,
            );
        }
        let next = match Url::parse(&current).and_then(|base| base.join(location.trim())) {
            Ok(u) => normalize_url(u.as_str()).unwrap_or_else(|_| u.to_string()),
            Err(e) => {
                return finish(
                    chain,
                    FinalStatus::Failure(FailureKind::InvalidLocation),
                    Termination::NetworkError,
                    Some(format!("bad Location {location:?}: {e}")),
                )
            }
        };
        let looped = chain.contains(&next);
        chain.push(next);
        if looped {
            return finish(
                chain,
                FinalStatus::Http(resp.status),
                Termination::LoopDetected,
                None,
            );
        }
    }
}

/// Resolve many URLs; output order follows input order.
pub fn resolve_all<S: AsRef<str> + Sync>(
    urls: &[S],
    client: &dyn RedirectClient,
    opts: &ResolveOptions,
    exec: Execution,
) -> Vec<UrlResolution> {
    exec.map(urls, |u| resolve(u.as_ref(), client, opts))
}

/// Scripted hop responses, keyed by normalized URL. Unscripted URLs fail
/// with a network error so that nothing is silently treated as a landing.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRedirects {
    hops: HashMap<String, HopResponse>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedHop {
    pub url: String,
    pub status: u16,
    #[serde(default)]
    pub location: Option<String>,
}

impl ScriptedRedirects {
    pub fn new(hops: impl IntoIterator<Item = ScriptedHop>) -> Self {
        Self {
            hops: hops
                .into_iter()
                .map(|h| {
                    let key = normalize_url(&h.url).unwrap_or(h.url);
                    (
                        key,
                        HopResponse {
                            status: h.status,
                            location: h.location,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, UrlIntelError> {
        Ok(Self::new(read_ndjson::<ScriptedHop, _>(r)?))
    }
}

impl RedirectClient for ScriptedRedirects {
    fn head_or_get(&self, url: &str, _timeout: Duration) -> Result<HopResponse, HopError> {
        let key = normalize_url(url).unwrap_or_else(|_| url.to_string());
        self.hops
            .get(&key)
            .cloned()
            .ok_or_else(|| HopError::Network(format!("no scripted response for {key}")))
    }
}

/// Previously computed resolutions keyed by requested URL, so reruns need
/// no network.
#[derive(Debug, Clone, Default)]
pub struct ResolutionCache {
    entries: BTreeMap<String, UrlResolution>,
}

impl ResolutionCache {
    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, UrlIntelError> {
        let mut cache = Self::default();
        for res in read_ndjson::<UrlResolution, _>(r)? {
            if res.chain.is_empty() || res.hop_count + 1 != res.chain.len() {
                return Err(UrlIntelError::InvalidArgument(
                    "cached resolution with inconsistent chain".into(),
                ));
            }
            cache.insert(res);
        }
        Ok(cache)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), UrlIntelError> {
        for res in self.entries.values() {
            serde_json::to_writer(&mut w, res)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn get(&self, url: &str) -> Option<&UrlResolution> {
        let key = normalize_url(url).unwrap_or_else(|_| url.to_string());
        self.entries.get(&key)
    }

    pub fn insert(&mut self, res: UrlResolution) {
        self.entries.insert(res.requested().to_string(), res);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UrlResolution> {
        self.entries.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreatCategory {
    Malicious,
    Malware,
    Phishing,
}

impl ThreatCategory {
    pub const ALL: [ThreatCategory; 3] = [
        ThreatCategory::Malicious,
        ThreatCategory::Malware,
        ThreatCategory::Phishing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThreatCategory::Malicious => "malicious",
            ThreatCategory::Malware => "malware",
            ThreatCategory::Phishing => "phishing",
        }
    }
}

pub const DEFAULT_ENGINES_TOTAL: u32 = 83;

fn default_total() -> u32 {
    DEFAULT_ENGINES_TOTAL
}

/// Per-subject engine verdicts. Serialized in the threat-fixture wire
/// format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreatReport {
    pub subject: String,
    #[serde(rename = "positives")]
    pub engine_positives: u32,
    #[serde(rename = "total", default = "default_total")]
    pub engines_total: u32,
    #[serde(default)]
    pub categories: BTreeSet<ThreatCategory>,
    #[serde(default)]
    pub first_flag_date: Option<NaiveDate>,
}

impl ThreatReport {
    pub fn validate(&self) -> Result<(), UrlIntelError> {
        if self.engine_positives > self.engines_total {
            return Err(UrlIntelError::InvalidArgument(format!(
                "{}: {} positives out of {} engines",
                self.subject, self.engine_positives, self.engines_total
            )));
        }
        Ok(())
    }
}

/// Looks up engine verdicts for a URL or FQDN. Safe for concurrent use.
pub trait ThreatIntelClient: Send + Sync {
    fn lookup(&self, subject: &str) -> Result<Option<ThreatReport>, UrlIntelError>;
}

#[derive(Debug, Clone, Default)]
pub struct FixtureThreatIntel {
    reports: HashMap<String, ThreatReport>,
}

impl FixtureThreatIntel {
    pub fn new(reports: impl IntoIterator<Item = ThreatReport>) -> Result<Self, UrlIntelError> {
        let mut map = HashMap::new();
        for r in reports {
            r.validate()?;
            map.insert(subject_key(&r.subject), r);
        }
        Ok(Self { reports: map })
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, UrlIntelError> {
        Self::new(read_ndjson::<ThreatReport, _>(r)?)
    }
}

fn subject_key(subject: &str) -> String {
    if subject.contains('/') {
        normalize_url(subject).unwrap_or_else(|_| subject.to_string())
    } else {
        subject.trim().to_ascii_lowercase()
    }
}

impl ThreatIntelClient for FixtureThreatIntel {
    fn lookup(&self, subject: &str) -> Result<Option<ThreatReport>, UrlIntelError> {
        Ok(self.reports.get(&subject_key(subject)).cloned())
    }
}

/// Look up every subject; output order follows input order.
pub fn lookup_all<S: AsRef<str> + Sync>(
    subjects: &[S],
    client: &dyn ThreatIntelClient,
    exec: Execution,
) -> Result<Vec<Option<ThreatReport>>, UrlIntelError> {
    exec.map(subjects, |s| client.lookup(s.as_ref()))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub k: u32,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: ThreatCategory,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatTable {
    pub subjects: usize,
    pub vt_at_least: Vec<ThresholdRow>,
    pub categories: Vec<CategoryRow>,
}

pub const DEFAULT_VT_THRESHOLDS: [u32; 2] = [1, 5];

/// Share of subjects flagged by at least `k` engines, and per category.
/// The population is `subjects` together with every reported subject;
/// subjects without a report count as zero positives.
pub fn aggregate_threat<S: AsRef<str>>(
    subjects: &[S],
    reports: &[ThreatReport],
    k_thresholds: &[u32],
) -> ThreatTable {
    let mut population: BTreeMap<String, Option<&ThreatReport>> = subjects
        .iter()
        .map(|s| (subject_key(s.as_ref()), None))
        .collect();
    for r in reports {
        population.insert(subject_key(&r.subject), Some(r));
    }
    let n = population.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let vt_at_least = k_thresholds
        .iter()
        .map(|&k| {
            let count = population
                .values()
                .filter(|r| r.map_or(0, |r| r.engine_positives) >= k)
                .count();
            ThresholdRow {
                k,
                count,
                fraction: frac(count),
            }
        })
        .collect();
    let categories = ThreatCategory::ALL
        .iter()
        .map(|&category| {
            let count = population
                .values()
                .filter(|r| r.is_some_and(|r| r.categories.contains(&category)))
                .count();
            CategoryRow {
                category,
                count,
                fraction: frac(count),
            }
        })
        .collect();
    ThreatTable {
        subjects: n,
        vt_at_least,
        categories,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelinessPair {
    pub date_twitter: NaiveDate,
    pub date_vt: NaiveDate,
}

impl TimelinessPair {
    /// `date_vt - date_twitter` in whole days; positive when threat intel lags.
    pub fn t_gap_days(&self) -> i64 {
        (self.date_vt - self.date_twitter).num_days()
    }
}

pub const DEFAULT_GAP_THRESHOLDS: [i64; 5] = [-7, -1, 0, 1, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub threshold_days: i64,
    pub count: usize,
    pub fraction: f64,
}

/// For each threshold `d`, the share of pairs with a gap of at least `d` days.
pub fn timeliness(
    pairs: &[TimelinessPair],
    thresholds: &[i64],
) -> Result<Vec<GapRow>, UrlIntelError> {
    if pairs.is_empty() {
        return Err(UrlIntelError::InvalidArgument(
            "timeliness of an empty pair list".into(),
        ));
    }
    let gaps: Vec<i64> = pairs.iter().map(TimelinessPair::t_gap_days).collect();
    Ok(thresholds
        .iter()
        .map(|&d| {
            let count = gaps.iter().filter(|&&g| g >= d).count();
            GapRow {
                threshold_days: d,
                count,
                fraction: count as f64 / gaps.len() as f64,
            }
        })
        .collect())
}

/// Pair each flagged subject's first-flag date with its first report date.
pub fn timeliness_pairs(
    first_reported: &HashMap<String, NaiveDate>,
    reports: &[ThreatReport],
) -> Vec<TimelinessPair> {
    reports
        .iter()
        .filter_map(|r| {
            let date_vt = r.first_flag_date?;
            let date_twitter = *first_reported.get(&subject_key(&r.subject))?;
            Some(TimelinessPair {
                date_twitter,
                date_vt,
            })
        })
        .collect()
}

fn read_ndjson<T, R>(r: R) -> Result<Vec<T>, UrlIntelError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    crate::ndjson::read(r).map_err(|e| match e {
        crate::ndjson::NdjsonError::Io(e) => UrlIntelError::Io(e),
        crate::ndjson::NdjsonError::Json { source, .. } => UrlIntelError::Json(source),
    })
}

#[cfg(feature = "live")]
pub use live::{HttpRedirectClient, VirusTotalClient, VT_API_KEY_ENV};

#[cfg(feature = "live")]
mod live {
    use super::*;
    use base64::engine::general_purpose::URL_SAFE_NO_PAD;
    use base64::Engine;
    use std::sync::Mutex;
    use std::time::Instant;

    /// Enforces a minimum interval between requests to the same host.
    #[derive(Debug, Default)]
    struct HostThrottle {
        min_interval: Duration,
        next_slot: Mutex<HashMap<String, Instant>>,
    }

    impl HostThrottle {
        fn wait(&self, host: &str) {
            if self.min_interval.is_zero() {
                return;
            }
            let sleep_until = {
                let mut slots = self.next_slot.lock().unwrap();
                let now = Instant::now();
                let slot = slots.get(host).copied().filter(|t| *t > now).unwrap_or(now);
                slots.insert(host.to_string(), slot + self.min_interval);
                slot
            };
            let now = Instant::now();
            if sleep_until > now {
                std::thread::sleep(sleep_until - now);
            }
        }
    }

    /// Issues HEAD (falling back to GET when HEAD is refused) without
    /// following redirects.
    pub struct HttpRedirectClient {
        agent: ureq::Agent,
        throttle: HostThrottle,
    }

    impl HttpRedirectClient {
        pub fn new(per_host_min_interval: Duration) -> Self {
            let config = ureq::Agent::config_builder()
                .max_redirects(0)
                .http_status_as_error(false)
                .user_agent("Mozilla/5.0 (compatible; spamtrail-resolver)")
                .build();
            Self {
                agent: ureq::Agent::new_with_config(config),
                throttle: HostThrottle {
                    min_interval: per_host_min_interval,
                    ..Default::default()
                },
            }
        }

        fn once(
            &self,
            method: &str,
            url: &str,
            timeout: Duration,
        ) -> Result<HopResponse, HopError> {
            let result = if method == "HEAD" {
                self.agent
                    .head(url)
                    .config()
                    .timeout_global(Some(timeout))
                    .build()
                    .call()
            } else {
                self.agent
                    .get(url)
                    .config()
                    .timeout_global(Some(timeout))
                    .build()
                    .call()
            };
            match result {
                Ok(resp) => Ok(HopResponse {
                    status: resp.status().as_u16(),
                    location: resp
                        .headers()
                        .get("location")
                        .and_then(|v| v.to_str().ok())
                        .map(str::to_string),
                }),
                Err(ureq::Error::Timeout(_)) => Err(HopError::Timeout),
                Err(e) => Err(HopError::Network(e.to_string())),
            }
        }
    }

    impl RedirectClient for HttpRedirectClient {
        fn head_or_get(&self, url: &str, timeout: Duration) -> Result<HopResponse, HopError> {
            if let Ok(host) = fqdn_of(url) {
                self.throttle.wait(&host);
            }
            let head = self.once("HEAD", url, timeout)?;
            if matches!(head.status, 405 | 501) {
                return self.once("GET", url, timeout);
            }
            Ok(head)
        }
    }

    pub const VT_API_KEY_ENV: &str = "SPAMTRAIL_VT_API_KEY";
    const VT_BASE: &str = "https://www.virustotal.com/api/v3";

    /// VirusTotal v3 object lookups. URLs and bare hostnames map to the
    /// `urls` and `domains` collections respectively.
    pub struct VirusTotalClient {
        agent: ureq::Agent,
        key: String,
        base: String,
        throttle: HostThrottle,
    }

    impl VirusTotalClient {
        pub fn from_env(min_interval: Duration) -> Result<Self, UrlIntelError> {
            let key = std::env::var(VT_API_KEY_ENV).map_err(|_| UrlIntelError::Lookup {
                subject: String::new(),
                reason: format!("{VT_API_KEY_ENV} is not set"),
            })?;
            let config = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .build();
            Ok(Self {
                agent: ureq::Agent::new_with_config(config),
                key,
                base: VT_BASE.into(),
                throttle: HostThrottle {
                    min_interval,
                    ..Default::default()
                },
            })
        }
    }

    impl ThreatIntelClient for VirusTotalClient {
        fn lookup(&self, subject: &str) -> Result<Option<ThreatReport>, UrlIntelError> {
            let err = |reason: String| UrlIntelError::Lookup {
                subject: subject.to_string(),
                reason,
            };
            let path = if subject.contains('/') {
                format!("urls/{}", URL_SAFE_NO_PAD.encode(subject))
            } else {
                format!("domains/{subject}")
            };
            self.throttle.wait("virustotal");
            let mut resp = self
                .agent
                .get(&format!("{}/{path}", self.base))
                .header("x-apikey", &self.key)
                .call()
                .map_err(|e| err(e.to_string()))?;
            match resp.status().as_u16() {
                404 => return Ok(None),
                200 => {}
                s => return Err(err(format!("HTTP {s}"))),
            }
            let body: serde_json::Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| err(e.to_string()))?;
            Ok(Some(report_from_vt(subject, &body["data"]["attributes"])))
        }
    }

    pub(crate) fn report_from_vt(subject: &str, attrs: &serde_json::Value) -> ThreatReport {
        let stats = &attrs["last_analysis_stats"];
        let count = |k: &str| stats[k].as_u64().unwrap_or(0) as u32;
        let positives = count("malicious") + count("suspicious");
        let total = stats
            .as_object()
            .map(|m| m.values().filter_map(|v| v.as_u64()).sum::<u64>() as u32)
            .filter(|&t| t > 0)
            .unwrap_or(DEFAULT_ENGINES_TOTAL)
            .max(positives);
        let mut categories = BTreeSet::new();
        for verdict in attrs["last_analysis_results"]
            .as_object()
            .into_iter()
            .flat_map(|m| m.values())
        {
            match verdict["result"].as_str() {
                Some("malicious") => categories.insert(ThreatCategory::Malicious),
                Some("malware") => categories.insert(ThreatCategory::Malware),
                Some("phishing") => categories.insert(ThreatCategory::Phishing),
                _ => false,
            };
        }
        // The public API exposes no first-detection date; the first
        // submission date is the closest available proxy.
        let first_flag_date = (positives > 0)
            .then(|| attrs["first_submission_date"].as_i64())
            .flatten()
            .and_then(|ts| chrono::DateTime::from_timestamp(ts, 0))
            .map(|dt| dt.date_naive());
        ThreatReport {
            subject: subject.to_string(),
            engine_positives: positives,
            engines_total: total,
            categories,
            first_flag_date,
        }
    }

}
