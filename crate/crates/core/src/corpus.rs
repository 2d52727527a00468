//! Tweet corpus ingestion: NDJSON parsing, the collector's keyword query,
//! time windowing and message deduplication.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{self, utc_seconds};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tweet search failed: {0}")]
    Search(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub location: String,
    pub width_px: u32,
    pub height_px: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub text: String,
    #[serde(with = "utc_seconds")]
    pub created_at: DateTime<Utc>,
    pub author_id: String,
    pub conversation_id: String,
    #[serde(default)]
    pub attachments: Vec<ImageRef>,
    #[serde(default)]
    pub tagged_accounts: Vec<String>,
    #[serde(default)]
    pub source_agent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_country: Option<String>,
}

impl TweetRecord {
    /// Check the per-record invariants. Corpus-level uniqueness of
    /// `tweet_id` is checked by [`parse_corpus`].
    pub fn validate(&self) -> Result<(), String> {
        if self.tweet_id.trim().is_empty() {
            return Err("empty tweet_id".into());
        }
        let mut seen = HashSet::new();
        for handle in &self.tagged_accounts {
            if handle.starts_with('@') {
                return Err(format!("tagged account {handle:?} carries an '@' prefix"));
            }
            if handle.is_empty() {
                return Err("empty tagged account".into());
            }
            if !seen.insert(handle.as_str()) {
                return Err(format!("duplicate tagged account {handle:?}"));
            }
        }
        let mut images = HashSet::new();
        for img in &self.attachments {
            if img.width_px == 0 || img.height_px == 0 {
                return Err(format!("image {:?} has a zero dimension", img.image_id));
            }
            if !images.insert(img.image_id.as_str()) {
                return Err(format!("duplicate image id {:?}", img.image_id));
            }
        }
        if let Some(cc) = &self.geo_country {
            if cc.len() != 2 || !cc.chars().all(|c| c.is_ascii_uppercase()) {
                return Err(format!("geo_country {cc:?} is not an ISO alpha-2 code"));
            }
        }
        Ok(())
    }
}

/// A reply observed in a tweet's conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub conversation_id: String,
    pub author_id: String,
    #[serde(with = "utc_seconds")]
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub keyword_set: BTreeSet<String>,
    pub anchor_token: String,
    pub require_images: bool,
}

pub const DEFAULT_KEYWORDS: [&str; 7] = [
    "malicious",
    "spam",
    "phish",
    "phishing",
    "smish",
    "scam",
    "fraud",
];

impl Default for QuerySpec {
    fn default() -> Self {
        Self {
            keyword_set: DEFAULT_KEYWORDS.iter().map(|k| k.to_string()).collect(),
            anchor_token: "sms".into(),
            require_images: true,
        }
    }
}

impl QuerySpec {
    pub fn new<I, S>(keywords: I, anchor: &str, require_images: bool) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let keyword_set: BTreeSet<String> = keywords
            .into_iter()
            .map(|k| k.as_ref().trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        if keyword_set.is_empty() {
            return Err(CorpusError::InvalidArgument("keyword set is empty".into()));
        }
        let anchor_token = anchor.trim().to_lowercase();
        if anchor_token.is_empty() {
            return Err(CorpusError::InvalidArgument("anchor token is empty".into()));
        }
        Ok(Self {
            keyword_set,
            anchor_token,
            require_images,
        })
    }

    /// The search-API query string this spec corresponds to.
    pub fn to_search_query(&self) -> String {
        let kws: Vec<&str> = self.keyword_set.iter().map(String::as_str).collect();
        let mut q = format!("({}) {}", kws.join(" OR "), self.anchor_token);
        if self.require_images {
            q.push_str(" has:images");
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    /// 1-based line number in the input stream.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub records: Vec<TweetRecord>,
    pub skips: Vec<SkippedLine>,
}

/// Parse an NDJSON tweet stream. Malformed or invalid lines are skipped and
/// reported; blank lines are ignored silently.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut out = ParsedCorpus::default();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut skip = |reason: String| {
            tracing::warn!(line = lineno, %reason, "skipping corpus line");
            out.skips.push(SkippedLine {
                line: lineno,
                reason,
            });
        };
        let record: TweetRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                skip(format!("malformed JSON: {e}"));
                continue;
            }
        };
        if let Err(reason) = record.validate() {
            skip(reason);
            continue;
        }
        if !ids.insert(record.tweet_id.clone()) {
            skip(format!("duplicate tweet_id {:?}", record.tweet_id));
            continue;
        }
        out.records.push(record);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(records: &[TweetRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn matches_query(record: &TweetRecord, q: &QuerySpec) -> bool {
    if q.require_images && record.attachments.is_empty() {
        return false;
    }
    let mut has_anchor = false;
    let mut has_keyword = false;
    for tok in text::tokens(&record.text) {
        has_anchor |= tok == q.anchor_token;
        has_keyword |= q.keyword_set.contains(&tok);
        if has_anchor && has_keyword {
            return true;
        }
    }
    false
}

/// Inclusive UTC time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, CorpusError> {
        if start > end {
            return Err(CorpusError::InvalidArgument(format!(
                "window start {start} is after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        self.start <= ts && ts <= self.end
    }
}

pub fn filter_window(
    records: &[TweetRecord],
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<Vec<TweetRecord>, CorpusError> {
    let window = TimeWindow::new(start, end)?;
    Ok(records
        .iter()
        .filter(|r| window.contains(r.created_at))
        .cloned()
        .collect())
}

/// Keep the first occurrence of each whitespace-normalized text. Returned
/// strings are the normalized form.
pub fn dedup_messages<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    texts
        .iter()
        .map(|t| text::collapse_whitespace(t.as_ref()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TweetPage {
    pub records: Vec<TweetRecord>,
    pub next_token: Option<String>,
}

/// A paginated tweet search backend.
pub trait TweetSource {
    fn search(
        &self,
        query: &QuerySpec,
        window: &TimeWindow,
        pagination_token: Option<&str>,
    ) -> Result<TweetPage, CorpusError>;

    /// Drain every page.
    fn search_all(
        &self,
        query: &QuerySpec,
        window: &TimeWindow,
    ) -> Result<Vec<TweetRecord>, CorpusError> {
        let mut out = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let page = self.search(query, window, token.as_deref())?;
            out.extend(page.records);
            match page.next_token {
                Some(t) => token = Some(t),
                None => return Ok(out),
            }
        }
    }
}

/// Serves a local corpus with the same query and window semantics as the
/// live search. Pagination tokens are decimal offsets.
#[derive(Debug, Clone)]
pub struct FixtureTweetSource {
    records: Vec<TweetRecord>,
    page_size: usize,
}

impl FixtureTweetSource {
    pub fn new(records: Vec<TweetRecord>, page_size: usize) -> Self {
        Self {
            records,
            page_size: page_size.max(1),
        }
    }
}

impl TweetSource for FixtureTweetSource {
    fn search(
        &self,
        query: &QuerySpec,
        window: &TimeWindow,
        pagination_token: Option<&str>,
    ) -> Result<TweetPage, CorpusError> {
        let offset = match pagination_token {
            None => 0,
            Some(t) => t
                .parse::<usize>()
                .map_err(|_| CorpusError::InvalidArgument(format!("bad pagination token {t:?}")))?,
        };
        let matching: Vec<&TweetRecord> = self
            .records
            .iter()
            .filter(|r| window.contains(r.created_at) && matches_query(r, query))
            .collect();
        let end = (offset + self.page_size).min(matching.len());
        let records = matching
            .get(offset..end)
            .unwrap_or(&[])
            .iter()
            .map(|r| (*r).clone())
            .collect();
        let next_token = (end < matching.len()).then(|| end.to_string());
        Ok(TweetPage {
            records,
            next_token,
        })
    }
}

#[cfg(feature = "live")]
pub use live::{ArchiveSearchClient, BEARER_TOKEN_ENV};

/// Full-archive search over the v2 tweets API.
#[cfg(feature = "live")]
mod live {
    use super::*;
    use chrono::SecondsFormat;
    use serde_json::Value;

    pub const BEARER_TOKEN_ENV: &str = "SPAMTRAIL_TWITTER_BEARER_TOKEN";
    const ENDPOINT: &str = "https://api.twitter.com/2/tweets/search/all";

    pub struct ArchiveSearchClient {
        agent: ureq::Agent,
        bearer: String,
        endpoint: String,
    }

    impl ArchiveSearchClient {
        pub fn from_env() -> Result<Self, CorpusError> {
            let bearer = std::env::var(BEARER_TOKEN_ENV)
                .map_err(|_| CorpusError::Search(format!("{BEARER_TOKEN_ENV} is not set")))?;
            Ok(Self {
                agent: ureq::Agent::new_with_defaults(),
                bearer,
                endpoint: ENDPOINT.into(),
            })
        }

        pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
            self.endpoint = endpoint.into();
            self
        }
    }

    impl TweetSource for ArchiveSearchClient {
        fn search(
            &self,
            query: &QuerySpec,
            window: &TimeWindow,
            pagination_token: Option<&str>,
        ) -> Result<TweetPage, CorpusError> {
            let mut req = self
                .agent
                .get(&self.endpoint)
                .header("Authorization", &format!("Bearer {}", self.bearer))
                .query("query", query.to_search_query())
                .query(
                    "start_time",
                    window.start.to_rfc3339_opts(SecondsFormat::Secs, true),
                )
                .query(
                    "end_time",
                    window.end.to_rfc3339_opts(SecondsFormat::Secs, true),
                )
                .query("max_results", "100")
                .query(
                    "tweet.fields",
                    "created_at,author_id,conversation_id,entities,attachments,source,geo",
                )
                .query("expansions", "attachments.media_keys,geo.place_id")
                .query("media.fields", "url,width,height,type")
                .query("place.fields", "country_code");
            if let Some(t) = pagination_token {
                req = req.query("next_token", t);
            }
            let body: Value = req
                .call()
                .map_err(|e| CorpusError::Search(e.to_string()))?
                .body_mut()
                .read_json()
                .map_err(|e| CorpusError::Search(e.to_string()))?;
            Ok(page_from_v2_response(&body))
        }
    }

    /// Map a v2 search response onto records. Tweets that fail validation
    /// are dropped.
    pub(crate) fn page_from_v2_response(body: &Value) -> TweetPage {
        let media = body["includes"]["media"]
            .as_array()
            .cloned()
            .unwrap_or_default();
        let places = body["includes"]["places"]
            .as_array()
            .cloned()
            .unwrap_or_default();
        let mut records = Vec::new();
        for t in body["data"].as_array().into_iter().flatten() {
            let s = |k: &str| t[k].as_str().unwrap_or_default().to_string();
            let Ok(created_at) = utc_seconds::parse(t["created_at"].as_str().unwrap_or_default())
            else {
                continue;
            };
            let mut attachments = Vec::new();
            for key in t["attachments"]["media_keys"]
                .as_array()
                .into_iter()
                .flatten()
            {
                let Some(m) = media.iter().find(|m| m["media_key"] == *key) else {
                    continue;
                };
                if m["type"] != "photo" {
                    continue;
                }
                attachments.push(ImageRef {
                    image_id: m["media_key"].as_str().unwrap_or_default().to_string(),
                    location: m["url"].as_str().unwrap_or_default().to_string(),
                    width_px: m["width"].as_u64().unwrap_or(0) as u32,
                    height_px: m["height"].as_u64().unwrap_or(0) as u32,
                });
            }
            let mut tagged_accounts: Vec<String> = Vec::new();
            for m in t["entities"]["mentions"].as_array().into_iter().flatten() {
                if let Some(u) = m["username"].as_str() {
                    if !tagged_accounts.iter().any(|h| h == u) {
                        tagged_accounts.push(u.to_string());
                    }
                }
            }
            let geo_country = t["geo"]["place_id"].as_str().and_then(|pid| {
                places
                    .iter()
                    .find(|p| p["id"] == pid)
                    .and_then(|p| p["country_code"].as_str())
                    .map(str::to_string)
            });
            let record = TweetRecord {
                tweet_id: s("id"),
                text: s("text"),
                created_at,
                author_id: s("author_id"),
                conversation_id: s("conversation_id"),
                attachments,
                tagged_accounts,
                source_agent: s("source"),
                geo_country,
            };
            if record.validate().is_ok() {
                records.push(record);
            }
        }
        let next_token = body["meta"]["next_token"].as_str().map(str::to_string);
        TweetPage {
            records,
            next_token,
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn rec(id: &str, text: &str, images: usize) -> TweetRecord {
        TweetRecord {
            tweet_id: id.into(),
            text: text.into(),
            created_at: Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap(),
            author_id: "a".into(),
            conversation_id: id.into(),
            attachments: (0..images)
                .map(|i| ImageRef {
                    image_id: format!("img{i}"),
                    location: format!("{id}_{i}.png"),
                    width_px: 10,
                    height_px: 10,
                })
                .collect(),
            tagged_accounts: vec![],
            source_agent: "Twitter for iPhone".into(),
            geo_country: None,
        }
    }

    #[test]
    fn query_examples() {
        let q = QuerySpec::default();
        assert!(matches_query(&rec("1", "Got this scam SMS today", 1), &q));
        assert!(!matches_query(&rec("2", "this sms looks odd", 1), &q));
        assert!(!matches_query(&rec("3", "phishing sms alert!", 0), &q));
        let q_no_img = QuerySpec {
            require_images: false,
            ..QuerySpec::default()
        };
        assert!(matches_query(
            &rec("3", "phishing sms alert!", 0),
            &q_no_img
        ));
    }

    #[test]
    fn whole_token_match_only() {
        let q = QuerySpec::default();
        assert!(!matches_query(&rec("1", "sms from a phisher", 1), &q));
        assert!(!matches_query(&rec("1", "smsscam", 1), &q));
    }

    #[test]
    fn search_query_string() {
        assert_eq!(
            QuerySpec::default().to_search_query(),
            "(fraud OR malicious OR phish OR phishing OR scam OR smish OR spam) sms has:images"
        );
    }

    #[test]
    fn query_spec_rejects_empty() {
        assert!(QuerySpec::new(Vec::<&str>::new(), "sms", true).is_err());
        assert!(QuerySpec::new(["spam"], "  ", true).is_err());
    }

    #[test]
    fn parse_counts_skips() {
        let good = serde_json::to_string(&rec("1", "x", 0)).unwrap();
        let good2 = serde_json::to_string(&rec("2", "y", 0)).unwrap();
        let input = format!("{good}\n{{\"tweet_id\": \"9\", \"te\n{good2}\n");
        let parsed = parse_corpus(input.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.skips.len(), 1);
        assert_eq!(parsed.skips[0].line, 2);
    }

    #[test]
    fn parse_empty_and_single() {
        let parsed = parse_corpus(&b""[..]).unwrap();
        assert!(parsed.records.is_empty() && parsed.skips.is_empty());
        let one = serde_json::to_string(&rec("1", "x", 1)).unwrap();
        assert_eq!(parse_corpus(one.as_bytes()).unwrap().records.len(), 1);
    }

    #[test]
    fn parse_rejects_invariant_violations() {
        let mut at = rec("1", "x", 0);
        at.tagged_accounts = vec!["@bank".into()];
        let mut dup = rec("2", "x", 0);
        dup.tagged_accounts = vec!["bank".into(), "bank".into()];
        let mut zero = rec("3", "x", 1);
        zero.attachments[0].width_px = 0;
        let again = rec("4", "x", 0);
        let lines: Vec<String> = [&at, &dup, &zero, &again, &again]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        let parsed = parse_corpus(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.skips.len(), 4);
        assert!(parsed.skips[3].reason.contains("duplicate tweet_id"));
    }

    #[test]
    fn window_boundaries() {
        let start = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
        let end = Utc.with_ymd_and_hms(2021, 6, 2, 0, 0, 0).unwrap();
        let mut at_start = rec("1", "", 0);
        at_start.created_at = start;
        let mut after = rec("2", "", 0);
        after.created_at = end + chrono::Duration::seconds(1);
        let kept = filter_window(&[at_start.clone(), after], start, end).unwrap();
        assert_eq!(kept, vec![at_start]);
        assert!(filter_window(&[], end, start).is_err());
    }

    #[test]
    fn window_mixed_set_keeps_order() {
        let base = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let days = [-3i64, 2, 10, 5, 40];
        let recs: Vec<_> = days
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut r = rec(&i.to_string(), "", 0);
                r.created_at = base + chrono::Duration::days(*d);
                r
            })
            .collect();
        let kept = filter_window(&recs, base, base + chrono::Duration::days(7)).unwrap();
        let ids: Vec<_> = kept.iter().map(|r| r.tweet_id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup_messages(&["a b", "a  b"]), ["a b"]);
        assert!(dedup_messages::<&str>(&[]).is_empty());
        assert_eq!(dedup_messages(&["x", "y", "x"]), ["x", "y"]);
        assert_eq!(dedup_messages(&["Hi", "hi"]), ["Hi", "hi"]);
    }

    #[test]
    fn fixture_source_paginates() {
        let recs: Vec<_> = (0..5).map(|i| rec(&i.to_string(), "spam sms", 1)).collect();
        let src = FixtureTweetSource::new(recs, 2);
        let w = TimeWindow::new(
            Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2021, 12, 31, 23, 59, 59).unwrap(),
        )
        .unwrap();
        let first = src.search(&QuerySpec::default(), &w, None).unwrap();
        assert_eq!(first.records.len(), 2);
        assert_eq!(first.next_token.as_deref(), Some("2"));
        assert_eq!(src.search_all(&QuerySpec::default(), &w).unwrap().len(), 5);
    }
}
