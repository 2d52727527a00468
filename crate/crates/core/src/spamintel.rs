//! Sender typing, URL-linked campaigns, template families and the reporter,
//! tag and time-series analytics.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;
use std::sync::OnceLock;

use chrono::{Datelike, Duration, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Reply, TweetRecord};
use crate::exec::Execution;
use crate::urlintel::{extract_urls, SuffixList};

pub const UNDETERMINED: &str = "und";

#[derive(Debug, Error)]
pub enum SpamIntelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("lookup failed: {0}")]
    Lookup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainCategory {
    Fraud,
    Ads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpamCategory {
    #[serde(rename = "fraud/account_alert")]
    FraudAccountAlert,
    #[serde(rename = "fraud/finance")]
    FraudFinance,
    #[serde(rename = "fraud/prize")]
    FraudPrize,
    #[serde(rename = "fraud/delivery")]
    FraudDelivery,
    #[serde(rename = "fraud/card")]
    FraudCard,
    #[serde(rename = "fraud/tax_refund")]
    FraudTaxRefund,
    #[serde(rename = "fraud/covid19")]
    FraudCovid19,
    #[serde(rename = "fraud/other")]
    FraudOther,
    #[serde(rename = "ads/promotion")]
    AdsPromotion,
    #[serde(rename = "ads/loan_gamble")]
    AdsLoanGamble,
    #[serde(rename = "ads/politics")]
    AdsPolitics,
    #[serde(rename = "ads/other")]
    AdsOther,
}

impl SpamCategory {
    pub fn main(self) -> MainCategory {
        use SpamCategory::*;
        match self {
            FraudAccountAlert | FraudFinance | FraudPrize | FraudDelivery | FraudCard
            | FraudTaxRefund | FraudCovid19 | FraudOther => MainCategory::Fraud,
            AdsPromotion | AdsLoanGamble | AdsPolitics | AdsOther => MainCategory::Ads,
        }
    }
}

fn und() -> String {
    UNDETERMINED.to_string()
}

/// One deduplicated spam message, dated by its first reporting tweet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamMessage {
    pub message_id: String,
    pub text: String,
    pub report_date: NaiveDate,
    #[serde(default = "und")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender_raw: Option<String>,
    #[serde(default)]
    pub urls: Vec<String>,
    pub source_tweet_id: String,
    pub author_id: String,
    #[serde(default)]
    pub tagged_accounts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SpamCategory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenderKind {
    RegularNumber,
    ShortCode,
    AlphaSenderId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderIdentity {
    pub raw: String,
    pub kind: SenderKind,
    pub normalized: String,
}

/// Strip spaces, dashes and parentheses, then type the sender.
///
/// Numeric senders (optional leading `+`) with 7 or more digits are regular
/// numbers and shorter ones are short codes. Anything else is an
/// alphanumeric sender ID, kept verbatim.
pub fn classify_sender(raw: &str) -> Result<SenderIdentity, SpamIntelError> {
    let stripped: String = raw
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '-' | '(' | ')'))
        .collect();
    if stripped.is_empty() {
        return Err(SpamIntelError::InvalidArgument(format!(
            "empty sender {raw:?}"
        )));
    }
    let digits = stripped.strip_prefix('+').unwrap_or(&stripped);
    let kind = if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        if digits.len() >= 7 {
            SenderKind::RegularNumber
        } else {
            SenderKind::ShortCode
        }
    } else {
        SenderKind::AlphaSenderId
    };
    Ok(SenderIdentity {
        raw: raw.to_string(),
        kind,
        normalized: stripped,
    })
}

/// Union-find with union by rank and path halving.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// Components as ascending index lists, ordered by smallest member.
    pub fn components(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..self.len() {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = by_root.into_values().collect();
        out.sort_unstable_by_key(|c| c[0]);
        out
    }
}

/// Partial clustering state over a shard of messages.
///
/// Each URL remembers one message that carries it; a later carrier records
/// an edge to it. Merging two shards re-links URLs seen on both sides, so
/// any merge order yields the same connected components.
#[derive(Debug, Clone, Default)]
pub struct UrlLinks {
    first_seen: HashMap<String, usize>,
    edges: Vec<(usize, usize)>,
}

impl UrlLinks {
    pub fn observe<S: AsRef<str>>(&mut self, index: usize, urls: &[S]) {
        for url in urls {
            link(
                &mut self.first_seen,
                &mut self.edges,
                url.as_ref().to_string(),
                index,
            );
        }
    }

    pub fn merge(self, other: Self) -> Self {
        let (mut big, small) = if self.first_seen.len() >= other.first_seen.len() {
            (self, other)
        } else {
            (other, self)
        };
        big.edges.extend(small.edges);
        for (url, index) in small.first_seen {
            link(&mut big.first_seen, &mut big.edges, url, index);
        }
        big
    }

    pub fn into_forest(self, n: usize) -> DisjointSet {
        let mut dsu = DisjointSet::new(n);
        for (a, b) in self.edges {
            dsu.union(a, b);
        }
        dsu
    }
}

fn link(
    first_seen: &mut HashMap<String, usize>,
    edges: &mut Vec<(usize, usize)>,
    url: String,
    index: usize,
) {
    match first_seen.entry(url) {
        Entry::Occupied(e) => edges.push((*e.get(), index)),
        Entry::Vacant(e) => {
            e.insert(index);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: u32,
    pub member_message_ids: BTreeSet<String>,
    pub shared_urls: BTreeSet<String>,
    pub languages: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    /// Every component, members sorted, components sorted by first member.
    pub clusters: Vec<Vec<String>>,
    pub campaigns: Vec<Campaign>,
}

/// Join messages that share a URL string, transitively.
pub fn cluster_campaigns(messages: &[SpamMessage], exec: Execution) -> Clustering {
    let links = exec.fold_reduce(
        messages,
        UrlLinks::default,
        |mut acc, i, m| {
            acc.observe(i, &m.urls);
            acc
        },
        UrlLinks::merge,
    );
    let mut forest = links.into_forest(messages.len());
    let mut groups: Vec<Vec<&SpamMessage>> = forest
        .components()
        .into_iter()
        .map(|c| {
            let mut members: Vec<&SpamMessage> = c.into_iter().map(|i| &messages[i]).collect();
            members.sort_by(|a, b| a.message_id.cmp(&b.message_id));
            members
        })
        .collect();
    groups.sort_by(|a, b| a[0].message_id.cmp(&b[0].message_id));

    let mut campaigns = Vec::new();
    for members in groups.iter().filter(|g| g.len() >= 2) {
        let mut url_carriers: BTreeMap<&str, usize> = BTreeMap::new();
        for m in members {
            let distinct: BTreeSet<&str> = m.urls.iter().map(String::as_str).collect();
            for u in distinct {
                *url_carriers.entry(u).or_default() += 1;
            }
        }
        campaigns.push(Campaign {
            campaign_id: campaigns.len() as u32 + 1,
            member_message_ids: members.iter().map(|m| m.message_id.clone()).collect(),
            shared_urls: url_carriers
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .map(|(u, _)| u.to_string())
                .collect(),
            languages: members.iter().map(|m| m.language.clone()).collect(),
        });
    }
    let clusters = groups
        .into_iter()
        .map(|g| g.into_iter().map(|m| m.message_id.clone()).collect())
        .collect();
    Clustering {
        clusters,
        campaigns,
    }
}

/// Campaigns spanning two or more identified languages.
pub fn cross_language(campaigns: &[Campaign]) -> Vec<Campaign> {
    campaigns
        .iter()
        .filter(|c| c.languages.iter().filter(|l| *l != UNDETERMINED).count() >= 2)
        .cloned()
        .collect()
}

fn amount_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:\b(?:rs|inr|usd|eur|gbp|idr|rp|rm)\.?\s?|[$€£₹¥])\d[\d.,]*|\d[\d.,]*\s?(?:[$€£₹¥]|\b(?:rs|inr|usd|eur|gbp|idr|euros?|dollars?|rupees?|ringgit)\b)",
        )
        .expect("amount pattern")
    })
}

fn digits_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").expect("digits pattern"))
}

fn template_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{url\}|\{amt\}|[\p{L}\p{N}#_]+").expect("token pattern"))
}

/// URLs become `{URL}`, currency amounts `{AMT}`, and each digit run `#`.
pub fn mask_template(text: &str, suffixes: &SuffixList) -> String {
    let mut raws: Vec<String> = extract_urls(text, "", suffixes)
        .into_iter()
        .map(|u| u.raw)
        .collect();
    raws.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut masked = text.to_string();
    for raw in &raws {
        masked = masked.replace(raw.as_str(), "{URL}");
    }
    let masked = amount_re().replace_all(&masked, "{AMT}");
    digits_re().replace_all(&masked, "#").into_owned()
}

pub fn template_tokens(masked: &str) -> BTreeSet<String> {
    let lower = masked.to_lowercase();
    template_token_re()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Two empty sets are identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Single-linkage groups of message ids whose masked token sets reach
/// `threshold` Jaccard similarity. Singletons are included.
pub fn template_groups(
    messages: &[SpamMessage],
    threshold: f64,
    suffixes: &SuffixList,
    exec: Execution,
) -> Result<Vec<Vec<String>>, SpamIntelError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SpamIntelError::InvalidArgument(format!(
            "similarity threshold {threshold} outside (0, 1]"
        )));
    }
    let token_sets = exec.map(messages, |m| {
        template_tokens(&mask_template(&m.text, suffixes))
    });
    let n = messages.len();
    let rows = exec.map_range(n, |i| {
        ((i + 1)..n)
            .filter(|&j| jaccard(&token_sets[i], &token_sets[j]) >= threshold)
            .map(|j| (i, j))
            .collect::<Vec<_>>()
    });
    let mut dsu = DisjointSet::new(n);
    for (i, j) in rows.into_iter().flatten() {
        dsu.union(i, j);
    }
    let mut groups: Vec<Vec<String>> = dsu
        .components()
        .into_iter()
        .map(|c| {
            let mut ids: Vec<String> = c
                .into_iter()
                .map(|i| messages[i].message_id.clone())
                .collect();
            ids.sort();
            ids
        })
        .collect();
    groups.sort();
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReporterStats {
    pub reports_per_author: BTreeMap<String, usize>,
    /// reports per author → number of authors
    pub histogram: BTreeMap<usize, usize>,
    pub single_report_fraction: Option<f64>,
    pub under_five_fraction: Option<f64>,
    pub over_fifty_fraction: Option<f64>,
}

pub fn reporter_stats(tweets: &[TweetRecord]) -> ReporterStats {
    let mut per_author: BTreeMap<String, usize> = BTreeMap::new();
    for t in tweets {
        *per_author.entry(t.author_id.clone()).or_default() += 1;
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &n in per_author.values() {
        *histogram.entry(n).or_default() += 1;
    }
    let authors = per_author.len();
    let fraction = |pred: fn(usize) -> bool| {
        (authors > 0)
            .then(|| per_author.values().filter(|&&n| pred(n)).count() as f64 / authors as f64)
    };
    ReporterStats {
        single_report_fraction: fraction(|n| n == 1),
        under_five_fraction: fraction(|n| n < 5),
        over_fifty_fraction: fraction(|n| n > 50),
        reports_per_author: per_author,
        histogram,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStats {
    pub handle: String,
    pub tag_count: usize,
    pub replied_count: usize,
    pub reply_rate: f64,
}

pub const REPLY_WINDOW_DAYS: i64 = 30;

/// Per tagged handle, how many tagging tweets drew a reply from that
/// handle's account in the same conversation within 30 days (inclusive).
///
/// `accounts` maps handles, compared case-insensitively, to account ids.
/// Rows are sorted by tag count descending, then handle.
pub fn tag_reply_stats(
    tweets: &[TweetRecord],
    replies: &[Reply],
    accounts: &BTreeMap<String, String>,
) -> Vec<TagStats> {
    let account_of: HashMap<String, &str> = accounts
        .iter()
        .map(|(h, id)| (h.to_lowercase(), id.as_str()))
        .collect();
    let mut by_conversation: HashMap<&str, Vec<&Reply>> = HashMap::new();
    for r in replies {
        by_conversation
            .entry(r.conversation_id.as_str())
            .or_default()
            .push(r);
    }
    let window = Duration::days(REPLY_WINDOW_DAYS);

    // lowercase handle → (display spelling, tags, replied)
    let mut stats: HashMap<String, (String, usize, usize)> = HashMap::new();
    for t in tweets {
        let mut seen = HashSet::new();
        for handle in &t.tagged_accounts {
            let key = handle.to_lowercase();
            if !seen.insert(key.clone()) {
                continue;
            }
            let replied = account_of.get(&key).is_some_and(|account| {
                by_conversation
                    .get(t.conversation_id.as_str())
                    .is_some_and(|rs| {
                        rs.iter().any(|r| {
                            let delta = r.created_at - t.created_at;
                            r.author_id == *account && delta >= Duration::zero() && delta <= window
                        })
                    })
            });
            let entry = stats.entry(key).or_insert_with(|| (handle.clone(), 0, 0));
            entry.1 += 1;
            entry.2 += usize::from(replied);
        }
    }
    let mut rows: Vec<TagStats> = stats
        .into_values()
        .map(|(handle, tag_count, replied_count)| TagStats {
            handle,
            tag_count,
            replied_count,
            reply_rate: if tag_count == 0 {
                0.0
            } else {
                replied_count as f64 / tag_count as f64
            },
        })
        .collect();
    rows.sort_by(|a, b| {
        b.tag_count
            .cmp(&a.tag_count)
            .then_with(|| a.handle.cmp(&b.handle))
    });
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountCategory {
    VictimService,
    LawEnforcement,
    CellularCarrier,
    Individual,
    AntiSpamService,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountInfo {
    pub service: String,
    pub category: AccountCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sector: Option<String>,
}

/// Curated handle → organization map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimServiceMap(HashMap<String, AccountInfo>);

impl VictimServiceMap {
    pub fn from_json(raw: &str) -> Result<Self, SpamIntelError> {
        let map: HashMap<String, AccountInfo> = serde_json::from_str(raw)?;
        Ok(Self(
            map.into_iter()
                .map(|(h, info)| (h.trim_start_matches('@').to_lowercase(), info))
                .collect(),
        ))
    }

    pub fn lookup(&self, handle: &str) -> Option<&AccountInfo> {
        self.0.get(&handle.trim_start_matches('@').to_lowercase())
    }

    pub fn victim_service(&self, handle: &str) -> Option<&str> {
        self.lookup(handle)
            .filter(|info| info.category == AccountCategory::VictimService)
            .map(|info| info.service.as_str())
    }
}

impl Default for VictimServiceMap {
    fn default() -> Self {
        Self::from_json(include_str!("../data/victim_services.json"))
            .expect("bundled victim service map")
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GroupBy<'a> {
    Language,
    VictimService(&'a VictimServiceMap),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub bucket: String,
    pub key: String,
    pub count: usize,
}

/// `2021-Q4`
pub fn quarter_of(date: NaiveDate) -> String {
    format!("{}-Q{}", date.year(), date.month0() / 3 + 1)
}

/// Counts per calendar quarter and group key, ordered by bucket, then
/// count descending, then key. A message tagging several victim services
/// counts once for each.
pub fn time_series(messages: &[SpamMessage], group: GroupBy<'_>) -> Vec<SeriesRow> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for m in messages {
        let bucket = quarter_of(m.report_date);
        let keys: BTreeSet<String> = match group {
            GroupBy::Language => BTreeSet::from([m.language.clone()]),
            GroupBy::VictimService(map) => m
                .tagged_accounts
                .iter()
                .filter_map(|h| map.victim_service(h))
                .map(str::to_string)
                .collect(),
        };
        for key in keys {
            *counts.entry((bucket.clone(), key)).or_default() += 1;
        }
    }
    let mut rows: Vec<SeriesRow> = counts
        .into_iter()
        .map(|((bucket, key), count)| SeriesRow { bucket, key, count })
        .collect();
    rows.sort_by(|a, b| {
        a.bucket
            .cmp(&b.bucket)
            .then(b.count.cmp(&a.count))
            .then_with(|| a.key.cmp(&b.key))
    });
    rows
}

pub trait LanguageDetector: Send + Sync {
    /// A language tag, or `und`.
    fn detect(&self, text: &str) -> String;
}

/// Scores each language by how many tokens fall in its high-frequency
/// word list. The winner needs at least two hits and a strict lead.
#[derive(Debug, Clone)]
pub struct StopwordProfiles {
    profiles: Vec<(String, HashSet<String>)>,
}

impl StopwordProfiles {
    pub fn from_json(raw: &str) -> Result<Self, SpamIntelError> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(raw)?;
        Ok(Self {
            profiles: map
                .into_iter()
                .map(|(tag, words)| (tag, words.into_iter().map(|w| w.to_lowercase()).collect()))
                .collect(),
        })
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|(t, _)| t.as_str())
    }
}

impl Default for StopwordProfiles {
    fn default() -> Self {
        Self::from_json(include_str!("../data/language_profiles.json"))
            .expect("bundled language profiles")
    }
}

impl LanguageDetector for StopwordProfiles {
    fn detect(&self, text: &str) -> String {
        let toks: Vec<String> = crate::text::tokens(text).collect();
        let mut scores: Vec<(usize, &str)> = self
            .profiles
            .iter()
            .map(|(tag, words)| {
                (
                    toks.iter().filter(|t| words.contains(*t)).count(),
                    tag.as_str(),
                )
            })
            .collect();
        scores.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        match scores.as_slice() {
            [(best, tag), rest @ ..]
                if *best >= 2 && rest.first().is_none_or(|(second, _)| second < best) =>
            {
                tag.to_string()
            }
            _ => und(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineType {
    Mobile,
    Landline,
    Voip,
    TollFree,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneInfo {
    pub number: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier: Option<String>,
    #[serde(default = "unknown_line")]
    pub line_type: LineType,
}

fn unknown_line() -> LineType {
    LineType::Unknown
}

pub trait PhoneLookup: Send + Sync {
    fn lookup(&self, number: &str) -> Result<Option<PhoneInfo>, SpamIntelError>;
}

#[derive(Debug, Clone, Default)]
pub struct FixturePhoneLookup(HashMap<String, PhoneInfo>);

impl FixturePhoneLookup {
    pub fn new(entries: impl IntoIterator<Item = PhoneInfo>) -> Self {
        Self(entries.into_iter().map(|p| (p.number.clone(), p)).collect())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, SpamIntelError> {
        let entries: Vec<PhoneInfo> = crate::ndjson::read(r).map_err(ndjson_err)?;
        Ok(Self::new(entries))
    }
}

impl PhoneLookup for FixturePhoneLookup {
    fn lookup(&self, number: &str) -> Result<Option<PhoneInfo>, SpamIntelError> {
        Ok(self.0.get(number).cloned())
    }
}

fn ndjson_err(e: crate::ndjson::NdjsonError) -> SpamIntelError {
    match e {
        crate::ndjson::NdjsonError::Io(e) => SpamIntelError::Io(e),
        crate::ndjson::NdjsonError::Json { source, .. } => SpamIntelError::Json(source),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhoneRollup {
    pub by_country: BTreeMap<String, usize>,
    pub by_carrier: BTreeMap<String, usize>,
    pub by_line_type: BTreeMap<LineType, usize>,
}

/// Distinct numbers counted by country, carrier and line type; unknown
/// fields fall under `unknown`.
pub fn phone_rollup<S: AsRef<str>>(
    numbers: &[S],
    lookup: &dyn PhoneLookup,
) -> Result<PhoneRollup, SpamIntelError> {
    let distinct: BTreeSet<&str> = numbers.iter().map(AsRef::as_ref).collect();
    let mut out = PhoneRollup::default();
    for n in distinct {
        let info = lookup.lookup(n)?;
        let (country, carrier, line) = match &info {
            Some(i) => (i.country.clone(), i.carrier.clone(), i.line_type),
            None => (None, None, LineType::Unknown),
        };
        *out.by_country
            .entry(country.unwrap_or_else(|| "unknown".into()))
            .or_default() += 1;
        *out.by_carrier
            .entry(carrier.unwrap_or_else(|| "unknown".into()))
            .or_default() += 1;
        *out.by_line_type.entry(line).or_default() += 1;
    }
    Ok(out)
}

pub trait BlacklistClient: Send + Sync {
    fn is_listed(&self, number: &str) -> Result<bool, SpamIntelError>;
}

#[derive(Debug, Clone, Default)]
pub struct FixtureBlacklist(HashSet<String>);

impl FixtureBlacklist {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(numbers: I) -> Self {
        Self(numbers.into_iter().map(Into::into).collect())
    }

    /// One number per line; blank lines and `#` comments are skipped.
    pub fn parse(raw: &str) -> Self {
        Self::new(
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string),
        )
    }
}

impl BlacklistClient for FixtureBlacklist {
    fn is_listed(&self, number: &str) -> Result<bool, SpamIntelError> {
        Ok(self.0.contains(number))
    }
}

/// Fraction of distinct numbers the blacklist knows; `None` for no numbers.
pub fn blacklist_hit_rate<S: AsRef<str>>(
    numbers: &[S],
    client: &dyn BlacklistClient,
) -> Result<Option<f64>, SpamIntelError> {
    let distinct: BTreeSet<&str> = numbers.iter().map(AsRef::as_ref).collect();
    if distinct.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for n in &distinct {
        hits += usize::from(client.is_listed(n)?);
    }
    Ok(Some(hits as f64 / distinct.len() as f64))
}
