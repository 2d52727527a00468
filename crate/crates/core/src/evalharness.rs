//! Evaluation of anti-spam services, bulk-SMS gateways and messaging apps
//! against a stratified spam test set.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::spamintel::MainCategory;
use crate::srtc::Translator;
use crate::text::utc_seconds;

pub const TWITTER_COUNT: usize = 100;
pub const HISTORICAL_COUNT: usize = 50;
pub const PER_CATEGORY: usize = 75;
pub const TAG_LEN: usize = 6;
pub const SMS_LIMIT: usize = 160;
pub const DEFAULT_CUTOFF: f64 = 0.5;
pub const DELIVERY_WINDOW_SECS: i64 = 300;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible test set: {0}")]
    Infeasible(String),
    #[error("service {service}: {reason}")]
    Service { service: String, reason: String },
    #[error("send failed: {0}")]
    Send(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Twitter,
    Historical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Spam,
    Benign,
}

/// A labelled candidate in a source pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub text: String,
    pub category: MainCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestMessage {
    pub tag_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<MainCategory>,
    pub source: Source,
    pub truth: Truth,
}

pub fn is_tag_id(s: &str) -> bool {
    s.len() == TAG_LEN && s.bytes().all(|b| b.is_ascii_digit())
}

/// Tag ids are six digits and unique; spam items carry a category.
pub fn validate_testset(messages: &[TestMessage]) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for m in messages {
        if !is_tag_id(&m.tag_id) {
            return Err(EvalError::InvalidArgument(format!(
                "tag id {:?} is not six digits",
                m.tag_id
            )));
        }
        if !seen.insert(m.tag_id.as_str()) {
            return Err(EvalError::InvalidArgument(format!(
                "duplicate tag id {}",
                m.tag_id
            )));
        }
        if m.truth == Truth::Spam && m.category.is_none() {
            return Err(EvalError::InvalidArgument(format!(
                "spam item {} has no category",
                m.tag_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PoolCounts {
    ads: usize,
    fraud: usize,
}

fn counts(pool: &[PoolItem]) -> PoolCounts {
    let ads = pool
        .iter()
        .filter(|p| p.category == MainCategory::Ads)
        .count();
    PoolCounts {
        ads,
        fraud: pool.len() - ads,
    }
}

/// Range of Twitter Ads counts that satisfy all four marginals.
///
/// With `a` Twitter Ads, the other cells are `100 - a` Twitter Fraud,
/// `75 - a` historical Ads and `a - 25` historical Fraud. Each bound is
/// returned with the constraint that produced it.
fn feasible_twitter_ads(t: PoolCounts, h: PoolCounts) -> Result<(usize, usize), EvalError> {
    let lower = [
        (
            PER_CATEGORY - HISTORICAL_COUNT,
            "historical Fraud count cannot be negative".to_string(),
        ),
        (
            TWITTER_COUNT.saturating_sub(t.fraud),
            format!("Twitter Fraud pool holds only {}", t.fraud),
        ),
        (
            PER_CATEGORY.saturating_sub(h.ads),
            format!("historical Ads pool holds only {}", h.ads),
        ),
    ];
    let upper = [
        (
            PER_CATEGORY,
            "historical Ads count cannot be negative".to_string(),
        ),
        (t.ads, format!("Twitter Ads pool holds only {}", t.ads)),
        (
            h.fraud + PER_CATEGORY - HISTORICAL_COUNT,
            format!("historical Fraud pool holds only {}", h.fraud),
        ),
    ];
    let lo = lower.iter().max_by_key(|(v, _)| *v).expect("non-empty");
    let hi = upper.iter().min_by_key(|(v, _)| *v).expect("non-empty");
    if lo.0 > hi.0 {
        return Err(EvalError::Infeasible(format!(
            "need at least {} Twitter Ads ({}) but at most {} are possible ({})",
            lo.0, lo.1, hi.0, hi.1
        )));
    }
    Ok((lo.0, hi.0))
}

/// Draw 100 Twitter and 50 historical spam items with exactly 75 Ads and
/// 75 Fraud overall. The per-source split is drawn uniformly from the
/// feasible range, then each cell is sampled without replacement.
pub fn build_testset(
    twitter_pool: &[PoolItem],
    historical_pool: &[PoolItem],
    seed: u64,
) -> Result<Vec<TestMessage>, EvalError> {
    let (tc, hc) = (counts(twitter_pool), counts(historical_pool));
    let (lo, hi) = feasible_twitter_ads(tc, hc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let twitter_ads = rng.gen_range(lo..=hi);
    let plan = [
        (
            Source::Twitter,
            twitter_pool,
            MainCategory::Ads,
            twitter_ads,
        ),
        (
            Source::Twitter,
            twitter_pool,
            MainCategory::Fraud,
            TWITTER_COUNT - twitter_ads,
        ),
        (
            Source::Historical,
            historical_pool,
            MainCategory::Ads,
            PER_CATEGORY - twitter_ads,
        ),
        (
            Source::Historical,
            historical_pool,
            MainCategory::Fraud,
            twitter_ads + HISTORICAL_COUNT - PER_CATEGORY,
        ),
    ];
    let mut tags = TagAllocator::default();
    let mut out = Vec::with_capacity(TWITTER_COUNT + HISTORICAL_COUNT);
    for (source, pool, category, k) in plan {
        let cell: Vec<&PoolItem> = pool.iter().filter(|p| p.category == category).collect();
        let mut picked = sample(&mut rng, cell.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            out.push(TestMessage {
                tag_id: tags.next(&mut rng),
                text: cell[i].text.clone(),
                category: Some(category),
                source,
                truth: Truth::Spam,
            });
        }
    }
    Ok(out)
}

/// Tag benign texts for mis-alarm measurement, avoiding `taken` ids.
pub fn tag_benign<S: AsRef<str>>(
    texts: &[S],
    seed: u64,
    taken: &[TestMessage],
) -> Vec<TestMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = TagAllocator {
        used: taken.iter().map(|m| m.tag_id.clone()).collect(),
    };
    texts
        .iter()
        .map(|t| TestMessage {
            tag_id: tags.next(&mut rng),
            text: t.as_ref().to_string(),
            category: None,
            source: Source::Historical,
            truth: Truth::Benign,
        })
        .collect()
}

#[derive(Default)]
struct TagAllocator {
    used: HashSet<String>,
}

impl TagAllocator {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        assert!(self.used.len() < 1_000_000, "tag id space exhausted");
        loop {
            let tag = format!("{:06}", rng.gen_range(0..1_000_000u32));
            if self.used.insert(tag.clone()) {
                return tag;
            }
        }
    }
}

/// Translate every text into `target_lang`.
pub fn translate_testset(
    messages: &[TestMessage],
    translator: &dyn Translator,
    target_lang: &str,
) -> Result<Vec<TestMessage>, EvalError> {
    messages
        .iter()
        .map(|m| {
            let text =
                translator
                    .translate(&m.text, target_lang)
                    .map_err(|e| EvalError::Service {
                        service: "translator".into(),
                        reason: e.to_string(),
                    })?;
            Ok(TestMessage { text, ..m.clone() })
        })
        .collect()
}

/// Split into SMS segments of at most `limit` code points. The first
/// segment starts with the tag id and a space.
pub fn chunk_message(m: &TestMessage, limit: usize) -> Result<Vec<String>, EvalError> {
    if limit <= TAG_LEN + 1 {
        return Err(EvalError::InvalidArgument(format!(
            "segment limit {limit} leaves no room for the tag"
        )));
    }
    let chars: Vec<char> = m.text.chars().collect();
    let head = chars.len().min(limit - TAG_LEN - 1);
    let mut segments = vec![format!(
        "{} {}",
        m.tag_id,
        chars[..head].iter().collect::<String>()
    )];
    segments.extend(
        chars[head..]
            .chunks(limit)
            .map(|c| c.iter().collect::<String>()),
    );
    Ok(segments)
}

/// Inverse of [`chunk_message`]; `None` when the first segment lacks a tag.
pub fn reassemble<S: AsRef<str>>(segments: &[S]) -> Option<(String, String)> {
    let (first, rest) = segments.split_first()?;
    let first = first.as_ref();
    let tag = first.get(..TAG_LEN).filter(|t| is_tag_id(t))?;
    let body = first[TAG_LEN..].strip_prefix(' ')?;
    let mut text = body.to_string();
    for s in rest {
        text.push_str(s.as_ref());
    }
    Some((tag.to_string(), text))
}

/// The tag a receiver reads from the start of a segment, if any.
pub fn observed_tag(body: &str) -> Option<&str> {
    let tag = body.get(..TAG_LEN).filter(|t| is_tag_id(t))?;
    body[TAG_LEN..].starts_with(' ').then_some(tag)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentMessage {
    pub tag_id: String,
    #[serde(with = "utc_seconds")]
    pub sent_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryEvent {
    pub receiver_id: String,
    pub observed_tag_id: String,
    #[serde(with = "utc_seconds")]
    pub observed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryOutcome {
    pub tag_id: String,
    pub status: DeliveryStatus,
    /// Earliest qualifying receiver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryMatch {
    pub outcomes: Vec<DeliveryOutcome>,
    pub orphans: Vec<DeliveryEvent>,
}

/// A message is delivered when any receiver observes its tag no later than
/// `window` after it was sent. Events with unknown tags are orphans.
pub fn match_deliveries(
    sent: &[SentMessage],
    events: &[DeliveryEvent],
    window: Duration,
) -> DeliveryMatch {
    let mut by_tag: HashMap<&str, Vec<&DeliveryEvent>> = HashMap::new();
    let known: HashSet<&str> = sent.iter().map(|s| s.tag_id.as_str()).collect();
    let mut orphans = Vec::new();
    for e in events {
        if known.contains(e.observed_tag_id.as_str()) {
            by_tag
                .entry(e.observed_tag_id.as_str())
                .or_default()
                .push(e);
        } else {
            orphans.push(e.clone());
        }
    }
    let outcomes = sent
        .iter()
        .map(|s| {
            let deadline = s.sent_at + window;
            let first = by_tag
                .get(s.tag_id.as_str())
                .into_iter()
                .flatten()
                .filter(|e| e.observed_at <= deadline)
                .min_by(|a, b| {
                    a.observed_at
                        .cmp(&b.observed_at)
                        .then_with(|| a.receiver_id.cmp(&b.receiver_id))
                });
            DeliveryOutcome {
                tag_id: s.tag_id.clone(),
                status: if first.is_some() {
                    DeliveryStatus::Delivered
                } else {
                    DeliveryStatus::Blocked
                },
                receiver_id: first.map(|e| e.receiver_id.clone()),
            }
        })
        .collect();
    DeliveryMatch { outcomes, orphans }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    FlaggedSpam,
    PassedBenign,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceVerdict {
    pub service_name: String,
    pub tag_id: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
}

/// Flagged when `score >= cutoff`.
pub fn score_to_verdict(score: f64, cutoff: f64) -> Result<Outcome, EvalError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(EvalError::InvalidArgument(format!(
            "score {score} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(EvalError::InvalidArgument(format!(
            "cutoff {cutoff} outside [0, 1]"
        )));
    }
    Ok(if score >= cutoff {
        Outcome::FlaggedSpam
    } else {
        Outcome::PassedBenign
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceAnswer {
    Label(bool),
    Score(f64),
}

pub trait AntiSpamClient: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, text: &str) -> Result<ServiceAnswer, EvalError>;
}

/// Ask `client` about every message. Failures become `Error` verdicts.
pub fn run_service(
    client: &dyn AntiSpamClient,
    messages: &[TestMessage],
    cutoff: f64,
    exec: Execution,
) -> Vec<ServiceVerdict> {
    exec.map(messages, |m| {
        let (outcome, raw_score) = match client.check(&m.text) {
            Ok(ServiceAnswer::Label(true)) => (Outcome::FlaggedSpam, None),
            Ok(ServiceAnswer::Label(false)) => (Outcome::PassedBenign, None),
            Ok(ServiceAnswer::Score(s)) => match score_to_verdict(s, cutoff) {
                Ok(o) => (o, Some(s)),
                Err(e) => {
                    tracing::warn!(service = client.name(), tag = %m.tag_id, "{e}");
                    (Outcome::Error, None)
                }
            },
            Err(e) => {
                tracing::warn!(service = client.name(), tag = %m.tag_id, "{e}");
                (Outcome::Error, None)
            }
        };
        ServiceVerdict {
            service_name: client.name().to_string(),
            tag_id: m.tag_id.clone(),
            outcome,
            raw_score,
        }
    })
}

/// Scripted answers keyed by message text.
#[derive(Debug, Clone)]
pub struct FixtureAntiSpam {
    name: String,
    answers: HashMap<String, ServiceAnswer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureAnswer {
    pub service: String,
    pub text: String,
    pub answer: ServiceAnswer,
}

impl FixtureAntiSpam {
    pub fn new(
        name: impl Into<String>,
        answers: impl IntoIterator<Item = (String, ServiceAnswer)>,
    ) -> Self {
        Self {
            name: name.into(),
            answers: answers.into_iter().collect(),
        }
    }

    /// One client per service named in the answers, ordered by name.
    pub fn from_answers(answers: impl IntoIterator<Item = FixtureAnswer>) -> Vec<Self> {
        let mut by_service: BTreeMap<String, Vec<(String, ServiceAnswer)>> = BTreeMap::new();
        for a in answers {
            by_service
                .entry(a.service)
                .or_default()
                .push((a.text, a.answer));
        }
        by_service
            .into_iter()
            .map(|(name, answers)| Self::new(name, answers))
            .collect()
    }
}

impl AntiSpamClient for FixtureAntiSpam {
    fn name(&self) -> &str {
        &self.name
    }

    fn check(&self, text: &str) -> Result<ServiceAnswer, EvalError> {
        self.answers
            .get(text)
            .copied()
            .ok_or_else(|| EvalError::Service {
                service: self.name.clone(),
                reason: "no scripted answer".into(),
            })
    }
}

/// `hit / total` with integer rounding for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fraction {
    pub hit: usize,
    pub total: usize,
}

impl Fraction {
    pub fn new(hit: usize, total: usize) -> Self {
        Self { hit, total }
    }

    pub fn value(self) -> Option<f64> {
        (self.total > 0).then(|| self.hit as f64 / self.total as f64)
    }

    /// Percentage rounded half-up to `decimals` places, e.g. `95%` or
    /// `83.06%`; `n/a` for an empty denominator.
    pub fn percent(self, decimals: u32) -> String {
        if self.total == 0 {
            return "n/a".into();
        }
        let scale = 10u128.pow(decimals);
        let (hit, total) = (self.hit as u128, self.total as u128);
        let scaled = (2 * 100 * scale * hit + total) / (2 * total);
        let (whole, frac) = (scaled / scale, scaled % scale);
        if decimals == 0 {
            format!("{whole}%")
        } else {
            format!("{whole}.{frac:0width$}%", width = decimals as usize)
        }
    }
}

impl std::ops::Add for Fraction {
    type Output = Fraction;
    fn add(self, o: Fraction) -> Fraction {
        Fraction::new(self.hit + o.hit, self.total + o.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceReport {
    pub service_name: String,
    pub overall: Fraction,
    pub twitter: Fraction,
    pub historical: Fraction,
    pub ads: Fraction,
    pub fraud: Fraction,
    /// Items answered with an error; they count as not detected.
    pub errors: usize,
    /// Test items with no verdict; they count as not detected.
    pub missing: usize,
    /// Verdict tag ids not in the test set.
    pub orphans: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub services: Vec<ServiceReport>,
}

fn split_report(
    service_name: &str,
    testset: &[TestMessage],
    hits: &HashMap<&str, bool>,
) -> (Fraction, Fraction, Fraction, Fraction, Fraction, usize) {
    let (mut tw, mut hi, mut ads, mut fr) = Default::default();
    let mut missing = 0;
    for m in testset.iter().filter(|m| m.truth == Truth::Spam) {
        let hit = match hits.get(m.tag_id.as_str()) {
            Some(&h) => h,
            None => {
                missing += 1;
                false
            }
        };
        let cell = Fraction::new(usize::from(hit), 1);
        match m.source {
            Source::Twitter => tw = tw + cell,
            Source::Historical => hi = hi + cell,
        }
        match m.category {
            Some(MainCategory::Ads) => ads = ads + cell,
            Some(MainCategory::Fraud) => fr = fr + cell,
            None => {
                tracing::warn!(service = service_name, tag = %m.tag_id, "spam item without category")
            }
        }
    }
    (tw + hi, tw, hi, ads, fr, missing)
}

/// Detection rates per service, split by source and by category.
/// Services are ordered by name.
pub fn detection_report(verdicts: &[ServiceVerdict], testset: &[TestMessage]) -> EvalReport {
    let known: HashSet<&str> = testset.iter().map(|m| m.tag_id.as_str()).collect();
    let mut by_service: BTreeMap<&str, Vec<&ServiceVerdict>> = BTreeMap::new();
    for v in verdicts {
        by_service
            .entry(v.service_name.as_str())
            .or_default()
            .push(v);
    }
    let services = by_service
        .into_iter()
        .map(|(name, vs)| {
            let mut orphans = Vec::new();
            let mut hits = HashMap::new();
            let mut errors = 0;
            for v in vs {
                if !known.contains(v.tag_id.as_str()) {
                    tracing::warn!(service = name, tag = %v.tag_id, "verdict for unknown tag id");
                    orphans.push(v.tag_id.clone());
                    continue;
                }
                errors += usize::from(v.outcome == Outcome::Error);
                hits.insert(v.tag_id.as_str(), v.outcome == Outcome::FlaggedSpam);
            }
            let (overall, twitter, historical, ads, fraud, missing) =
                split_report(name, testset, &hits);
            ServiceReport {
                service_name: name.to_string(),
                overall,
                twitter,
                historical,
                ads,
                fraud,
                errors,
                missing,
                orphans,
            }
        })
        .collect();
    EvalReport { services }
}

/// Blocking rates for one sending path: a blocked message is a hit.
pub fn blocking_report(
    service_name: &str,
    deliveries: &DeliveryMatch,
    testset: &[TestMessage],
) -> ServiceReport {
    let hits: HashMap<&str, bool> = deliveries
        .outcomes
        .iter()
        .map(|o| (o.tag_id.as_str(), o.status == DeliveryStatus::Blocked))
        .collect();
    let known: HashSet<&str> = testset.iter().map(|m| m.tag_id.as_str()).collect();
    let orphans = deliveries
        .outcomes
        .iter()
        .filter(|o| !known.contains(o.tag_id.as_str()))
        .map(|o| o.tag_id.clone())
        .collect();
    let (overall, twitter, historical, ads, fraud, missing) =
        split_report(service_name, testset, &hits);
    ServiceReport {
        service_name: service_name.to_string(),
        overall,
        twitter,
        historical,
        ads,
        fraud,
        errors: 0,
        missing,
        orphans,
    }
}

/// Per service, the share of benign items flagged as spam. Error verdicts
/// count as not flagged.
pub fn mis_alarm_rate(
    verdicts: &[ServiceVerdict],
    benign: &[TestMessage],
) -> BTreeMap<String, Fraction> {
    let benign_tags: HashSet<&str> = benign
        .iter()
        .filter(|m| m.truth == Truth::Benign)
        .map(|m| m.tag_id.as_str())
        .collect();
    let mut out: BTreeMap<String, HashMap<&str, bool>> = BTreeMap::new();
    for v in verdicts
        .iter()
        .filter(|v| benign_tags.contains(v.tag_id.as_str()))
    {
        out.entry(v.service_name.clone())
            .or_default()
            .insert(v.tag_id.as_str(), v.outcome == Outcome::FlaggedSpam);
    }
    out.into_iter()
        .map(|(name, flags)| {
            let hit = flags.values().filter(|&&f| f).count();
            (name, Fraction::new(hit, benign_tags.len()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendReceipt {
    pub message_id: String,
    #[serde(with = "utc_seconds")]
    pub accepted_at: DateTime<Utc>,
}

pub trait BulkSender: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, to: &str, body: &str) -> Result<SendReceipt, EvalError>;
}

/// Offline carrier with a virtual clock. Each send advances the clock by
/// `step`; tagged segments that are not scripted to drop reach the
/// receiver after a per-tag delay and land in the event log.
#[derive(Debug)]
pub struct SimulatedCarrier {
    name: String,
    step: Duration,
    default_delay: Duration,
    delays: HashMap<String, Duration>,
    dropped: HashSet<String>,
    state: Mutex<CarrierState>,
}

#[derive(Debug)]
struct CarrierState {
    clock: DateTime<Utc>,
    next_id: u64,
    log: Vec<DeliveryEvent>,
}

impl SimulatedCarrier {
    pub fn new(
        name: impl Into<String>,
        start: DateTime<Utc>,
        step: Duration,
        default_delay: Duration,
    ) -> Self {
        Self {
            name: name.into(),
            step,
            default_delay,
            delays: HashMap::new(),
            dropped: HashSet::new(),
            state: Mutex::new(CarrierState {
                clock: start,
                next_id: 1,
                log: Vec::new(),
            }),
        }
    }

    pub fn drop_tags<I: IntoIterator<Item = S>, S: Into<String>>(mut self, tags: I) -> Self {
        self.dropped.extend(tags.into_iter().map(Into::into));
        self
    }

    pub fn delay_tag(mut self, tag: impl Into<String>, delay: Duration) -> Self {
        self.delays.insert(tag.into(), delay);
        self
    }

    /// Events ordered by time, receiver and tag.
    pub fn events(&self) -> Vec<DeliveryEvent> {
        let mut log = self.state.lock().expect("carrier state").log.clone();
        log.sort_by(|a, b| {
            (a.observed_at, &a.receiver_id, &a.observed_tag_id).cmp(&(
                b.observed_at,
                &b.receiver_id,
                &b.observed_tag_id,
            ))
        });
        log
    }
}

impl BulkSender for SimulatedCarrier {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, to: &str, body: &str) -> Result<SendReceipt, EvalError> {
        let mut st = self.state.lock().expect("carrier state");
        let accepted_at = st.clock;
        st.clock += self.step;
        let message_id = format!("sim-{:06}", st.next_id);
        st.next_id += 1;
        if let Some(tag) = observed_tag(body) {
            if !self.dropped.contains(tag) {
                let delay = self.delays.get(tag).copied().unwrap_or(self.default_delay);
                st.log.push(DeliveryEvent {
                    receiver_id: to.to_string(),
                    observed_tag_id: tag.to_string(),
                    observed_at: accepted_at + delay,
                });
            }
        }
        Ok(SendReceipt {
            message_id,
            accepted_at,
        })
    }
}

/// Send every message, chunked, to every receiver in order. The send time
/// of a message is the acceptance time of its first segment.
pub fn send_testset(
    sender: &dyn BulkSender,
    messages: &[TestMessage],
    receivers: &[String],
    limit: usize,
) -> Result<Vec<SentMessage>, EvalError> {
    if receivers.is_empty() {
        return Err(EvalError::InvalidArgument("no receivers".into()));
    }
    let mut sent = Vec::with_capacity(messages.len());
    for m in messages {
        let segments = chunk_message(m, limit)?;
        let mut first = None;
        for to in receivers {
            for seg in &segments {
                let receipt = sender.send(to, seg)?;
                first.get_or_insert(receipt.accepted_at);
            }
        }
        sent.push(SentMessage {
            tag_id: m.tag_id.clone(),
            sent_at: first.expect("at least one segment"),
        });
    }
    Ok(sent)
}

#[cfg(feature = "live")]
pub use live::{HttpAntiSpamClient, HttpBulkSender};

#[cfg(feature = "live")]
mod live {
    use super::*;

    /// Generic JSON anti-spam endpoint: POST `{"text": ...}` and read back
    /// either `{"score": x}` or `{"spam": bool}`. The key is sent as a
    /// bearer token.
    pub struct HttpAntiSpamClient {
        name: String,
        url: String,
        key: String,
        agent: ureq::Agent,
    }

    impl HttpAntiSpamClient {
        /// Reads the endpoint and key from the named environment variables.
        pub fn from_env(
            name: impl Into<String>,
            url_var: &str,
            key_var: &str,
        ) -> Result<Self, EvalError> {
            let name = name.into();
            let var = |v: &str| {
                std::env::var(v).map_err(|_| EvalError::Service {
                    service: name.clone(),
                    reason: format!("{v} is not set"),
                })
            };
            Ok(Self {
                url: var(url_var)?,
                key: var(key_var)?,
                agent: ureq::Agent::new_with_defaults(),
                name,
            })
        }
    }

    impl AntiSpamClient for HttpAntiSpamClient {
        fn name(&self) -> &str {
            &self.name
        }

        fn check(&self, text: &str) -> Result<ServiceAnswer, EvalError> {
            let err = |reason: String| EvalError::Service {
                service: self.name.clone(),
                reason,
            };
            let body: serde_json::Value = self
                .agent
                .post(&self.url)
                .header("authorization", &format!("Bearer {}", self.key))
                .send_json(serde_json::json!({ "text": text }))
                .map_err(|e| err(e.to_string()))?
                .body_mut()
                .read_json()
                .map_err(|e| err(e.to_string()))?;
            if let Some(s) = body["score"].as_f64() {
                return Ok(ServiceAnswer::Score(s));
            }
            body["spam"]
                .as_bool()
                .map(ServiceAnswer::Label)
                .ok_or_else(|| err("response has no score or spam field".into()))
        }
    }

    /// Generic JSON bulk-SMS endpoint: POST `{"to": ..., "body": ...}` and
    /// read back `{"id": ...}`.
    pub struct HttpBulkSender {
        name: String,
        url: String,
        key: String,
        agent: ureq::Agent,
    }

    impl HttpBulkSender {
        pub fn from_env(
            name: impl Into<String>,
            url_var: &str,
            key_var: &str,
        ) -> Result<Self, EvalError> {
            let var =
                |v: &str| std::env::var(v).map_err(|_| EvalError::Send(format!("{v} is not set")));
            Ok(Self {
                name: name.into(),
                url: var(url_var)?,
                key: var(key_var)?,
                agent: ureq::Agent::new_with_defaults(),
            })
        }
    }

    impl BulkSender for HttpBulkSender {
        fn name(&self) -> &str {
            &self.name
        }

        fn send(&self, to: &str, body: &str) -> Result<SendReceipt, EvalError> {
            let accepted_at = Utc::now();
            let resp: serde_json::Value = self
                .agent
                .post(&self.url)
                .header("authorization", &format!("Bearer {}", self.key))
                .send_json(serde_json::json!({ "to": to, "body": body }))
                .map_err(|e| EvalError::Send(e.to_string()))?
                .body_mut()
                .read_json()
                .map_err(|e| EvalError::Send(e.to_string()))?;
            let message_id = resp["id"]
                .as_str()
                .ok_or_else(|| EvalError::Send("response has no id".into()))?;
            Ok(SendReceipt {
                message_id: message_id.to_string(),
                accepted_at,
            })
        }
    }
}
