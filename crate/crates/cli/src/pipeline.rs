use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spamtrail_core::corpus::{
    parse_corpus, FixtureTweetSource, ImageRef, Reply, TweetRecord, TweetSource,
};
use spamtrail_core::evalharness::{
    blocking_report, build_testset, detection_report, match_deliveries, mis_alarm_rate,
    run_service, send_testset, tag_benign, AntiSpamClient, BulkSender, DeliveryEvent,
    FixtureAnswer, FixtureAntiSpam, PoolItem, ServiceReport, ServiceVerdict, SimulatedCarrier,
    TestMessage,
};
use spamtrail_core::screenshot::{
    analyze, AssembledMessage, CellDetector, DetectedCell, FixtureDetector, FixtureRecognizer,
    ScreenshotAnalysis, TextRecognizer,
};
use spamtrail_core::spamintel::{
    blacklist_hit_rate, classify_sender, cluster_campaigns, cross_language, phone_rollup,
    reporter_stats, tag_reply_stats, template_groups, time_series, FixtureBlacklist,
    FixturePhoneLookup, GroupBy, LanguageDetector, PhoneRollup, SenderIdentity, SenderKind,
    SeriesRow, SpamMessage, StopwordProfiles, VictimServiceMap,
};
use spamtrail_core::srtc::{
    kfold_evaluate, oversample, train, Classifier, Label, LabeledText, Metrics,
};
use spamtrail_core::text::collapse_whitespace;
use spamtrail_core::urlintel::{
    aggregate_threat, fqdn_of, is_shortener, lookup_all, resolve_all, shortener_share, timeliness,
    timeliness_pairs, FixtureThreatIntel, GapRow, RedirectClient, ResolveOptions,
    ScriptedRedirects, ShortenerSet, SuffixList, Termination, ThreatReport, ThreatTable,
    DEFAULT_GAP_THRESHOLDS, DEFAULT_VT_THRESHOLDS,
};
use spamtrail_core::Execution;

use crate::config::PipelineConfig;
use crate::store::{CliError, Result, Store};

pub const COLLECTED: &str = "collected.ndjson";
pub const SMS_IMAGES: &str = "sms_images.ndjson";
pub const MODEL: &str = "model.json";
pub const SPAM_REPORTS: &str = "spam_reports.ndjson";
pub const RECOGNIZED: &str = "recognized.ndjson";
pub const MESSAGES: &str = "messages.ndjson";
pub const RESOLVED: &str = "resolved_messages.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Extract,
    ClassifyTrain,
    Classify,
    ResolveUrls,
    Enrich,
    Cluster,
    Stats,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::ClassifyTrain,
        Stage::Classify,
        Stage::ResolveUrls,
        Stage::Enrich,
        Stage::Cluster,
        Stage::Stats,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::ClassifyTrain => "classify-train",
            Stage::Classify => "classify",
            Stage::ResolveUrls => "resolve-urls",
            Stage::Enrich => "enrich",
            Stage::Cluster => "cluster",
            Stage::Stats => "stats",
            Stage::Eval => "eval",
        }
    }
}

pub struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub exec: Execution,
}

impl Context<'_> {
    pub fn run(&self, stage: Stage, store: &mut Store) -> Result<()> {
        tracing::info!(stage = stage.name(), "running");
        match stage {
            Stage::Ingest => self.ingest(store),
            Stage::Extract => self.extract(store),
            Stage::ClassifyTrain => self.classify_train(store),
            Stage::Classify => self.classify(store),
            Stage::ResolveUrls => self.resolve_urls(store),
            Stage::Enrich => self.enrich(store),
            Stage::Cluster => self.cluster(store),
            Stage::Stats => self.stats(store),
            Stage::Eval => self.eval(store),
        }
    }

    fn suffixes(&self, store: &mut Store) -> Result<SuffixList> {
        Ok(if self.cfg.suffix_list.is_file() {
            SuffixList::parse(&store.read_input(&self.cfg.suffix_list)?)
        } else {
            SuffixList::default()
        })
    }

    fn victim_map(&self, store: &mut Store) -> Result<VictimServiceMap> {
        let path = &self.cfg.victim_services;
        if !path.is_file() {
            return Ok(VictimServiceMap::default());
        }
        VictimServiceMap::from_json(&store.read_input(path)?).map_err(|e| CliError::input(path, e))
    }

    fn languages(&self, store: &mut Store) -> Result<StopwordProfiles> {
        let path = &self.cfg.language_profiles;
        if !path.is_file() {
            return Ok(StopwordProfiles::default());
        }
        StopwordProfiles::from_json(&store.read_input(path)?).map_err(|e| CliError::input(path, e))
    }

    fn ingest(&self, store: &mut Store) -> Result<()> {
        let path = &self.cfg.corpus;
        let raw = store.read_input(path)?;
        let parsed = parse_corpus(raw.as_bytes()).map_err(|e| CliError::input(path, e))?;
        if !parsed.skips.is_empty() {
            tracing::warn!(skipped = parsed.skips.len(), "corpus lines skipped");
        }
        let source = FixtureTweetSource::new(parsed.records, 100);
        let mut tweets = source
            .search_all(&self.cfg.query, &self.cfg.window())
            .map_err(|e| CliError::input(path, e))?;
        tweets.sort_by(|a, b| a.tweet_id.cmp(&b.tweet_id));
        store.write_ndjson(COLLECTED, &tweets)?;
        Ok(())
    }

    fn extract(&self, store: &mut Store) -> Result<()> {
        let tweets: Vec<TweetRecord> = store.read_stage(COLLECTED, Stage::Ingest.name())?;
        let path = &self.cfg.detections;
        store.note_input(path)?;
        let detector = FixtureDetector::load(path).map_err(|e| CliError::input(path, e))?;
        let rows = self
            .exec
            .map(&tweets, |t| -> Result<Option<SmsImageTweet>> {
                let mut images = Vec::new();
                for image in &t.attachments {
                    let cells = detector
                        .detect(image)
                        .map_err(|e| CliError::input(path, e))?;
                    if !cells.is_empty() {
                        images.push(ImageCells {
                            image_id: image.image_id.clone(),
                            cells,
                        });
                    }
                }
                Ok((!images.is_empty()).then(|| SmsImageTweet {
                    tweet: t.clone(),
                    images,
                }))
            });
        let rows: Vec<SmsImageTweet> = rows
            .into_iter()
            .filter_map(Result::transpose)
            .collect::<Result<_>>()?;
        store.write_ndjson(SMS_IMAGES, &rows)?;
        Ok(())
    }

    fn classify_train(&self, store: &mut Store) -> Result<()> {
        let path = &self.cfg.labeled;
        let data: Vec<LabeledText> = store.read_input_ndjson(path)?;
        let balanced = oversample(&data).map_err(|e| CliError::input(path, e))?;
        let model = train(&balanced, &self.cfg.train).map_err(|e| CliError::input(path, e))?;
        let mut raw = model.to_json().map_err(|e| CliError::Run(e.to_string()))?;
        raw.push('\n');
        store.write_text(MODEL, &raw)?;

        let cv = kfold_evaluate(&data, self.cfg.folds, &self.cfg.train, self.exec)
            .map_err(|e| CliError::input(path, e))?;
        let summary = CvSummary {
            items: data.len(),
            spam_reporting: data
                .iter()
                .filter(|d| d.label == Label::SpamReporting)
                .count(),
            trained_on: balanced.len(),
            vocabulary: model.vocabulary.len(),
            folds: self.cfg.folds,
            pooled: cv.pooled,
            per_fold: cv.folds.iter().map(|f| f.metrics).collect(),
        };
        store.write_json("classifier_cv.json", &summary)?;
        Ok(())
    }

    fn classify(&self, store: &mut Store) -> Result<()> {
        let tweets: Vec<SmsImageTweet> = store.read_stage(SMS_IMAGES, Stage::Extract.name())?;
        let raw = store.read_stage_raw(MODEL, Stage::ClassifyTrain.name())?;
        let model =
            Classifier::from_json(&raw).map_err(|e| CliError::input(&store.path(MODEL), e))?;
        let path = &self.cfg.ocr;
        store.note_input(path)?;
        let recognizer = FixtureRecognizer::load(path).map_err(|e| CliError::input(path, e))?;
        let threshold = self.cfg.overlap_threshold;

        let classified = self
            .exec
            .map(&tweets, |t| -> Result<Option<ClassifiedTweet>> {
                let p = model.predict(&t.tweet.text);
                if p.label != Label::SpamReporting {
                    return Ok(None);
                }
                let mut analyses = Vec::with_capacity(t.images.len());
                for img in &t.images {
                    let image = image_ref(&t.tweet, &img.image_id);
                    let paragraphs = recognizer
                        .ocr(&image)
                        .map_err(|e| CliError::input(path, e))?;
                    analyses.push(analyze(
                        &img.image_id,
                        img.cells.clone(),
                        paragraphs,
                        threshold,
                    ));
                }
                Ok(Some(ClassifiedTweet {
                    tweet: t.tweet.clone(),
                    p_spam_report: p.p_spam_report,
                    analyses,
                }))
            });
        let reports: Vec<ClassifiedTweet> = classified
            .into_iter()
            .filter_map(Result::transpose)
            .collect::<Result<_>>()?;

        let recognized: Vec<RecognizedTweet> = reports
            .iter()
            .filter_map(|r| {
                let images: Vec<RecognizedImage> = r
                    .analyses
                    .iter()
                    .filter(|a| a.messages.iter().any(|m| !m.text.trim().is_empty()))
                    .map(|a| RecognizedImage {
                        image_id: a.image_id.clone(),
                        sender_raw: a.sender_raw.clone(),
                        messages: a.messages.clone(),
                    })
                    .collect();
                (!images.is_empty()).then(|| RecognizedTweet {
                    tweet_id: r.tweet.tweet_id.clone(),
                    images,
                })
            })
            .collect();

        let suffixes = self.suffixes(store)?;
        let detector = self.languages(store)?;
        let messages = build_messages(&reports, &suffixes, &detector);

        store.write_ndjson(SPAM_REPORTS, &reports)?;
        store.write_ndjson(RECOGNIZED, &recognized)?;
        store.write_ndjson(MESSAGES, &messages)?;
        Ok(())
    }

    fn resolve_urls(&self, store: &mut Store) -> Result<()> {
        let messages: Vec<SpamMessage> = store.read_stage(MESSAGES, Stage::Classify.name())?;
        let shorteners = ShortenerSet::default();
        let all_urls: BTreeSet<&str> = messages
            .iter()
            .flat_map(|m| m.urls.iter().map(String::as_str))
            .collect();
        let targets: Vec<&str> = all_urls
            .iter()
            .copied()
            .filter(|u| fqdn_of(u).is_ok_and(|h| is_shortener(&h, &shorteners)))
            .collect();

        let client = self.redirect_client(store)?;
        let opts = ResolveOptions {
            max_hops: self.cfg.max_hops,
            per_hop_timeout: Duration::from_secs(self.cfg.hop_timeout_secs),
        };
        let resolutions = resolve_all(&targets, client.as_ref(), &opts, self.exec);
        let finals: HashMap<&str, &str> = targets
            .iter()
            .zip(&resolutions)
            .filter_map(|(u, r)| r.landing_url().map(|l| (*u, l)))
            .collect();

        let resolved: Vec<SpamMessage> = messages
            .iter()
            .map(|m| {
                let mut seen = BTreeSet::new();
                let urls = m
                    .urls
                    .iter()
                    .map(|u| finals.get(u.as_str()).copied().unwrap_or(u).to_string())
                    .filter(|u| seen.insert(u.clone()))
                    .collect();
                SpamMessage { urls, ..m.clone() }
            })
            .collect();

        let urls: Vec<&str> = all_urls.iter().copied().collect();
        let mut by_termination: BTreeMap<Termination, usize> = BTreeMap::new();
        for r in &resolutions {
            *by_termination.entry(r.terminated_by).or_default() += 1;
        }
        let summary = UrlSummary {
            distinct_urls: urls.len(),
            shortened: targets.len(),
            shortener_share: shortener_share(&urls, &shorteners).ok(),
            resolved_to_landing: finals.len(),
            by_termination,
        };
        store.write_ndjson("resolutions.ndjson", &resolutions)?;
        store.write_ndjson(RESOLVED, &resolved)?;
        store.write_json("url_summary.json", &summary)?;
        Ok(())
    }

    fn redirect_client(&self, store: &mut Store) -> Result<Box<dyn RedirectClient>> {
        if self.cfg.live_urls {
            #[cfg(feature = "live")]
            {
                return Ok(Box::new(spamtrail_core::urlintel::HttpRedirectClient::new(
                    Duration::from_millis(500),
                )));
            }
            #[cfg(not(feature = "live"))]
            return Err(CliError::Run(
                "--live-urls needs a build with the `live` feature".into(),
            ));
        }
        let path = &self.cfg.redirects;
        let raw = store.read_input(path)?;
        Ok(Box::new(
            ScriptedRedirects::read_ndjson(raw.as_bytes()).map_err(|e| CliError::input(path, e))?,
        ))
    }

    fn enrich(&self, store: &mut Store) -> Result<()> {
        let messages: Vec<SpamMessage> = store.read_stage(RESOLVED, Stage::ResolveUrls.name())?;
        let path = &self.cfg.threat;
        let raw = store.read_input(path)?;
        let intel = FixtureThreatIntel::read_ndjson(raw.as_bytes())
            .map_err(|e| CliError::input(path, e))?;

        let mut first_url: BTreeMap<String, NaiveDate> = BTreeMap::new();
        let mut first_fqdn: BTreeMap<String, NaiveDate> = BTreeMap::new();
        for m in &messages {
            for u in &m.urls {
                keep_earliest(&mut first_url, u.clone(), m.report_date);
                if let Ok(h) = fqdn_of(u) {
                    keep_earliest(&mut first_fqdn, h, m.report_date);
                }
            }
        }
        let url_subjects: Vec<&String> = first_url.keys().collect();
        let fqdn_subjects: Vec<&String> = first_fqdn.keys().collect();
        let lookup = |subjects: &[&String]| -> Result<Vec<ThreatReport>> {
            Ok(lookup_all(subjects, &intel, self.exec)
                .map_err(|e| CliError::input(path, e))?
                .into_iter()
                .flatten()
                .collect())
        };
        let (url_reports, fqdn_reports) = (lookup(&url_subjects)?, lookup(&fqdn_subjects)?);

        let url_table = aggregate_threat(&url_subjects, &url_reports, &DEFAULT_VT_THRESHOLDS);
        let fqdn_table = aggregate_threat(&fqdn_subjects, &fqdn_reports, &DEFAULT_VT_THRESHOLDS);
        let gaps = |first: &BTreeMap<String, NaiveDate>, reports: &[ThreatReport]| -> Vec<GapRow> {
            let first: HashMap<String, NaiveDate> =
                first.iter().map(|(k, v)| (k.clone(), *v)).collect();
            let pairs = timeliness_pairs(&first, reports);
            timeliness(&pairs, &DEFAULT_GAP_THRESHOLDS).unwrap_or_default()
        };
        let timely = Timeliness {
            urls: gaps(&first_url, &url_reports),
            fqdns: gaps(&first_fqdn, &fqdn_reports),
        };

        let reports: Vec<SubjectReport> = url_reports
            .iter()
            .map(|r| SubjectReport {
                kind: "url",
                report: r.clone(),
            })
            .chain(fqdn_reports.iter().map(|r| SubjectReport {
                kind: "fqdn",
                report: r.clone(),
            }))
            .collect();
        store.write_ndjson("threat_reports.ndjson", &reports)?;
        store.write_json(
            "threat.json",
            &ThreatTables {
                urls: url_table.clone(),
                fqdns: fqdn_table.clone(),
            },
        )?;
        store.write_csv(
            "threat.csv",
            &["subjects", "metric", "key", "count", "fraction"],
            &threat_rows(&url_table, &fqdn_table),
        )?;
        store.write_json("timeliness.json", &timely)?;
        let gap_rows: Vec<(&str, i64, usize, f64)> = timely
            .urls
            .iter()
            .map(|g| ("url", g.threshold_days, g.count, g.fraction))
            .chain(
                timely
                    .fqdns
                    .iter()
                    .map(|g| ("fqdn", g.threshold_days, g.count, g.fraction)),
            )
            .collect();
        store.write_csv(
            "timeliness.csv",
            &["subjects", "min_gap_days", "count", "fraction"],
            &gap_rows,
        )?;

        self.enrich_senders(store, &messages)
    }

    fn enrich_senders(&self, store: &mut Store, messages: &[SpamMessage]) -> Result<()> {
        let mut senders = Vec::new();
        for m in messages {
            let Some(raw) = m.sender_raw.as_deref() else {
                continue;
            };
            match classify_sender(raw) {
                Ok(identity) => senders.push(SenderRow {
                    message_id: m.message_id.clone(),
                    sender: identity,
                }),
                Err(e) => tracing::warn!(message = %m.message_id, "{e}"),
            }
        }
        let mut by_kind: BTreeMap<SenderKind, usize> = BTreeMap::new();
        for s in &senders {
            *by_kind.entry(s.sender.kind).or_default() += 1;
        }
        let numbers: Vec<&str> = senders
            .iter()
            .filter(|s| s.sender.kind == SenderKind::RegularNumber)
            .map(|s| s.sender.normalized.as_str())
            .collect();
        let phones = if self.cfg.phone_lookup.is_file() {
            let path = &self.cfg.phone_lookup;
            let raw = store.read_input(path)?;
            let lookup = FixturePhoneLookup::read_ndjson(raw.as_bytes())
                .map_err(|e| CliError::input(path, e))?;
            Some(phone_rollup(&numbers, &lookup).map_err(|e| CliError::input(path, e))?)
        } else {
            None
        };
        let blacklist = if self.cfg.blacklist.is_file() {
            let path = &self.cfg.blacklist;
            let list = FixtureBlacklist::parse(&store.read_input(path)?);
            blacklist_hit_rate(&numbers, &list).map_err(|e| CliError::input(path, e))?
        } else {
            None
        };
        store.write_ndjson("senders.ndjson", &senders)?;
        store.write_json(
            "sender_summary.json",
            &SenderSummary {
                messages_with_sender: senders.len(),
                by_kind,
                phone_rollup: phones,
                blacklist_hit_rate: blacklist,
            },
        )?;
        Ok(())
    }

    fn cluster(&self, store: &mut Store) -> Result<()> {
        let messages: Vec<SpamMessage> = store.read_stage(RESOLVED, Stage::ResolveUrls.name())?;
        let clustering = cluster_campaigns(&messages, self.exec);
        let cross = cross_language(&clustering.campaigns);
        let suffixes = self.suffixes(store)?;
        let groups = template_groups(
            &messages,
            self.cfg.template_similarity,
            &suffixes,
            self.exec,
        )
        .map_err(|e| CliError::Run(e.to_string()))?;
        let families: Vec<TemplateFamily> = groups
            .into_iter()
            .filter(|g| g.len() >= 2)
            .enumerate()
            .map(|(i, members)| TemplateFamily {
                family_id: i as u32 + 1,
                member_message_ids: members,
            })
            .collect();
        let summary = ClusterSummary {
            messages: messages.len(),
            campaigns: clustering.campaigns.len(),
            messages_in_campaigns: clustering
                .campaigns
                .iter()
                .map(|c| c.member_message_ids.len())
                .sum(),
            cross_language_campaigns: cross.len(),
            template_families: families.len(),
        };
        store.write_ndjson("campaigns.ndjson", &clustering.campaigns)?;
        store.write_ndjson("cross_language.ndjson", &cross)?;
        store.write_ndjson("templates.ndjson", &families)?;
        store.write_json("cluster_summary.json", &summary)?;
        Ok(())
    }

    fn stats(&self, store: &mut Store) -> Result<()> {
        let messages: Vec<SpamMessage> = store.read_stage(RESOLVED, Stage::ResolveUrls.name())?;
        let reports: Vec<ClassifiedTweet> = if store.exists(SPAM_REPORTS) {
            store.read_stage(SPAM_REPORTS, Stage::Classify.name())?
        } else {
            vec![]
        };
        let tweets: Vec<TweetRecord> = reports.into_iter().map(|r| r.tweet).collect();
        let replies: Vec<Reply> = if self.cfg.replies.is_file() {
            store.read_input_ndjson(&self.cfg.replies)?
        } else {
            vec![]
        };
        let accounts: BTreeMap<String, String> = if self.cfg.accounts.is_file() {
            let path = &self.cfg.accounts;
            serde_json::from_str(&store.read_input(path)?).map_err(|e| CliError::input(path, e))?
        } else {
            BTreeMap::new()
        };
        let victims = self.victim_map(store)?;

        let mut languages: BTreeMap<&str, usize> = BTreeMap::new();
        for m in &messages {
            *languages.entry(m.language.as_str()).or_default() += 1;
        }
        let mut language_rows: Vec<(&str, usize)> = languages.into_iter().collect();
        language_rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let by_language = time_series(&messages, GroupBy::Language);
        let by_victim = time_series(&messages, GroupBy::VictimService(&victims));
        let reporters = reporter_stats(&tweets);
        let tags = tag_reply_stats(&tweets, &replies, &accounts);

        store.write_csv(
            "stats/languages.csv",
            &["language", "messages"],
            &language_rows,
        )?;
        store.write_csv(
            "stats/series_language.csv",
            &["quarter", "language", "messages"],
            &series_rows(&by_language),
        )?;
        store.write_csv(
            "stats/series_victim.csv",
            &["quarter", "victim_service", "messages"],
            &series_rows(&by_victim),
        )?;
        store.write_csv(
            "stats/tag_replies.csv",
            &["handle", "tag_count", "replied_count", "reply_rate"],
            &tags
                .iter()
                .map(|t| (&t.handle, t.tag_count, t.replied_count, t.reply_rate))
                .collect::<Vec<_>>(),
        )?;
        store.write_json(
            "stats/stats.json",
            &StatsReport {
                messages: messages.len(),
                languages: language_rows
                    .iter()
                    .map(|(l, n)| (l.to_string(), *n))
                    .collect(),
                series_language: by_language,
                series_victim: by_victim,
                reporters,
                tag_replies: tags,
            },
        )?;
        Ok(())
    }

    fn eval(&self, store: &mut Store) -> Result<()> {
        let dir = &self.cfg.eval_dir;
        let (tw_path, hi_path) = (
            dir.join("twitter_pool.ndjson"),
            dir.join("historical_pool.ndjson"),
        );
        let twitter: Vec<PoolItem> = store.read_input_ndjson(&tw_path)?;
        let historical: Vec<PoolItem> = store.read_input_ndjson(&hi_path)?;
        let mut testset = build_testset(&twitter, &historical, self.cfg.seed)
            .map_err(|e| CliError::input(dir, e))?;
        testset.sort_by(|a, b| a.tag_id.cmp(&b.tag_id));

        let benign_path = dir.join("benign.ndjson");
        let benign_texts: Vec<BenignText> = if benign_path.is_file() {
            store.read_input_ndjson(&benign_path)?
        } else {
            vec![]
        };
        let texts: Vec<&str> = benign_texts.iter().map(|b| b.text.as_str()).collect();
        let mut benign = tag_benign(&texts, self.cfg.seed.wrapping_add(1), &testset);
        benign.sort_by(|a, b| a.tag_id.cmp(&b.tag_id));

        let answers_path = dir.join("antispam.ndjson");
        let answers: Vec<FixtureAnswer> = store.read_input_ndjson(&answers_path)?;
        let services = FixtureAntiSpam::from_answers(answers);
        let everything: Vec<TestMessage> = testset.iter().chain(&benign).cloned().collect();
        let mut verdicts = Vec::new();
        for s in &services {
            verdicts.extend(run_service(
                s as &dyn AntiSpamClient,
                &everything,
                self.cfg.score_cutoff,
                self.exec,
            ));
        }
        let test_tags: std::collections::HashSet<&str> =
            testset.iter().map(|m| m.tag_id.as_str()).collect();
        let test_verdicts: Vec<ServiceVerdict> = verdicts
            .iter()
            .filter(|v| test_tags.contains(v.tag_id.as_str()))
            .cloned()
            .collect();
        let detection = detection_report(&test_verdicts, &testset);
        let mis_alarm = mis_alarm_rate(&verdicts, &benign);

        let (sender_name, sent, events) = self.send(store, &testset)?;
        let deliveries = match_deliveries(
            &sent,
            &events,
            chrono::Duration::seconds(self.cfg.delivery_window_secs),
        );
        let blocking = blocking_report(&sender_name, &deliveries, &testset);

        store.write_ndjson("eval/testset.ndjson", &testset)?;
        store.write_ndjson("eval/benign.ndjson", &benign)?;
        store.write_ndjson("eval/verdicts.ndjson", &verdicts)?;
        store.write_ndjson("eval/sent.ndjson", &sent)?;
        store.write_ndjson("eval/delivery_events.ndjson", &events)?;
        store.write_ndjson("eval/deliveries.ndjson", &deliveries.outcomes)?;
        store.write_json("eval/detection.json", &detection)?;
        store.write_csv(
            "eval/detection.csv",
            &RATE_HEADER,
            &rate_rows(&detection.services),
        )?;
        store.write_json("eval/blocking.json", &blocking)?;
        store.write_csv(
            "eval/blocking.csv",
            &RATE_HEADER,
            &rate_rows(std::slice::from_ref(&blocking)),
        )?;
        store.write_json("eval/mis_alarm.json", &mis_alarm)?;
        store.write_csv(
            "eval/mis_alarm.csv",
            &["service", "flagged", "benign", "rate"],
            &mis_alarm
                .iter()
                .map(|(s, f)| (s, f.hit, f.total, f.percent(2)))
                .collect::<Vec<_>>(),
        )?;
        Ok(())
    }

    /// Send the test set through the simulated carrier, or through the bulk
    /// SMS endpoint when live sends were requested.
    fn send(
        &self,
        store: &mut Store,
        testset: &[TestMessage],
    ) -> Result<(
        String,
        Vec<spamtrail_core::evalharness::SentMessage>,
        Vec<DeliveryEvent>,
    )> {
        let dir = &self.cfg.eval_dir;
        if self.cfg.live_sends {
            #[cfg(feature = "live")]
            {
                let sender = spamtrail_core::evalharness::HttpBulkSender::from_env(
                    "bulk-sms",
                    SMS_URL_ENV,
                    SMS_KEY_ENV,
                )
                .map_err(|e| CliError::Run(e.to_string()))?;
                tracing::warn!(
                    messages = testset.len(),
                    receivers = self.cfg.receivers.len(),
                    "sending live SMS"
                );
                let sent = send_testset(&sender, testset, &self.cfg.receivers, self.cfg.sms_limit)
                    .map_err(|e| CliError::Run(e.to_string()))?;
                let log = dir.join("receiver_log.ndjson");
                let events = if log.is_file() {
                    store.read_input_ndjson(&log)?
                } else {
                    vec![]
                };
                return Ok((sender.name().to_string(), sent, events));
            }
            #[cfg(not(feature = "live"))]
            return Err(CliError::Run(
                "--live-sends needs a build with the `live` feature".into(),
            ));
        }
        let filter_path = dir.join("carrier_filter.txt");
        let filters: Vec<String> = if filter_path.is_file() {
            store
                .read_input(&filter_path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect()
        } else {
            vec![]
        };
        let dropped = testset
            .iter()
            .filter(|m| {
                let t = m.text.to_lowercase();
                filters.iter().any(|f| t.contains(f.as_str()))
            })
            .map(|m| m.tag_id.clone());
        let carrier = SimulatedCarrier::new(
            "simulated-carrier",
            Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
            chrono::Duration::seconds(2),
            chrono::Duration::seconds(45),
        )
        .drop_tags(dropped);
        let sent = send_testset(&carrier, testset, &self.cfg.receivers, self.cfg.sms_limit)
            .map_err(|e| CliError::Run(e.to_string()))?;
        Ok((carrier.name().to_string(), sent, carrier.events()))
    }
}

pub const SMS_URL_ENV: &str = "SPAMTRAIL_SMS_URL";
pub const SMS_KEY_ENV: &str = "SPAMTRAIL_SMS_KEY";

fn keep_earliest(map: &mut BTreeMap<String, NaiveDate>, key: String, date: NaiveDate) {
    map.entry(key)
        .and_modify(|d| *d = (*d).min(date))
        .or_insert(date);
}

fn image_ref(tweet: &TweetRecord, image_id: &str) -> ImageRef {
    tweet
        .attachments
        .iter()
        .find(|i| i.image_id == image_id)
        .cloned()
        .unwrap_or_else(|| ImageRef {
            image_id: image_id.to_string(),
            location: String::new(),
            width_px: 0,
            height_px: 0,
        })
}

/// Stable id of a message: a digest of its whitespace-normalized text.
pub fn message_id(normalized_text: &str) -> String {
    let digest = format!("{:x}", Sha256::digest(normalized_text.as_bytes()));
    format!("m{}", &digest[..16])
}

/// One record per distinct message text. The earliest reporting tweet
/// (by time, then id) supplies the date, reporter and sender.
pub fn build_messages(
    reports: &[ClassifiedTweet],
    suffixes: &SuffixList,
    detector: &dyn LanguageDetector,
) -> Vec<SpamMessage> {
    let mut order: Vec<&ClassifiedTweet> = reports.iter().collect();
    order.sort_by(|a, b| {
        (a.tweet.created_at, &a.tweet.tweet_id).cmp(&(b.tweet.created_at, &b.tweet.tweet_id))
    });
    let mut out: BTreeMap<String, SpamMessage> = BTreeMap::new();
    for r in order {
        for a in &r.analyses {
            for m in &a.messages {
                let text = collapse_whitespace(&m.text);
                if text.is_empty() {
                    continue;
                }
                let id = message_id(&text);
                if out.contains_key(&id) {
                    continue;
                }
                let urls = spamtrail_core::urlintel::extract_urls(&text, &id, suffixes)
                    .into_iter()
                    .map(|u| u.normalized)
                    .collect();
                out.insert(
                    id.clone(),
                    SpamMessage {
                        message_id: id,
                        language: detector.detect(&text),
                        text,
                        report_date: r.tweet.created_at.date_naive(),
                        sender_raw: a.sender_raw.clone(),
                        urls,
                        source_tweet_id: r.tweet.tweet_id.clone(),
                        author_id: r.tweet.author_id.clone(),
                        tagged_accounts: r.tweet.tagged_accounts.clone(),
                        category: None,
                    },
                );
            }
        }
    }
    out.into_values().collect()
}

fn series_rows(rows: &[SeriesRow]) -> Vec<(&str, &str, usize)> {
    rows.iter()
        .map(|r| (r.bucket.as_str(), r.key.as_str(), r.count))
        .collect()
}

fn threat_rows<'a>(
    urls: &'a ThreatTable,
    fqdns: &'a ThreatTable,
) -> Vec<(&'a str, &'a str, String, usize, f64)> {
    let mut rows = Vec::new();
    for (kind, t) in [("url", urls), ("fqdn", fqdns)] {
        rows.push((kind, "subjects", String::new(), t.subjects, 1.0));
        for r in &t.vt_at_least {
            rows.push((kind, "vt_at_least", r.k.to_string(), r.count, r.fraction));
        }
        for r in &t.categories {
            rows.push((
                kind,
                "category",
                r.category.as_str().to_string(),
                r.count,
                r.fraction,
            ));
        }
    }
    rows
}

const RATE_HEADER: [&str; 8] = [
    "service",
    "overall",
    "twitter",
    "historical",
    "ads",
    "fraud",
    "errors",
    "missing",
];

#[derive(Serialize)]
struct RateRow {
    service: String,
    overall: String,
    twitter: String,
    historical: String,
    ads: String,
    fraud: String,
    errors: usize,
    missing: usize,
}

fn rate_rows(reports: &[ServiceReport]) -> Vec<RateRow> {
    reports
        .iter()
        .map(|r| RateRow {
            service: r.service_name.clone(),
            overall: r.overall.percent(0),
            twitter: r.twitter.percent(0),
            historical: r.historical.percent(0),
            ads: r.ads.percent(0),
            fraud: r.fraud.percent(0),
            errors: r.errors,
            missing: r.missing,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageCells {
    pub image_id: String,
    pub cells: Vec<DetectedCell>,
}

/// A collected tweet with at least one detected SMS text cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmsImageTweet {
    pub tweet: TweetRecord,
    pub images: Vec<ImageCells>,
}

/// A tweet the classifier accepted as a spam report, with its screenshots
/// read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifiedTweet {
    pub tweet: TweetRecord,
    pub p_spam_report: f64,
    pub analyses: Vec<ScreenshotAnalysis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognizedImage {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender_raw: Option<String>,
    pub messages: Vec<AssembledMessage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognizedTweet {
    pub tweet_id: String,
    pub images: Vec<RecognizedImage>,
}

#[derive(Debug, Serialize)]
struct CvSummary {
    items: usize,
    spam_reporting: usize,
    trained_on: usize,
    vocabulary: usize,
    folds: usize,
    pooled: Metrics,
    per_fold: Vec<Metrics>,
}

#[derive(Debug, Serialize)]
struct UrlSummary {
    distinct_urls: usize,
    shortened: usize,
    shortener_share: Option<f64>,
    resolved_to_landing: usize,
    by_termination: BTreeMap<Termination, usize>,
}

#[derive(Debug, Serialize)]
struct SubjectReport {
    kind: &'static str,
    #[serde(flatten)]
    report: ThreatReport,
}

#[derive(Debug, Serialize)]
struct ThreatTables {
    urls: ThreatTable,
    fqdns: ThreatTable,
}

#[derive(Debug, Serialize)]
struct Timeliness {
    urls: Vec<GapRow>,
    fqdns: Vec<GapRow>,
}

#[derive(Debug, Serialize)]
struct SenderRow {
    message_id: String,
    #[serde(flatten)]
    sender: SenderIdentity,
}

#[derive(Debug, Serialize)]
struct SenderSummary {
    messages_with_sender: usize,
    by_kind: BTreeMap<SenderKind, usize>,
    phone_rollup: Option<PhoneRollup>,
    blacklist_hit_rate: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TemplateFamily {
    family_id: u32,
    member_message_ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ClusterSummary {
    messages: usize,
    campaigns: usize,
    messages_in_campaigns: usize,
    cross_language_campaigns: usize,
    template_families: usize,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    messages: usize,
    languages: BTreeMap<String, usize>,
    series_language: Vec<SeriesRow>,
    series_victim: Vec<SeriesRow>,
    reporters: spamtrail_core::spamintel::ReporterStats,
    tag_replies: Vec<spamtrail_core::spamintel::TagStats>,
}

#[derive(Debug, Deserialize)]
struct BenignText {
    text: String,
}

/// Earliest and latest collected tweet, as recorded in run manifests.
pub fn tweet_span(tweets: &[TweetRecord]) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
    let first = tweets.iter().map(|t| t.created_at).min()?;
    let last = tweets.iter().map(|t| t.created_at).max()?;
    Some((first, last))
}
