use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use proptest::prelude::*;
use spamtrail_core::corpus::{Reply, TweetRecord};
use spamtrail_core::spamintel::*;
use spamtrail_core::Execution;

fn message(i: usize, urls: Vec<String>, lang: &str, day: i64, tags: Vec<String>) -> SpamMessage {
    SpamMessage {
        message_id: format!("m{i:04}"),
        text: format!("text {i}"),
        report_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + Duration::days(day),
        language: lang.into(),
        sender_raw: None,
        urls,
        source_tweet_id: format!("t{i}"),
        author_id: format!("a{i}"),
        tagged_accounts: tags,
        category: None,
    }
}

fn instances() -> impl Strategy<Value = Vec<SpamMessage>> {
    (1usize..=50).prop_flat_map(|n_urls| {
        prop::collection::vec(prop::collection::vec(0..n_urls, 0..4), 0..=200).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, us)| {
                    message(
                        i,
                        us.into_iter().map(|u| format!("http://u{u}.com")).collect(),
                        "en",
                        0,
                        vec![],
                    )
                })
                .collect()
        })
    })
}

/// Connected components of the shares-a-URL graph by BFS over explicit edges.
fn bfs_components(ms: &[SpamMessage]) -> BTreeSet<BTreeSet<String>> {
    let n = ms.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if ms[i].urls.iter().any(|u| ms[j].urls.contains(u)) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = BTreeSet::new();
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            comp.insert(ms[v].message_id.clone());
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn as_sets(c: &Clustering) -> BTreeSet<BTreeSet<String>> {
    c.clusters
        .iter()
        .map(|g| g.iter().cloned().collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn clustering_equals_bfs_oracle(ms in instances()) {
        let oracle = bfs_components(&ms);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let c = cluster_campaigns(&ms, exec);
            prop_assert_eq!(as_sets(&c), oracle.clone());
            let covered: usize = c.clusters.iter().map(Vec::len).sum();
            prop_assert_eq!(covered, ms.len());
            prop_assert_eq!(c.campaigns.len(), oracle.iter().filter(|g| g.len() >= 2).count());
            for camp in &c.campaigns {
                prop_assert!(camp.member_message_ids.len() >= 2);
                prop_assert!(!camp.shared_urls.is_empty());
            }
        }
    }

    #[test]
    fn clustering_ignores_input_order(ms in instances(), seed: u64) {
        let mut shuffled = ms.clone();
        let mut rng = seed;
        for i in (1..shuffled.len()).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (rng >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(cluster_campaigns(&ms, Execution::Parallel), cluster_campaigns(&shuffled, Execution::Parallel));
    }

    #[test]
    fn shard_merge_is_order_insensitive(ms in instances(), cut_a in 0usize..200, cut_b in 0usize..200) {
        let n = ms.len();
        let (a, b) = (cut_a.min(n), cut_b.min(n));
        let (lo, hi) = (a.min(b), a.max(b));
        let shard = |r: std::ops::Range<usize>| {
            let mut l = UrlLinks::default();
            for i in r {
                l.observe(i, &ms[i].urls);
            }
            l
        };
        let comps = |l: UrlLinks| l.into_forest(n).components();
        let left = shard(0..lo).merge(shard(lo..hi)).merge(shard(hi..n));
        let right = shard(hi..n).merge(shard(0..lo).merge(shard(lo..hi)));
        let whole = shard(0..n);
        prop_assert_eq!(comps(left), comps(whole.clone()));
        prop_assert_eq!(comps(right), comps(whole));
    }

    #[test]
    fn sender_typing_is_total(raw in "[ \\-()]{0,2}[+]?[0-9A-Za-z .\\-()#*]{1,20}") {
        prop_assume!(raw.chars().any(|c| !c.is_whitespace() && !matches!(c, '-' | '(' | ')')));
        let id = classify_sender(&raw).unwrap();
        let digits = id.normalized.strip_prefix('+').unwrap_or(&id.normalized);
        let numeric = !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit());
        let expected = match (numeric, digits.len()) {
            (true, n) if n >= 7 => SenderKind::RegularNumber,
            (true, _) => SenderKind::ShortCode,
            (false, _) => SenderKind::AlphaSenderId,
        };
        prop_assert_eq!(id.kind, expected);
        prop_assert!(!id.normalized.contains([' ', '-', '(', ')']));
    }

    #[test]
    fn replies_never_exceed_tags(
        tweets in prop::collection::vec((prop::collection::vec(0usize..4, 0..3), 0i64..100), 0..30),
        replies in prop::collection::vec((0usize..30, 0usize..5, -5i64..40), 0..60),
    ) {
        let handles = ["HSBC", "FCC", "PayPal", "hsbc"];
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        let ts: Vec<TweetRecord> = tweets.iter().enumerate().map(|(i, (tags, d))| TweetRecord {
            tweet_id: format!("{i}"),
            text: String::new(),
            created_at: t0 + Duration::days(*d),
            author_id: format!("u{i}"),
            conversation_id: format!("c{i}"),
            attachments: vec![],
            tagged_accounts: tags.iter().map(|&h| handles[h].to_string()).collect(),
            source_agent: String::new(),
            geo_country: None,
        }).collect();
        let rs: Vec<Reply> = replies.iter().map(|&(c, a, d)| Reply {
            conversation_id: format!("c{c}"),
            author_id: format!("acct{a}"),
            created_at: t0 + Duration::days(d),
        }).collect();
        let accounts = BTreeMap::from([
            ("hsbc".to_string(), "acct0".to_string()),
            ("fcc".to_string(), "acct1".to_string()),
        ]);
        for row in tag_reply_stats(&ts, &rs, &accounts) {
            prop_assert!(row.replied_count <= row.tag_count);
            prop_assert!(row.tag_count > 0);
            prop_assert_eq!(row.reply_rate, row.replied_count as f64 / row.tag_count as f64);
        }
    }

    #[test]
    fn series_counts_sum_per_key(rows in prop::collection::vec((prop::sample::select(vec!["en", "id", "nl", "und"]), 0i64..1500, prop::collection::vec(prop::sample::select(vec!["hsbc", "paypal", "fcc", "nobody"]), 0..3)), 0..60)) {
        let ms: Vec<SpamMessage> = rows.iter().enumerate()
            .map(|(i, (l, d, tags))| message(i, vec![], l, *d, tags.iter().map(|s| s.to_string()).collect()))
            .collect();
        let mut by_lang: HashMap<String, usize> = HashMap::new();
        for r in time_series(&ms, GroupBy::Language) {
            *by_lang.entry(r.key).or_default() += r.count;
        }
        for (lang, total) in by_lang {
            prop_assert_eq!(total, ms.iter().filter(|m| m.language == lang).count());
        }
        let map = VictimServiceMap::default();
        let series = time_series(&ms, GroupBy::VictimService(&map));
        for w in series.windows(2) {
            prop_assert!(w[0].bucket < w[1].bucket || (w[0].bucket == w[1].bucket && w[0].count >= w[1].count));
        }
        let mut by_service: HashMap<String, usize> = HashMap::new();
        for r in series {
            *by_service.entry(r.key).or_default() += r.count;
        }
        for (service, total) in by_service {
            let carrying = ms.iter().filter(|m| m.tagged_accounts.iter().any(|h| map.victim_service(h) == Some(service.as_str()))).count();
            prop_assert_eq!(total, carrying);
        }
    }
}
