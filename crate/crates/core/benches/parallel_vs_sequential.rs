use std::hint::black_box;

use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spamtrail_core::screenshot::{
    assemble_messages, BoundingBox, DetectedCell, OcrParagraph, DEFAULT_OVERLAP_THRESHOLD,
};
use spamtrail_core::spamintel::{cluster_campaigns, template_groups, SpamMessage};
use spamtrail_core::srtc::{kfold_evaluate, Label, LabeledText, TrainConfig};
use spamtrail_core::urlintel::SuffixList;
use spamtrail_core::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

const WORDS: &[&str] = &[
    "your", "account", "has", "been", "blocked", "verify", "now", "at", "parcel", "waiting", "pay",
    "fee", "rs", "points", "expire", "today", "click", "link", "bank", "loan", "approved", "win",
    "prize", "claim",
];

fn messages(n: usize, n_urls: usize, seed: u64) -> Vec<SpamMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..rng.gen_range(6..16))
                .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                .collect();
            SpamMessage {
                message_id: format!("m{i:06}"),
                text: format!("{} {}", words.join(" "), rng.gen_range(100..99999)),
                report_date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
                language: "en".into(),
                sender_raw: None,
                urls: (0..rng.gen_range(0..3))
                    .map(|_| format!("http://u{}.com", rng.gen_range(0..n_urls)))
                    .collect(),
                source_tweet_id: format!("t{i}"),
                author_id: format!("a{i}"),
                tagged_accounts: vec![],
                category: None,
            }
        })
        .collect()
}

fn bench_clustering(c: &mut Criterion) {
    let ms = messages(20_000, 15_000, 1);
    let mut g = c.benchmark_group("cluster_campaigns");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, ms.len()), &ms, |b, ms| {
            b.iter(|| cluster_campaigns(black_box(ms), exec))
        });
    }
    g.finish();
}

fn bench_templates(c: &mut Criterion) {
    let ms = messages(600, 100, 2);
    let suffixes = SuffixList::default();
    let mut g = c.benchmark_group("template_groups");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, ms.len()), &ms, |b, ms| {
            b.iter(|| template_groups(black_box(ms), 0.8, &suffixes, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_kfold(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<LabeledText> = (0..400)
        .map(|i| {
            let spam = i % 2 == 0;
            let pool: &[&str] = if spam {
                &["scam", "sms", "phishing", "fraud"]
            } else {
                &["lunch", "game", "weather", "music"]
            };
            let text: Vec<&str> = (0..6).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            LabeledText {
                text: text.join(" "),
                label: if spam {
                    Label::SpamReporting
                } else {
                    Label::NotSpamReporting
                },
            }
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 5,
        hidden_size: 16,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("kfold_evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| kfold_evaluate(black_box(&data), 5, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_assembly(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shots: Vec<(Vec<DetectedCell>, Vec<OcrParagraph>)> = (0..2_000)
        .map(|_| {
            let cells = (0..4)
                .map(|k| DetectedCell {
                    bbox: BoundingBox::new(20, 200 + 300 * k, 680, 260).unwrap(),
                    confidence: 0.9,
                })
                .collect();
            let paras = (0..40)
                .map(|k| OcrParagraph {
                    text: format!("line {k}"),
                    bbox: BoundingBox::new(rng.gen_range(0..600), rng.gen_range(0..1400), 100, 30)
                        .unwrap(),
                })
                .collect();
            (cells, paras)
        })
        .collect();
    let mut g = c.benchmark_group("assemble_messages");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                exec.map(black_box(&shots), |(cells, paras)| {
                    assemble_messages(cells, paras, DEFAULT_OVERLAP_THRESHOLD)
                })
            })
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_clustering,
    bench_templates,
    bench_kfold,
    bench_assembly
);
criterion_main!(benches);
