use proptest::prelude::*;
use spamtrail_core::screenshot::*;

fn boxes_in(grid: u32) -> impl Strategy<Value = BoundingBox> {
    (0..grid, 0..grid)
        .prop_flat_map(move |(x, y)| (Just(x), Just(y), 1..=grid - x, 1..=grid - y))
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

/// Count covered unit pixels directly.
fn lattice(a: &BoundingBox, b: &BoundingBox) -> (u64, u64) {
    let covers = |r: &BoundingBox, px: u32, py: u32| {
        px >= r.x && px < r.x + r.w && py >= r.y && py < r.y + r.h
    };
    let (mut inter, mut union) = (0, 0);
    for py in 0..100 {
        for px in 0..100 {
            let (ia, ib) = (covers(a, px, py), covers(b, px, py));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    (inter, union)
}

fn para(text: &str, x: u32, y: u32, w: u32, h: u32) -> OcrParagraph {
    OcrParagraph {
        text: text.into(),
        bbox: BoundingBox::new(x, y, w, h).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ratios_match_pixel_lattice(a in boxes_in(100), b in boxes_in(100)) {
        let (inter, union) = lattice(&a, &b);
        let r = iou_ratio(&a, &b);
        prop_assert_eq!((r.numerator, r.denominator), (inter, union));
        let o = overlap_ratio_parts(&a, &b);
        prop_assert_eq!((o.numerator, o.denominator), (inter, a.area()));
    }

    #[test]
    fn iou_symmetric_and_reflexive(a in boxes_in(100), b in boxes_in(100)) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn contained_paragraph_overlaps_fully(cell in boxes_in(100), fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
        let x = cell.x + (fx * (cell.w - 1) as f64) as u32;
        let y = cell.y + (fy * (cell.h - 1) as f64) as u32;
        let w = 1 + (fw * (cell.x + cell.w - x - 1) as f64) as u32;
        let h = 1 + (fh * (cell.y + cell.h - y - 1) as f64) as u32;
        let p = BoundingBox::new(x, y, w, h).unwrap();
        prop_assert!(cell.contains(&p));
        prop_assert_eq!(overlap_ratio(&p, &cell), 1.0);
    }

    #[test]
    fn assembled_text_only_uses_input_paragraphs(
        cells in prop::collection::vec(boxes_in(100), 1..4),
        paras in prop::collection::vec((boxes_in(100), "[a-z]{1,6}( [a-z]{1,6}){0,2}"), 0..10),
    ) {
        let cells: Vec<DetectedCell> = cells.into_iter().map(|bbox| DetectedCell { bbox, confidence: 0.9 }).collect();
        let paras: Vec<OcrParagraph> = paras.into_iter().map(|(bbox, text)| OcrParagraph { text, bbox }).collect();
        let msgs = assemble_messages(&cells, &paras, DEFAULT_OVERLAP_THRESHOLD);
        let texts: Vec<&str> = paras.iter().map(|p| p.text.as_str()).collect();
        let mut used = 0;
        for m in &msgs {
            for piece in split_pieces(&m.text, &texts) {
                prop_assert!(texts.contains(&piece), "piece {piece:?} not from an input paragraph");
                used += 1;
            }
        }
        prop_assert!(used <= paras.len());
    }

    #[test]
    fn detection_counts_balance(
        preds in prop::collection::vec((boxes_in(100), 0.0f64..1.0), 0..8),
        truth in prop::collection::vec(boxes_in(100), 0..8),
    ) {
        let preds: Vec<DetectedCell> = preds.into_iter().map(|(bbox, confidence)| DetectedCell { bbox, confidence }).collect();
        let m = evaluate_detections(&preds, &truth, DEFAULT_IOU_MATCH);
        prop_assert_eq!(m.tp + m.fn_, truth.len());
        prop_assert_eq!(m.tp + m.fp, preds.len());
    }

    #[test]
    fn accuracy_bounds(expected in "[ab ]{0,12}", actual in "[ab ]{0,12}") {
        for (acc, rec) in [
            (word_accuracy(&expected, &actual), word_recall(&expected, &actual)),
            (char_accuracy(&expected, &actual), char_recall(&expected, &actual)),
        ] {
            prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&rec));
        }
        let (e, a): (Vec<_>, Vec<_>) = (expected.split_whitespace().collect(), actual.split_whitespace().collect());
        prop_assert_eq!(word_accuracy(&expected, &actual) == 1.0, (!a.is_empty() || e.is_empty()) && is_subsequence(&a, &e));
        prop_assert_eq!(word_accuracy(&expected, &actual) == 1.0 && word_recall(&expected, &actual) == 1.0, a == e);
        let (ec, ac): (Vec<char>, Vec<char>) = (expected.chars().collect(), actual.chars().collect());
        prop_assert_eq!(char_accuracy(&expected, &actual) == 1.0, (!ac.is_empty() || ec.is_empty()) && is_subsequence(&ac, &ec));
        prop_assert_eq!(char_accuracy(&expected, &actual) == 1.0 && char_recall(&expected, &actual) == 1.0, ac == ec);
    }
}

/// Split an assembled text back into the paragraph texts it was joined from.
fn split_pieces<'a>(text: &'a str, candidates: &[&str]) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let hit = candidates
            .iter()
            .filter(|c| {
                rest.starts_with(**c) && (rest.len() == c.len() || rest[c.len()..].starts_with(' '))
            })
            .max_by_key(|c| c.len());
        match hit {
            Some(c) => {
                out.push(&rest[..c.len()]);
                rest = rest[c.len()..].trim_start_matches(' ');
            }
            None => {
                out.push(rest);
                break;
            }
        }
    }
    out
}

fn is_subsequence<T: PartialEq>(needle: &[T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

#[test]
fn overlap_is_not_symmetric() {
    let small = BoundingBox::new(10, 10, 10, 10).unwrap();
    let big = BoundingBox::new(0, 0, 100, 100).unwrap();
    assert_eq!(overlap_ratio(&small, &big), 1.0);
    assert_eq!(overlap_ratio(&big, &small), 0.01);
}

#[test]
fn analyze_pulls_body_and_sender() {
    let cells = vec![DetectedCell {
        bbox: BoundingBox::new(20, 200, 600, 300).unwrap(),
        confidence: 0.97,
    }];
    let paras = vec![
        para("AXISBK", 250, 40, 140, 40),
        para("Today 10:42", 260, 150, 120, 30),
        para("Your account is blocked.", 40, 220, 500, 40),
        para("Verify at bit.ly/x", 40, 270, 400, 40),
    ];
    let a = analyze("img", cells, paras, DEFAULT_OVERLAP_THRESHOLD);
    assert_eq!(a.sender_raw.as_deref(), Some("AXISBK"));
    assert_eq!(
        a.messages[0].text,
        "Your account is blocked. Verify at bit.ly/x"
    );
}
