//! Screenshot geometry: matching OCR paragraphs to detected SMS text cells,
//! assembling message bodies, pulling the sender line off the top of the
//! screenshot and scoring detector/recognizer output.
//!
//! Boxes use image pixel coordinates with the origin at the top-left corner
//! and `y` growing downward. All area arithmetic is exact integer math; the
//! only floating-point step is the final division.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageRef;

#[derive(Debug, Error)]
pub enum ScreenshotError {
    #[error("invalid bounding box {0:?}: width and height must be positive, origin non-negative")]
    InvalidBox([i64; 4]),
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing fixture {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("detector failed on {image_id}: {reason}")]
    Detector { image_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TryFrom<[i64; 4]> for BoundingBox {
    type Error = ScreenshotError;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        let [x, y, w, h] = v;
        let ok = |n: i64, min: i64| n >= min && n <= u32::MAX as i64;
        if !(ok(x, 0) && ok(y, 0) && ok(w, 1) && ok(h, 1)) {
            return Err(ScreenshotError::InvalidBox(v));
        }
        Ok(Self {
            x: x as u32,
            y: y as u32,
            w: w as u32,
            h: h as u32,
        })
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x as i64, b.y as i64, b.w as i64, b.h as i64]
    }
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, ScreenshotError> {
        Self::try_from([x as i64, y as i64, w as i64, h as i64])
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self
            .right()
            .min(other.right())
            .saturating_sub((self.x.max(other.x)) as u64);
        let h = self
            .bottom()
            .min(other.bottom())
            .saturating_sub((self.y.max(other.y)) as u64);
        w * h
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

/// An exact area ratio, kept as integers until the caller asks for a float.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AreaRatio {
    pub numerator: u64,
    pub denominator: u64,
}

impl AreaRatio {
    pub fn value(self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }

    /// `self >= threshold`, without rounding the ratio first.
    fn at_least(self, threshold: f64) -> bool {
        self.numerator as f64 >= threshold * self.denominator as f64
    }
}

pub fn iou_ratio(a: &BoundingBox, b: &BoundingBox) -> AreaRatio {
    let inter = a.intersection_area(b);
    AreaRatio {
        numerator: inter,
        denominator: a.area() + b.area() - inter,
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_ratio(a, b).value()
}

/// Share of the paragraph's area that lies inside the cell. Not symmetric.
pub fn overlap_ratio_parts(paragraph: &BoundingBox, cell: &BoundingBox) -> AreaRatio {
    AreaRatio {
        numerator: paragraph.intersection_area(cell),
        denominator: paragraph.area(),
    }
}

pub fn overlap_ratio(paragraph: &BoundingBox, cell: &BoundingBox) -> f64 {
    overlap_ratio_parts(paragraph, cell).value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedCell {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrParagraph {
    pub text: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledMessage {
    pub cell_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenshotAnalysis {
    pub image_id: String,
    pub cells: Vec<DetectedCell>,
    pub paragraphs: Vec<OcrParagraph>,
    pub messages: Vec<AssembledMessage>,
    pub sender_raw: Option<String>,
}

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.75;

/// Group OCR paragraphs into per-cell message bodies.
///
/// A paragraph belongs to a cell when at least `threshold` of its area lies
/// inside it; a paragraph qualifying for several cells goes to the one with
/// the highest ratio (lowest index on ties). Paragraphs within a cell are
/// read top-to-bottom, then left-to-right, and joined with single spaces.
pub fn assemble_messages(
    cells: &[DetectedCell],
    paragraphs: &[OcrParagraph],
    threshold: f64,
) -> Vec<AssembledMessage> {
    let mut per_cell: Vec<Vec<&OcrParagraph>> = vec![Vec::new(); cells.len()];
    for p in paragraphs {
        if p.text.trim().is_empty() {
            continue;
        }
        let mut best: Option<(usize, AreaRatio)> = None;
        for (ci, cell) in cells.iter().enumerate() {
            let r = overlap_ratio_parts(&p.bbox, &cell.bbox);
            if !r.at_least(threshold) {
                continue;
            }
            // Cross-multiplied comparison keeps ties exact.
            let better = match best {
                None => true,
                Some((_, b)) => {
                    (r.numerator as u128) * (b.denominator as u128)
                        > (b.numerator as u128) * (r.denominator as u128)
                }
            };
            if better {
                best = Some((ci, r));
            }
        }
        if let Some((ci, _)) = best {
            per_cell[ci].push(p);
        }
    }
    per_cell
        .into_iter()
        .enumerate()
        .filter(|(_, ps)| !ps.is_empty())
        .map(|(cell_index, mut ps)| {
            ps.sort_by_key(|p| (p.bbox.y, p.bbox.x));
            let text = ps
                .iter()
                .map(|p| p.text.trim())
                .collect::<Vec<_>>()
                .join(" ");
            AssembledMessage { cell_index, text }
        })
        .collect()
}

fn phone_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\+?[0-9]([0-9 \-]*[0-9])?$").unwrap())
}

fn sender_id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9]{2,16}$").unwrap())
}

const DATE_WORDS: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "mon",
    "tue",
    "tues",
    "wed",
    "thu",
    "thur",
    "thurs",
    "fri",
    "sat",
    "sun",
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
    "jan",
    "feb",
    "mar",
    "apr",
    "jun",
    "jul",
    "aug",
    "sep",
    "sept",
    "oct",
    "nov",
    "dec",
    "today",
    "yesterday",
];

/// Does `text` look like a sender line: a phone number / short code or a
/// single alphanumeric sender ID? Timestamps and date words are rejected.
pub fn is_sender_like(text: &str) -> bool {
    let t = text.trim();
    if t.is_empty() || t.contains(':') {
        return false;
    }
    if phone_pattern().is_match(t) {
        return t.chars().filter(char::is_ascii_digit).count() >= 3;
    }
    if sender_id_pattern().is_match(t) && t.chars().any(|c| c.is_ascii_alphabetic()) {
        return !DATE_WORDS.contains(&t.to_ascii_lowercase().as_str());
    }
    false
}

/// First sender-like paragraph lying entirely above the topmost cell.
pub fn extract_sender(paragraphs: &[OcrParagraph], cells: &[DetectedCell]) -> Option<String> {
    let top = cells.iter().map(|c| c.bbox.y as u64).min()?;
    let mut above: Vec<&OcrParagraph> = paragraphs
        .iter()
        .filter(|p| p.bbox.bottom() <= top)
        .collect();
    above.sort_by_key(|p| (p.bbox.y, p.bbox.x));
    above
        .into_iter()
        .find(|p| is_sender_like(&p.text))
        .map(|p| p.text.trim().to_string())
}

pub fn analyze(
    image_id: &str,
    cells: Vec<DetectedCell>,
    paragraphs: Vec<OcrParagraph>,
    threshold: f64,
) -> ScreenshotAnalysis {
    let messages = assemble_messages(&cells, &paragraphs, threshold);
    let sender_raw = extract_sender(&paragraphs, &cells);
    ScreenshotAnalysis {
        image_id: image_id.to_string(),
        cells,
        paragraphs,
        messages,
        sender_raw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub mean_iou: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub const DEFAULT_IOU_MATCH: f64 = 0.5;

/// Greedy one-to-one matching of predictions (by descending confidence) to
/// ground truth. Undefined precision/recall are reported as 0.
pub fn evaluate_detections(
    predicted: &[DetectedCell],
    truth: &[BoundingBox],
    iou_match: f64,
) -> DetectionMetrics {
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[b].confidence.total_cmp(&predicted[a].confidence));
    let mut taken = vec![false; truth.len()];
    let mut ious = Vec::new();
    for pi in order {
        let mut best: Option<(usize, AreaRatio)> = None;
        for (ti, t) in truth.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let r = iou_ratio(&predicted[pi].bbox, t);
            let better = match best {
                None => true,
                Some((_, b)) => {
                    (r.numerator as u128) * (b.denominator as u128)
                        > (b.numerator as u128) * (r.denominator as u128)
                }
            };
            if better {
                best = Some((ti, r));
            }
        }
        if let Some((ti, r)) = best {
            if r.numerator > 0 && r.at_least(iou_match) {
                taken[ti] = true;
                ious.push(r.value());
            }
        }
    }
    let tp = ious.len();
    let fp = predicted.len() - tp;
    let fn_ = truth.len() - tp;
    let div = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    DetectionMetrics {
        precision: div(tp, tp + fp),
        recall: div(tp, tp + fn_),
        mean_iou: if tp == 0 {
            0.0
        } else {
            ious.iter().sum::<f64>() / tp as f64
        },
        tp,
        fp,
        fn_,
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_ratio<T: PartialEq>(expected: &[T], actual: &[T], denom: usize) -> f64 {
    if expected.is_empty() && actual.is_empty() {
        return 1.0;
    }
    if denom == 0 {
        return 0.0;
    }
    lcs_len(expected, actual) as f64 / denom as f64
}

/// Correct words over recognized words (LCS on whitespace tokens).
pub fn word_accuracy(expected: &str, actual: &str) -> f64 {
    let (e, a): (Vec<_>, Vec<_>) = (
        expected.split_whitespace().collect(),
        actual.split_whitespace().collect(),
    );
    lcs_ratio(&e, &a, a.len())
}

/// Correct words over expected words; catches omissions that
/// [`word_accuracy`] cannot see.
pub fn word_recall(expected: &str, actual: &str) -> f64 {
    let (e, a): (Vec<_>, Vec<_>) = (
        expected.split_whitespace().collect(),
        actual.split_whitespace().collect(),
    );
    lcs_ratio(&e, &a, e.len())
}

pub fn char_accuracy(expected: &str, actual: &str) -> f64 {
    let (e, a): (Vec<char>, Vec<char>) = (expected.chars().collect(), actual.chars().collect());
    lcs_ratio(&e, &a, a.len())
}

pub fn char_recall(expected: &str, actual: &str) -> f64 {
    let (e, a): (Vec<char>, Vec<char>) = (expected.chars().collect(), actual.chars().collect());
    lcs_ratio(&e, &a, e.len())
}

/// Finds SMS text cells in a screenshot.
pub trait CellDetector: Send + Sync {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectedCell>, ScreenshotError>;
}

/// Recovers text paragraphs with their boxes.
pub trait TextRecognizer: Send + Sync {
    fn ocr(&self, image: &ImageRef) -> Result<Vec<OcrParagraph>, ScreenshotError>;
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct DetectionFixture {
    pub image_id: String,
    pub cells: Vec<DetectedCell>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct OcrFixture {
    pub image_id: String,
    pub paragraphs: Vec<OcrParagraph>,
}

/// Ground truth for [`evaluate_detections`].
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct TruthFixture {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
}

/// Load fixtures from a directory of `*.json` files (one object each) or
/// from an NDJSON file, keyed by image id.
pub fn load_fixtures<T, K>(path: &Path, key: K) -> Result<HashMap<String, T>, ScreenshotError>
where
    T: for<'de> Deserialize<'de>,
    K: Fn(&T) -> &str,
{
    let io_err = |p: &Path, source| ScreenshotError::Io {
        path: p.display().to_string(),
        source,
    };
    let parse_err = |p: &Path, source| ScreenshotError::Parse {
        path: p.display().to_string(),
        source,
    };
    let mut out = HashMap::new();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let raw = fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
            let item: T = serde_json::from_str(&raw).map_err(|e| parse_err(&f, e))?;
            out.insert(key(&item).to_string(), item);
        }
    } else {
        let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let item: T = serde_json::from_str(line).map_err(|e| parse_err(path, e))?;
            out.insert(key(&item).to_string(), item);
        }
    }
    Ok(out)
}

/// Detector backed by precomputed detections. Unknown images have no cells.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    by_image: HashMap<String, Vec<DetectedCell>>,
}

impl FixtureDetector {
    pub fn load(path: &Path) -> Result<Self, ScreenshotError> {
        let fx = load_fixtures::<DetectionFixture, _>(path, |f| &f.image_id)?;
        Ok(Self {
            by_image: fx.into_iter().map(|(k, v)| (k, v.cells)).collect(),
        })
    }

    pub fn from_fixtures(fixtures: Vec<DetectionFixture>) -> Self {
        Self {
            by_image: fixtures
                .into_iter()
                .map(|f| (f.image_id, f.cells))
                .collect(),
        }
    }
}

impl CellDetector for FixtureDetector {
    fn detect(&self, image: &ImageRef) -> Result<Vec<DetectedCell>, ScreenshotError> {
        let cells = self
            .by_image
            .get(&image.image_id)
            .cloned()
            .unwrap_or_default();
        for c in &cells {
            if !(0.0..=1.0).contains(&c.confidence) {
                return Err(ScreenshotError::Detector {
                    image_id: image.image_id.clone(),
                    reason: format!("confidence {} outside [0, 1]", c.confidence),
                });
            }
        }
        Ok(cells)
    }
}

/// Recognizer backed by precomputed OCR output. Unknown images have no text.
#[derive(Debug, Clone, Default)]
pub struct FixtureRecognizer {
    by_image: HashMap<String, Vec<OcrParagraph>>,
}

impl FixtureRecognizer {
    pub fn load(path: &Path) -> Result<Self, ScreenshotError> {
        let fx = load_fixtures::<OcrFixture, _>(path, |f| &f.image_id)?;
        Ok(Self {
            by_image: fx.into_iter().map(|(k, v)| (k, v.paragraphs)).collect(),
        })
    }

    pub fn from_fixtures(fixtures: Vec<OcrFixture>) -> Self {
        Self {
            by_image: fixtures
                .into_iter()
                .map(|f| (f.image_id, f.paragraphs))
                .collect(),
        }
    }
}

impl TextRecognizer for FixtureRecognizer {
    fn ocr(&self, image: &ImageRef) -> Result<Vec<OcrParagraph>, ScreenshotError> {
        Ok(self
            .by_image
            .get(&image.image_id)
            .map(|ps| {
                ps.iter()
                    .filter(|p| !p.text.trim().is_empty())
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }
}
