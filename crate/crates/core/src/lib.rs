//! SMS spam intelligence from public spam reports.
//!
//! The pipeline collects spam-reporting posts, lifts SMS bodies and sender
//! lines out of attached screenshots using detector/OCR geometry, filters
//! reports with a small bag-of-words classifier, resolves and enriches the
//! URLs the messages carry, clusters messages into URL-linked campaigns and
//! evaluates anti-spam services against a stratified test set.
//!
//! Detectors, OCR, translation, threat intel, tweet search and anti-spam
//! services sit behind traits with fixture-backed adapters, so every stage
//! runs deterministically offline.

pub mod corpus;
pub mod evalharness;
pub mod exec;
pub mod ndjson;
pub mod screenshot;
pub mod spamintel;
pub mod srtc;
pub mod text;
pub mod urlintel;

pub use exec::Execution;
