//! Measurement toolkit for front-runner visibility in campaign imagery.
//!
//! The crate consumes precomputed detector and embedder outputs, human
//! annotations and model predictions, and produces:
//!
//! - gallery-based face verification and image-level presence ([`facematch`]),
//! - data-driven distance thresholds ([`calibrate`]),
//! - person-count buckets ([`counting`]),
//! - inter-rater agreement and gold standards ([`agreement`]),
//! - classification reports ([`evalmetrics`]),
//! - contingency-table statistics ([`stats`]),
//! - the C0 / C1 / C+ visibility layer and its test battery ([`visibility`]).
//!
//! All computations are pure functions over immutable inputs; file I/O is
//! limited to [`corpus`] (reading) and [`jsonl`] (line-delimited helpers).

pub mod agreement;
pub mod calibrate;
pub mod corpus;
pub mod counting;
pub mod evalmetrics;
pub mod facematch;
pub mod jsonl;
pub mod stats;
pub mod visibility;

pub use corpus::{
    Extra,
    AccountType, AnnotationRecord, ContentItem, Corpus, FaceDetection, FrontRunner, GalleryEntry,
    ImageRecord, ItemType, LabelSpace, MediaOrigin, PredictionRecord, PredictionStatus, Roster,
    Task,
};
