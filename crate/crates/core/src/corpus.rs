//! Data model and validated ingestion.
//!
//! A [`Corpus`] is only constructed through [`Corpus::load`] or
//! [`Corpus::from_records`], both of which check every cross-reference and
//! uniqueness rule. Unknown fields on any record are kept in an `extra` map
//! and re-emitted on serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::jsonl::{self, JsonlError};

pub const UNKNOWN_LABEL: &str = "Unknown";
pub const UNSURE_LABEL: &str = "Unsure";
pub const PRESENT_LABEL: &str = "True";
pub const ABSENT_LABEL: &str = "False";
pub const COUNT_LABELS: [&str; 4] = ["0", "1", "2", "3+"];

pub type Extra = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemType {
    Story,
    Post,
}

impl ItemType {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemType::Story => "story",
            ItemType::Post => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountType {
    Party,
    Candidate,
}

impl AccountType {
    pub fn as_str(self) -> &'static str {
        match self {
            AccountType::Party => "party",
            AccountType::Candidate => "candidate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaOrigin {
    Image,
    VideoFirstFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FaceIdentity,
    PersonCount,
    CandidatePresence,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::FaceIdentity => "face_identity",
            Task::PersonCount => "person_count",
            Task::CandidatePresence => "candidate_presence",
        }
    }

    /// Whether model predictions for this task may answer "Unsure".
    pub fn allows_unsure(self) -> bool {
        matches!(self, Task::CandidatePresence)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "face_identity" => Ok(Task::FaceIdentity),
            "person_count" => Ok(Task::PersonCount),
            "candidate_presence" => Ok(Task::CandidatePresence),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentItem {
    pub item_id: String,
    pub item_type: ItemType,
    pub account_handle: String,
    pub account_type: AccountType,
    pub party: String,
    pub published_at: NaiveDate,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub item_id: String,
    pub media_origin: MediaOrigin,
    #[serde(flatten)]
    pub extra: Extra,
}

/// The two record kinds of `corpus.jsonl`, discriminated by `"kind"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusLine {
    Item(ContentItem),
    Image(ImageRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    pub face_id: String,
    pub image_id: String,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub person: String,
    pub party: String,
    pub source_ref: String,
    pub embedding: Vec<f64>,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub unit_id: String,
    pub annotator_id: String,
    pub task: Task,
    pub label: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    #[default]
    Ok,
    Refusal,
    ParseFailure,
    TransportFailure,
}

impl PredictionStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, PredictionStatus::Ok)
    }

    /// Failures carry no usable label.
    pub fn is_failure(&self) -> bool {
        matches!(
            self,
            PredictionStatus::ParseFailure | PredictionStatus::TransportFailure
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unit_id: String,
    pub model_id: String,
    pub task: Task,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "PredictionStatus::is_ok")]
    pub status: PredictionStatus,
    #[serde(flatten)]
    pub extra: Extra,
}

/// A front-runner and the party they lead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontRunner {
    pub name: String,
    pub party: String,
}

/// The configured party list with one front-runner per party.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub front_runners: Vec<FrontRunner>,
}

impl Roster {
    pub fn new(front_runners: Vec<FrontRunner>) -> Self {
        Self { front_runners }
    }

    /// The five front-runners of the 2021 German federal election campaign.
    pub fn german_2021() -> Self {
        let pairs = [
            ("Armin Laschet", "CDU"),
            ("Annalena Baerbock", "GRÜNE"),
            ("Olaf Scholz", "SPD"),
            ("Christian Lindner", "FDP"),
            ("Markus Söder", "CSU"),
        ];
        Self::new(
            pairs
                .iter()
                .map(|(name, party)| FrontRunner {
                    name: name.to_string(),
                    party: party.to_string(),
                })
                .collect(),
        )
    }

    /// Parties in lexicographic order.
    pub fn parties(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.front_runners.iter().map(|f| f.party.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn has_party(&self, party: &str) -> bool {
        self.front_runners.iter().any(|f| f.party == party)
    }

    pub fn front_runner(&self, party: &str) -> Option<&str> {
        self.front_runners
            .iter()
            .find(|f| f.party == party)
            .map(|f| f.name.as_str())
    }

    pub fn party_of(&self, name: &str) -> Option<&str> {
        self.front_runners
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.party.as_str())
    }

    /// Front-runner names in lexicographic order.
    pub fn names(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.front_runners.iter().map(|f| f.name.as_str()).collect();
        set.into_iter().collect()
    }
}

impl Default for Roster {
    fn default() -> Self {
        Self::german_2021()
    }
}

/// The closed label vocabulary of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub task: Task,
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn for_task(task: Task, roster: &Roster) -> Self {
        let labels = match task {
            Task::FaceIdentity => {
                let mut names: Vec<String> = roster.names().into_iter().map(String::from).collect();
                names.push(UNKNOWN_LABEL.to_string());
                names
            }
            Task::PersonCount => COUNT_LABELS.iter().map(|s| s.to_string()).collect(),
            Task::CandidatePresence => vec![ABSENT_LABEL.to_string(), PRESENT_LABEL.to_string()],
        };
        Self { task, labels }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Label check for model output, which may additionally answer "Unsure".
    pub fn accepts_prediction(&self, label: &str) -> bool {
        self.contains(label) || (self.task.allows_unsure() && label == UNSURE_LABEL)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelViolation {
    pub unit_id: String,
    pub annotator_id: String,
    pub label: String,
}

/// Lists every out-of-vocabulary label among `records` of `task`.
///
/// Records of other tasks are ignored. An empty result means all labels are valid.
pub fn validate_label_sets(
    records: &[AnnotationRecord],
    task: Task,
    roster: &Roster,
) -> Vec<LabelViolation> {
    let space = LabelSpace::for_task(task, roster);
    records
        .iter()
        .filter(|r| r.task == task && !space.contains(&r.label))
        .map(|r| LabelViolation {
            unit_id: r.unit_id.clone(),
            annotator_id: r.annotator_id.clone(),
            label: r.label.clone(),
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{origin}: schema violation at line {line}: {message}")]
    Schema {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{origin}: dangling {field} at line {line}: {value:?}")]
    Dangling {
        origin: String,
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("{origin}: duplicate {key} at line {line}: {value}")]
    Duplicate {
        origin: String,
        line: usize,
        key: &'static str,
        value: String,
    },
    #[error("{origin}: invalid record at line {line}: {message}")]
    Invariant {
        origin: String,
        line: usize,
        message: String,
    },
}

impl CorpusError {
    fn invariant(origin: &str, line: usize, message: impl Into<String>) -> Self {
        CorpusError::Invariant {
            origin: origin.to_string(),
            line,
            message: message.into(),
        }
    }
}

/// Input files for [`Corpus::load`]; only `corpus` is mandatory.
#[derive(Debug, Clone, Default)]
pub struct CorpusPaths {
    pub corpus: PathBuf,
    pub faces: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

/// Records paired with their origin name and 1-based line numbers.
#[derive(Debug, Clone)]
pub struct Sourced<T> {
    pub origin: String,
    pub records: Vec<(usize, T)>,
}

impl<T> Default for Sourced<T> {
    fn default() -> Self {
        Self { origin: String::new(), records: Vec::new() }
    }
}

impl<T> Sourced<T> {
    /// Numbers records by position, for records built in memory.
    pub fn in_memory(origin: &str, records: Vec<T>) -> Self {
        Self {
            origin: origin.to_string(),
            records: records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusRecords {
    pub corpus: Sourced<CorpusLine>,
    pub faces: Sourced<FaceDetection>,
    pub gallery: Sourced<GalleryEntry>,
    pub annotations: Sourced<AnnotationRecord>,
    pub predictions: Sourced<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub items: usize,
    pub images: usize,
    pub stories: usize,
    pub posts: usize,
    pub party_items: usize,
    pub candidate_items: usize,
    pub faces: usize,
    pub gallery_entries: usize,
    pub annotations: usize,
    pub predictions: usize,
    pub embedding_dim: Option<usize>,
}

/// A validated, immutable corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    roster: Roster,
    items: BTreeMap<String, ContentItem>,
    images: BTreeMap<String, ImageRecord>,
    faces: BTreeMap<String, FaceDetection>,
    faces_by_image: BTreeMap<String, Vec<String>>,
    gallery: Vec<GalleryEntry>,
    annotations: Vec<AnnotationRecord>,
    predictions: Vec<PredictionRecord>,
    embedding_dim: Option<usize>,
}

fn read_sourced<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Sourced<T>, CorpusError> {
    let origin = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let lines = jsonl::read_objects(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for line in lines {
        let rec = serde_json::from_value(Value::Object(line.object)).map_err(|e| {
            CorpusError::Schema {
                origin: origin.clone(),
                line: line.number,
                message: e.to_string(),
            }
        })?;
        records.push((line.number, rec));
    }
    Ok(Sourced { origin, records })
}

impl Corpus {
    /// Reads and validates all given files.
    pub fn load(paths: &CorpusPaths, roster: Roster) -> Result<Self, CorpusError> {
        let mut records = CorpusRecords {
            corpus: read_sourced(&paths.corpus)?,
            ..Default::default()
        };
        if let Some(p) = &paths.faces {
            records.faces = read_sourced(p)?;
        }
        if let Some(p) = &paths.gallery {
            records.gallery = read_sourced(p)?;
        }
        if let Some(p) = &paths.annotations {
            records.annotations = read_sourced(p)?;
        }
        if let Some(p) = &paths.predictions {
            records.predictions = read_sourced(p)?;
        }
        Self::from_records(records, roster)
    }

    /// Validates in-memory records.
    pub fn from_records(records: CorpusRecords, roster: Roster) -> Result<Self, CorpusError> {
        let CorpusRecords {
            corpus,
            faces,
            gallery,
            annotations,
            predictions,
        } = records;

        let mut items = BTreeMap::new();
        let mut image_lines = Vec::new();
        let mut handle_types: BTreeMap<String, AccountType> = BTreeMap::new();
        let origin = corpus.origin.as_str();
        for (line, rec) in corpus.records {
            match rec {
                CorpusLine::Item(item) => {
                    if !roster.has_party(&item.party) {
                        return Err(CorpusError::invariant(
                            origin,
                            line,
                            format!("party {:?} is not in the configured party list", item.party),
                        ));
                    }
                    match handle_types.get(&item.account_handle) {
                        Some(t) if *t != item.account_type => {
                            return Err(CorpusError::invariant(
                                origin,
                                line,
                                format!(
                                    "account {:?} has inconsistent account_type",
                                    item.account_handle
                                ),
                            ))
                        }
                        _ => {
                            handle_types.insert(item.account_handle.clone(), item.account_type);
                        }
                    }
                    if items.contains_key(&item.item_id) {
                        return Err(CorpusError::Duplicate {
                            origin: origin.to_string(),
                            line,
                            key: "item_id",
                            value: item.item_id,
                        });
                    }
                    items.insert(item.item_id.clone(), (line, item));
                }
                CorpusLine::Image(image) => image_lines.push((line, image)),
            }
        }

        let mut images = BTreeMap::new();
        let mut images_per_item: BTreeMap<&str, usize> = BTreeMap::new();
        for (line, image) in image_lines {
            if !items.contains_key(&image.item_id) {
                return Err(CorpusError::Dangling {
                    origin: origin.to_string(),
                    line,
                    field: "item_id",
                    value: image.item_id,
                });
            }
            if images.contains_key(&image.image_id) {
                return Err(CorpusError::Duplicate {
                    origin: origin.to_string(),
                    line,
                    key: "image_id",
                    value: image.image_id,
                });
            }
            images.insert(image.image_id.clone(), image);
        }
        for image in images.values() {
            *images_per_item
                .entry(items.get_key_value(&image.item_id).unwrap().0.as_str())
                .or_default() += 1;
        }
        for (id, (line, item)) in &items {
            let n = images_per_item.get(id.as_str()).copied().unwrap_or(0);
            match item.item_type {
                ItemType::Story if n != 1 => {
                    return Err(CorpusError::invariant(
                        origin,
                        *line,
                        format!("story {id:?} must have exactly one image, found {n}"),
                    ))
                }
                ItemType::Post if n == 0 => {
                    return Err(CorpusError::invariant(
                        origin,
                        *line,
                        format!("post {id:?} has no images"),
                    ))
                }
                _ => {}
            }
        }
        let items: BTreeMap<String, ContentItem> =
            items.into_iter().map(|(k, (_, v))| (k, v)).collect();

        let mut embedding_dim: Option<usize> = None;
        let mut check_dim = |origin: &str, line: usize, len: usize| -> Result<(), CorpusError> {
            if len == 0 {
                return Err(CorpusError::invariant(origin, line, "empty embedding"));
            }
            match embedding_dim {
                Some(d) if d != len => Err(CorpusError::invariant(
                    origin,
                    line,
                    format!("embedding dimension {len} differs from {d}"),
                )),
                Some(_) => Ok(()),
                None => {
                    embedding_dim = Some(len);
                    Ok(())
                }
            }
        };

        let mut face_map = BTreeMap::new();
        let mut faces_by_image: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let origin = faces.origin.as_str();
        for (line, face) in faces.records {
            if !images.contains_key(&face.image_id) {
                return Err(CorpusError::Dangling {
                    origin: origin.to_string(),
                    line,
                    field: "image_id",
                    value: face.image_id,
                });
            }
            let [_, _, w, h] = face.bbox;
            if !(w > 0.0 && h > 0.0) {
                return Err(CorpusError::invariant(
                    origin,
                    line,
                    "bbox width and height must be positive",
                ));
            }
            if let Some(c) = face.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(CorpusError::invariant(
                        origin,
                        line,
                        format!("confidence {c} outside [0, 1]"),
                    ));
                }
            }
            if face.embedding.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::invariant(origin, line, "non-finite embedding value"));
            }
            check_dim(origin, line, face.embedding.len())?;
            if face_map.contains_key(&face.face_id) {
                return Err(CorpusError::Duplicate {
                    origin: origin.to_string(),
                    line,
                    key: "face_id",
                    value: face.face_id,
                });
            }
            faces_by_image
                .entry(face.image_id.clone())
                .or_default()
                .push(face.face_id.clone());
            face_map.insert(face.face_id.clone(), face);
        }

        let origin = gallery.origin.as_str();
        let mut person_party: BTreeMap<String, String> = BTreeMap::new();
        let mut gallery_out = Vec::with_capacity(gallery.records.len());
        for (line, entry) in gallery.records {
            match person_party.get(&entry.person) {
                Some(p) if *p != entry.party => {
                    return Err(CorpusError::invariant(
                        origin,
                        line,
                        format!("person {:?} mapped to more than one party", entry.person),
                    ))
                }
                _ => {
                    person_party.insert(entry.person.clone(), entry.party.clone());
                }
            }
            if entry.embedding.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::invariant(origin, line, "non-finite embedding value"));
            }
            check_dim(origin, line, entry.embedding.len())?;
            gallery_out.push(entry);
        }

        let origin = annotations.origin.as_str();
        let mut seen = BTreeSet::new();
        let mut annotations_out = Vec::with_capacity(annotations.records.len());
        for (line, rec) in annotations.records {
            if !images.contains_key(&rec.unit_id) && !face_map.contains_key(&rec.unit_id) {
                return Err(CorpusError::Dangling {
                    origin: origin.to_string(),
                    line,
                    field: "unit_id",
                    value: rec.unit_id,
                });
            }
            check_annotation(&rec, &roster, origin, line, &mut seen)?;
            annotations_out.push(rec);
        }

        let origin = predictions.origin.as_str();
        let mut seen = BTreeSet::new();
        let mut predictions_out = Vec::with_capacity(predictions.records.len());
        for (line, rec) in predictions.records {
            if !images.contains_key(&rec.unit_id) && !face_map.contains_key(&rec.unit_id) {
                return Err(CorpusError::Dangling {
                    origin: origin.to_string(),
                    line,
                    field: "unit_id",
                    value: rec.unit_id,
                });
            }
            check_prediction(&rec, &roster, origin, line, &mut seen)?;
            predictions_out.push(rec);
        }

        Ok(Self {
            roster,
            items,
            images,
            faces: face_map,
            faces_by_image,
            gallery: gallery_out,
            annotations: annotations_out,
            predictions: predictions_out,
            embedding_dim,
        })
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn items(&self) -> impl Iterator<Item = &ContentItem> {
        self.items.values()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn faces(&self) -> impl Iterator<Item = &FaceDetection> {
        self.faces.values()
    }

    pub fn gallery(&self) -> &[GalleryEntry] {
        &self.gallery
    }

    pub fn annotations(&self) -> &[AnnotationRecord] {
        &self.annotations
    }

    pub fn predictions(&self) -> &[PredictionRecord] {
        &self.predictions
    }

    pub fn item(&self, item_id: &str) -> Option<&ContentItem> {
        self.items.get(item_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn face(&self, face_id: &str) -> Option<&FaceDetection> {
        self.faces.get(face_id)
    }

    /// The content item an image belongs to.
    pub fn item_of_image(&self, image_id: &str) -> Option<&ContentItem> {
        self.images
            .get(image_id)
            .and_then(|img| self.items.get(&img.item_id))
    }

    /// Faces detected on an image, in face_id order.
    pub fn faces_of_image<'a>(&'a self, image_id: &str) -> impl Iterator<Item = &'a FaceDetection> {
        self.faces_by_image
            .get(image_id)
            .into_iter()
            .flatten()
            .filter_map(move |id| self.faces.get(id))
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn summary(&self) -> CorpusSummary {
        let count = |pred: &dyn Fn(&ContentItem) -> bool| self.items.values().filter(|i| pred(i)).count();
        CorpusSummary {
            items: self.items.len(),
            images: self.images.len(),
            stories: count(&|i| i.item_type == ItemType::Story),
            posts: count(&|i| i.item_type == ItemType::Post),
            party_items: count(&|i| i.account_type == AccountType::Party),
            candidate_items: count(&|i| i.account_type == AccountType::Candidate),
            faces: self.faces.len(),
            gallery_entries: self.gallery.len(),
            annotations: self.annotations.len(),
            predictions: self.predictions.len(),
            embedding_dim: self.embedding_dim,
        }
    }

    /// Re-emits `corpus.jsonl` records: items, then images, each in id order.
    pub fn corpus_lines(&self) -> Vec<CorpusLine> {
        self.items
            .values()
            .cloned()
            .map(CorpusLine::Item)
            .chain(self.images.values().cloned().map(CorpusLine::Image))
            .collect()
    }
}

fn check_annotation(
    rec: &AnnotationRecord,
    roster: &Roster,
    origin: &str,
    line: usize,
    seen: &mut BTreeSet<(String, String, Task)>,
) -> Result<(), CorpusError> {
    if !LabelSpace::for_task(rec.task, roster).contains(&rec.label) {
        return Err(CorpusError::invariant(
            origin,
            line,
            format!("label {:?} not in the {} label set", rec.label, rec.task),
        ));
    }
    if !seen.insert((rec.unit_id.clone(), rec.annotator_id.clone(), rec.task)) {
        return Err(CorpusError::Duplicate {
            origin: origin.to_string(),
            line,
            key: "(unit_id, annotator_id, task)",
            value: format!("({}, {}, {})", rec.unit_id, rec.annotator_id, rec.task),
        });
    }
    Ok(())
}

fn check_prediction(
    rec: &PredictionRecord,
    roster: &Roster,
    origin: &str,
    line: usize,
    seen: &mut BTreeSet<(String, String, Task)>,
) -> Result<(), CorpusError> {
    let space = LabelSpace::for_task(rec.task, roster);
    if !rec.status.is_failure() && !space.accepts_prediction(&rec.label) {
        return Err(CorpusError::invariant(
            origin,
            line,
            format!("label {:?} not in the {} label set", rec.label, rec.task),
        ));
    }
    if !seen.insert((rec.unit_id.clone(), rec.model_id.clone(), rec.task)) {
        return Err(CorpusError::Duplicate {
            origin: origin.to_string(),
            line,
            key: "(unit_id, model_id, task)",
            value: format!("({}, {}, {})", rec.unit_id, rec.model_id, rec.task),
        });
    }
    Ok(())
}

/// Reads a standalone annotations file, checking vocabulary and key uniqueness.
pub fn read_annotations(path: &Path, roster: &Roster) -> Result<Vec<AnnotationRecord>, CorpusError> {
    let sourced: Sourced<AnnotationRecord> = read_sourced(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(sourced.records.len());
    for (line, rec) in sourced.records {
        check_annotation(&rec, roster, &sourced.origin, line, &mut seen)?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a standalone predictions file, checking vocabulary and key uniqueness.
pub fn read_predictions(path: &Path, roster: &Roster) -> Result<Vec<PredictionRecord>, CorpusError> {
    let sourced: Sourced<PredictionRecord> = read_sourced(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(sourced.records.len());
    for (line, rec) in sourced.records {
        check_prediction(&rec, roster, &sourced.origin, line, &mut seen)?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads any line-delimited record type, reporting schema errors with line numbers.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    Ok(read_sourced::<T>(path)?
        .records
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn item(id: &str, item_type: ItemType, account_type: AccountType, party: &str) -> CorpusLine {
        CorpusLine::Item(ContentItem {
            item_id: id.into(),
            item_type,
            account_handle: format!("@{}_{}", party.to_lowercase(), account_type.as_str()),
            account_type,
            party: party.into(),
            published_at: NaiveDate::from_ymd_opt(2021, 9, 12).unwrap(),
            extra: Extra::new(),
        })
    }

    fn image(id: &str, item_id: &str) -> CorpusLine {
        CorpusLine::Image(ImageRecord {
            image_id: id.into(),
            item_id: item_id.into(),
            media_origin: MediaOrigin::Image,
            extra: Extra::new(),
        })
    }

    fn small() -> Vec<CorpusLine> {
        vec![
            item("s1", ItemType::Story, AccountType::Party, "SPD"),
            item("s2", ItemType::Story, AccountType::Candidate, "CDU"),
            item("p1", ItemType::Post, AccountType::Party, "FDP"),
            image("i1", "s1"),
            image("i2", "s2"),
            image("i3", "p1"),
            image("i4", "p1"),
        ]
    }

    fn records(corpus: Vec<CorpusLine>) -> CorpusRecords {
        CorpusRecords {
            corpus: Sourced::in_memory("corpus.jsonl", corpus),
            ..Default::default()
        }
    }

    #[test]
    fn loads_items_and_images() {
        let c = Corpus::from_records(records(small()), Roster::default()).unwrap();
        let s = c.summary();
        assert_eq!((s.items, s.images, s.stories, s.posts), (3, 4, 2, 1));
        assert_eq!(c.item_of_image("i4").unwrap().item_id, "p1");
    }

    #[test]
    fn dangling_item_reference_is_rejected_with_line() {
        let mut lines = small();
        lines.push(image("i9", "x9"));
        let err = Corpus::from_records(records(lines), Roster::default()).unwrap_err();
        assert!(err.to_string().contains("dangling item_id at line 8"), "{err}");
    }

    #[test]
    fn duplicate_item_is_rejected() {
        let mut lines = small();
        lines.push(item("s1", ItemType::Story, AccountType::Party, "SPD"));
        let err = Corpus::from_records(records(lines), Roster::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Duplicate { key: "item_id", .. }));
    }

    #[test]
    fn story_with_two_images_is_rejected() {
        let mut lines = small();
        lines.push(image("i5", "s1"));
        let err = Corpus::from_records(records(lines), Roster::default()).unwrap_err();
        assert!(err.to_string().contains("exactly one image"), "{err}");
    }

    #[test]
    fn unknown_party_is_rejected() {
        let lines = vec![item("s1", ItemType::Story, AccountType::Party, "XYZ"), image("i1", "s1")];
        assert!(Corpus::from_records(records(lines), Roster::default()).is_err());
    }

    #[test]
    fn inconsistent_account_type_is_rejected() {
        let mut a = item("s1", ItemType::Story, AccountType::Party, "SPD");
        let mut b = item("s2", ItemType::Story, AccountType::Candidate, "SPD");
        if let (CorpusLine::Item(a), CorpusLine::Item(b)) = (&mut a, &mut b) {
            a.account_handle = "@same".into();
            b.account_handle = "@same".into();
        }
        let lines = vec![a, b, image("i1", "s1"), image("i2", "s2")];
        let err = Corpus::from_records(records(lines), Roster::default()).unwrap_err();
        assert!(err.to_string().contains("inconsistent account_type"));
    }

    #[test]
    fn face_dimension_and_bbox_checks() {
        let face = |id: &str, dim: usize, w: f64| FaceDetection {
            face_id: id.into(),
            image_id: "i1".into(),
            bbox: [0.0, 0.0, w, 10.0],
            embedding: vec![1.0; dim],
            confidence: Some(0.9),
            extra: Extra::new(),
        };
        let mut r = records(small());
        r.faces = Sourced::in_memory("faces.jsonl", vec![face("f1", 4, 5.0), face("f2", 3, 5.0)]);
        let err = Corpus::from_records(r, Roster::default()).unwrap_err();
        assert!(err.to_string().contains("dimension 3 differs from 4"), "{err}");

        let mut r = records(small());
        r.faces = Sourced::in_memory("faces.jsonl", vec![face("f1", 4, 0.0)]);
        assert!(Corpus::from_records(r, Roster::default()).is_err());
    }

    #[test]
    fn gallery_person_with_two_parties_is_rejected() {
        let entry = |party: &str| GalleryEntry {
            person: "Olaf Scholz".into(),
            party: party.into(),
            source_ref: "x".into(),
            embedding: vec![1.0, 0.0],
            extra: Extra::new(),
        };
        let mut r = records(small());
        r.gallery = Sourced::in_memory("gallery.jsonl", vec![entry("SPD"), entry("CDU")]);
        assert!(Corpus::from_records(r, Roster::default()).is_err());
    }

    #[test]
    fn annotation_duplicates_and_vocabulary() {
        let ann = |annotator: &str, label: &str| AnnotationRecord {
            unit_id: "i1".into(),
            annotator_id: annotator.into(),
            task: Task::PersonCount,
            label: label.into(),
            extra: Extra::new(),
        };
        let mut r = records(small());
        r.annotations = Sourced::in_memory("annotations.jsonl", vec![ann("a", "1"), ann("a", "2")]);
        assert!(matches!(
            Corpus::from_records(r, Roster::default()).unwrap_err(),
            CorpusError::Duplicate { .. }
        ));
        let mut r = records(small());
        r.annotations = Sourced::in_memory("annotations.jsonl", vec![ann("a", "4")]);
        assert!(Corpus::from_records(r, Roster::default()).is_err());
    }

    #[test]
    fn prediction_unsure_only_where_allowed() {
        let pred = |task: Task, label: &str| PredictionRecord {
            unit_id: "i1".into(),
            model_id: "m".into(),
            task,
            label: label.into(),
            comment: None,
            raw_response: None,
            status: PredictionStatus::Ok,
            extra: Extra::new(),
        };
        let mut r = records(small());
        r.predictions = Sourced::in_memory(
            "predictions.jsonl",
            vec![pred(Task::CandidatePresence, "Unsure")],
        );
        assert!(Corpus::from_records(r, Roster::default()).is_ok());
        let mut r = records(small());
        r.predictions = Sourced::in_memory("predictions.jsonl", vec![pred(Task::PersonCount, "Unsure")]);
        assert!(Corpus::from_records(r, Roster::default()).is_err());
    }

    #[test]
    fn label_set_report() {
        let ann = |label: &str| AnnotationRecord {
            unit_id: format!("u{label}"),
            annotator_id: "a".into(),
            task: Task::PersonCount,
            label: label.into(),
            extra: Extra::new(),
        };
        let valid: Vec<_> = ["0", "1", "2", "3+"].iter().map(|l| ann(l)).collect();
        assert!(validate_label_sets(&valid, Task::PersonCount, &Roster::default()).is_empty());
        let report = validate_label_sets(&[ann("4")], Task::PersonCount, &Roster::default());
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].unit_id, "u4");

        let face = AnnotationRecord {
            unit_id: "f1".into(),
            annotator_id: "a".into(),
            task: Task::FaceIdentity,
            label: "Olaf Scholz".into(),
            extra: Extra::new(),
        };
        assert!(validate_label_sets(&[face], Task::FaceIdentity, &Roster::default()).is_empty());
    }

    #[test]
    fn extra_fields_survive_round_trip() {
        let v = json!({"kind":"image","image_id":"i1","item_id":"s1","media_origin":"video_first_frame","detector":"x"});
        let line: CorpusLine = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(serde_json::to_value(&line).unwrap(), v);
    }

    #[test]
    fn roster_lookups() {
        let r = Roster::german_2021();
        assert_eq!(r.front_runner("SPD"), Some("Olaf Scholz"));
        assert_eq!(r.party_of("Markus Söder"), Some("CSU"));
        assert_eq!(r.parties().len(), 5);
    }
}
