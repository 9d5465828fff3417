//! Gallery-based face verification.
//!
//! Embeddings are L2-normalized before the Euclidean distance is taken, so
//! every distance lies in `[0, 2]` and does not depend on embedding scale.
//! A face is labeled with its closest gallery person when the distance does
//! not exceed the threshold and `"Unknown"` otherwise.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FaceDetection, GalleryEntry, UNKNOWN_LABEL};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no gallery entries for party {0:?}")]
    EmptyPartyGallery(String),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

/// Returns `v / |v|`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, MatchError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(MatchError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn unit_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between the L2-normalized forms of `a` and `b`.
pub fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(unit_distance(&normalize(a)?, &normalize(b)?))
}

#[derive(Debug, Clone)]
struct GalleryVector {
    person: String,
    party: String,
    unit: Vec<f64>,
}

/// Gallery entries with pre-normalized embeddings.
#[derive(Debug, Clone)]
pub struct Gallery {
    entries: Vec<GalleryVector>,
    dim: usize,
}

impl Gallery {
    pub fn new(entries: &[GalleryEntry]) -> Result<Self, MatchError> {
        let first = entries.first().ok_or(MatchError::EmptyGallery)?;
        let dim = first.embedding.len();
        let entries = entries
            .iter()
            .map(|e| {
                if e.embedding.len() != dim {
                    return Err(MatchError::DimensionMismatch {
                        left: dim,
                        right: e.embedding.len(),
                    });
                }
                Ok(GalleryVector {
                    person: e.person.clone(),
                    party: e.party.clone(),
                    unit: normalize(&e.embedding)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { entries, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distinct persons in lexicographic order.
    pub fn persons(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.iter().map(|e| e.person.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Keeps only the entries of `party`.
    pub fn restrict(&self, party: &str) -> Result<Gallery, MatchError> {
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.party == party)
            .cloned()
            .collect();
        if entries.is_empty() {
            return Err(MatchError::EmptyPartyGallery(party.to_string()));
        }
        Ok(Gallery {
            entries,
            dim: self.dim,
        })
    }

    /// Closest person and its distance for an embedding.
    ///
    /// A person's distance is the minimum over their entries. Ties between
    /// persons go to the lexicographically smallest name.
    pub fn best_match(&self, embedding: &[f64]) -> Result<(String, f64), MatchError> {
        if embedding.len() != self.dim {
            return Err(MatchError::DimensionMismatch {
                left: embedding.len(),
                right: self.dim,
            });
        }
        let unit = normalize(embedding)?;
        let mut best: Option<(&str, f64)> = None;
        for entry in &self.entries {
            let d = unit_distance(&unit, &entry.unit);
            best = match best {
                None => Some((&entry.person, d)),
                Some((p, bd)) if d < bd || (d == bd && entry.person.as_str() < p) => {
                    Some((&entry.person, d))
                }
                keep => keep,
            };
        }
        let (person, d) = best.ok_or(MatchError::EmptyGallery)?;
        Ok((person.to_string(), d))
    }
}

/// Keeps the gallery entries of one party.
pub fn restrict_gallery(gallery: &[GalleryEntry], party: &str) -> Result<Vec<GalleryEntry>, MatchError> {
    let out: Vec<_> = gallery.iter().filter(|e| e.party == party).cloned().collect();
    if out.is_empty() {
        return Err(MatchError::EmptyPartyGallery(party.to_string()));
    }
    Ok(out)
}

/// Closest gallery person for a detected face.
pub fn match_face(face: &FaceDetection, gallery: &[GalleryEntry]) -> Result<(String, f64), MatchError> {
    Gallery::new(gallery)?.best_match(&face.embedding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub face_id: String,
    pub image_id: String,
    pub best_person: String,
    pub distance: f64,
    pub label: String,
}

impl MatchResult {
    pub fn unlabeled(face_id: &str, image_id: &str, best_person: String, distance: f64) -> Self {
        Self {
            face_id: face_id.to_string(),
            image_id: image_id.to_string(),
            best_person,
            distance,
            label: UNKNOWN_LABEL.to_string(),
        }
    }

    pub fn is_known(&self) -> bool {
        self.label != UNKNOWN_LABEL
    }
}

/// Label for a single distance: a match at or below `threshold`, else unknown.
pub fn label_for(best_person: &str, distance: f64, threshold: f64) -> String {
    if distance > threshold {
        UNKNOWN_LABEL.to_string()
    } else {
        best_person.to_string()
    }
}

/// Applies the threshold to every match.
pub fn label_faces(matches: &[MatchResult], threshold: f64) -> Result<Vec<MatchResult>, MatchError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(MatchError::InvalidThreshold(threshold));
    }
    Ok(matches
        .iter()
        .map(|m| MatchResult {
            label: label_for(&m.best_person, m.distance, threshold),
            ..m.clone()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresenceSource {
    Embedding,
    Model,
    Human,
}

impl PresenceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PresenceSource::Embedding => "embedding",
            PresenceSource::Model => "model",
            PresenceSource::Human => "human",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceResult {
    pub image_id: String,
    pub candidate: String,
    pub present: bool,
    pub source: PresenceSource,
}

/// An image shows `candidate` iff at least one of its faces carries that label.
pub fn aggregate_presence(image_id: &str, labeled: &[MatchResult], candidate: &str) -> PresenceResult {
    PresenceResult {
        image_id: image_id.to_string(),
        candidate: candidate.to_string(),
        present: labeled.iter().any(|m| m.label == candidate),
        source: PresenceSource::Embedding,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    /// Each image is compared only with the front-runner of its account's party.
    #[default]
    PerParty,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMatches {
    pub matches: Vec<MatchResult>,
    pub presence: Vec<PresenceResult>,
}

type ImageMatches = (Vec<MatchResult>, Vec<PresenceResult>);

/// Matches every face of the corpus and aggregates presence per image.
///
/// In [`GalleryMode::PerParty`] each image yields one presence row for its
/// party's front-runner. In [`GalleryMode::Full`] each image yields one row
/// per gallery person. Images without faces are reported as not present.
pub fn match_corpus(
    corpus: &Corpus,
    gallery: &Gallery,
    threshold: f64,
    mode: GalleryMode,
) -> Result<CorpusMatches, MatchError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(MatchError::InvalidThreshold(threshold));
    }
    let mut party_galleries: BTreeMap<String, Gallery> = BTreeMap::new();
    if mode == GalleryMode::PerParty {
        for party in corpus.roster().parties() {
            if let Ok(g) = gallery.restrict(party) {
                party_galleries.insert(party.to_string(), g);
            }
        }
    }

    let images: Vec<_> = corpus.images().collect();
    let per_image: Vec<Result<ImageMatches, MatchError>> = images
        .par_iter()
        .map(|image| {
            let party = corpus
                .item_of_image(&image.image_id)
                .map(|i| i.party.as_str())
                .unwrap_or_default();
            let (g, candidates): (&Gallery, Vec<String>) = match mode {
                GalleryMode::PerParty => {
                    let g = party_galleries
                        .get(party)
                        .ok_or_else(|| MatchError::EmptyPartyGallery(party.to_string()))?;
                    let candidate = corpus
                        .roster()
                        .front_runner(party)
                        .map(String::from)
                        .unwrap_or_else(|| g.persons()[0].to_string());
                    (g, vec![candidate])
                }
                GalleryMode::Full => (gallery, gallery.persons().into_iter().map(String::from).collect()),
            };
            let mut labeled = Vec::new();
            for face in corpus.faces_of_image(&image.image_id) {
                let (person, d) = g.best_match(&face.embedding)?;
                let label = label_for(&person, d, threshold);
                labeled.push(MatchResult {
                    face_id: face.face_id.clone(),
                    image_id: image.image_id.clone(),
                    best_person: person,
                    distance: d,
                    label,
                });
            }
            let presence = candidates
                .iter()
                .map(|c| aggregate_presence(&image.image_id, &labeled, c))
                .collect();
            Ok((labeled, presence))
        })
        .collect();

    let mut out = CorpusMatches {
        matches: Vec::new(),
        presence: Vec::new(),
    };
    for r in per_image {
        let (m, p) = r?;
        out.matches.extend(m);
        out.presence.extend(p);
    }
    Ok(out)
}

/// Matches standalone faces against a full gallery, grouping presence by image.
///
/// Used when no corpus metadata is available; only images that have at least
/// one face appear in the presence output.
pub fn match_faces(
    faces: &[FaceDetection],
    gallery: &Gallery,
    threshold: f64,
) -> Result<CorpusMatches, MatchError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(MatchError::InvalidThreshold(threshold));
    }
    let mut ordered: Vec<&FaceDetection> = faces.iter().collect();
    ordered.sort_by(|a, b| (&a.image_id, &a.face_id).cmp(&(&b.image_id, &b.face_id)));
    let matches = ordered
        .par_iter()
        .map(|face| {
            let (person, d) = gallery.best_match(&face.embedding)?;
            Ok(MatchResult {
                face_id: face.face_id.clone(),
                image_id: face.image_id.clone(),
                label: label_for(&person, d, threshold),
                best_person: person,
                distance: d,
            })
        })
        .collect::<Result<Vec<_>, MatchError>>()?;
    let mut by_image: BTreeMap<&str, Vec<MatchResult>> = BTreeMap::new();
    for m in &matches {
        by_image.entry(m.image_id.as_str()).or_default().push(m.clone());
    }
    let persons = gallery.persons();
    let presence = by_image
        .iter()
        .flat_map(|(image_id, ms)| {
            persons
                .iter()
                .map(move |p| aggregate_presence(image_id, ms, p))
        })
        .collect();
    Ok(CorpusMatches { matches, presence })
}
