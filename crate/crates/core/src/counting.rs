//! Person counts and the four count classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{PredictionRecord, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CountBucket {
    Zero,
    One,
    Two,
    ThreeOrMore,
}

impl CountBucket {
    pub const ALL: [CountBucket; 4] = [
        CountBucket::Zero,
        CountBucket::One,
        CountBucket::Two,
        CountBucket::ThreeOrMore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CountBucket::Zero => "0",
            CountBucket::One => "1",
            CountBucket::Two => "2",
            CountBucket::ThreeOrMore => "3+",
        }
    }
}

impl fmt::Display for CountBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CountError {
    #[error("invalid count label {0:?}, expected one of 0, 1, 2, 3+")]
    InvalidLabel(String),
    #[error("prediction is for task {0}, not person_count")]
    WrongTask(Task),
}

impl FromStr for CountBucket {
    type Err = CountError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CountBucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| CountError::InvalidLabel(s.to_string()))
    }
}

impl Serialize for CountBucket {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CountBucket {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn bucket(n: usize) -> CountBucket {
    match n {
        0 => CountBucket::Zero,
        1 => CountBucket::One,
        2 => CountBucket::Two,
        _ => CountBucket::ThreeOrMore,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSource {
    /// Face-detector bounding boxes.
    Faces,
    /// Object-detector boxes labeled as a person.
    Objects,
    Model,
    Human,
}

impl CountSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CountSource::Faces => "faces",
            CountSource::Objects => "objects",
            CountSource::Model => "model",
            CountSource::Human => "human",
        }
    }
}

/// An object-detector box, as emitted by a general-purpose vision API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub image_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Keeps boxes labeled "Person" (case-insensitive).
pub fn person_boxes(boxes: &[ObjectBox]) -> Vec<&ObjectBox> {
    boxes
        .iter()
        .filter(|b| b.label.eq_ignore_ascii_case("person"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub image_id: String,
    pub source: CountSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<usize>,
    pub bucket: CountBucket,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crowd: Option<bool>,
}

/// Raw box count and its class; `source` is carried through for provenance.
pub fn count_from_detections<T>(detections: &[T], source: CountSource) -> (usize, CountBucket, CountSource) {
    (detections.len(), bucket(detections.len()), source)
}

/// Reads the count class straight from a person_count prediction label.
pub fn count_from_prediction(p: &PredictionRecord) -> Result<CountBucket, CountError> {
    if p.task != Task::PersonCount {
        return Err(CountError::WrongTask(p.task));
    }
    p.label.parse()
}
