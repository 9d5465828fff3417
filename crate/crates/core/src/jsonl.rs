//! Line-delimited JSON helpers.
//!
//! Blank lines are skipped; every other line must hold exactly one JSON
//! object. Line numbers are 1-based and refer to physical lines.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// One parsed object together with its physical line number.
#[derive(Debug, Clone)]
pub struct Line {
    pub number: usize,
    pub object: Map<String, Value>,
}

/// Reads every non-blank line of `path` as a JSON object.
pub fn read_objects(path: &Path) -> Result<Vec<Line>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: display.clone(),
        source,
    })?;
    parse_objects(BufReader::new(file), &display)
}

/// Parses line-delimited objects from any buffered reader; `origin` is used in errors.
pub fn parse_objects<R: BufRead>(reader: R, origin: &str) -> Result<Vec<Line>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let number = idx + 1;
        let line = line.map_err(|source| JsonlError::Io {
            path: origin.to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(trimmed) {
            Ok(Value::Object(object)) => out.push(Line { number, object }),
            Ok(_) => {
                return Err(JsonlError::Parse {
                    path: origin.to_string(),
                    line: number,
                    message: "expected a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(JsonlError::Parse {
                    path: origin.to_string(),
                    line: number,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Reads typed records; a record that fails to deserialize reports its line.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, JsonlError> {
    let display = path.display().to_string();
    read_objects(path)?
        .into_iter()
        .map(|line| {
            serde_json::from_value(Value::Object(line.object))
                .map(|rec| (line.number, rec))
                .map_err(|e| JsonlError::Parse {
                    path: display.clone(),
                    line: line.number,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Serializes records one per line, each terminated by `\n`.
pub fn write_records<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Renders records to an in-memory string, one per line.
pub fn to_string<T: Serialize>(records: &[T]) -> String {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_blank_lines_and_keeps_physical_numbers() {
        let src = "{\"a\":1}\n\n  \n{\"a\":2}\n";
        let lines = parse_objects(src.as_bytes(), "mem").unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].number, 1);
        assert_eq!(lines[1].number, 4);
    }

    #[test]
    fn rejects_non_objects_with_line_number() {
        let src = "{\"a\":1}\n[1,2]\n";
        let err = parse_objects(src.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn rejects_malformed_json() {
        let err = parse_objects("{\"a\":".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, JsonlError::Parse { line: 1, .. }));
    }
}
