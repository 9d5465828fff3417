//! Output staging and run manifests.
//!
//! Outputs are written to a hidden staging directory inside the output
//! directory and moved into place only when the command succeeds, together
//! with `manifest.<command>.json`. A failed run leaves no partial files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Classify};

pub const TOOL: &str = "visfocus";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).input_err(&format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Run {
    command: String,
    out_dir: PathBuf,
    staging: PathBuf,
    dataset: Option<String>,
    config: Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
    notes: Vec<String>,
    committed: bool,
}

impl Run {
    /// Checks that every input exists and prepares the staging directory.
    pub fn start(command: &str, out_dir: &Path, dataset: Option<&str>, config: Value, inputs: &[&Path]) -> CliResult<Self> {
        let mut digests = Vec::new();
        for p in inputs {
            if p.is_dir() {
                digests.push(FileDigest { path: p.display().to_string(), sha256: None });
            } else if p.is_file() {
                digests.push(FileDigest { path: p.display().to_string(), sha256: Some(sha256_file(p)?) });
            } else {
                return Err(CliError::input(format!("input not found: {}", p.display())));
            }
        }
        fs::create_dir_all(out_dir).input_err(&format!("creating {}", out_dir.display()))?;
        let staging = out_dir.join(format!(".staging-{command}-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).input_err("clearing stale staging directory")?;
        }
        fs::create_dir_all(&staging).input_err("creating staging directory")?;
        Ok(Run {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            staging,
            dataset: dataset.map(str::to_string),
            config,
            inputs: digests,
            outputs: Vec::new(),
            notes: Vec::new(),
            committed: false,
        })
    }

    pub fn manifest_name(&self) -> String {
        format!("manifest.{}.json", self.command)
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    fn stage(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::write(self.staging.join(name), bytes).input_err(&format!("writing {name}"))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Writes a JSON object with `dataset` and `manifest` keys added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(value).compute_err("serializing output")?;
        let obj = match &mut v {
            Value::Object(m) => m,
            _ => return Err(CliError::computation(format!("{name}: top-level value must be an object"))),
        };
        obj.insert("manifest".into(), Value::String(self.manifest_name()));
        obj.insert("dataset".into(), self.dataset.clone().map_or(Value::Null, Value::String));
        let mut text = serde_json::to_string_pretty(&v).compute_err("serializing output")?;
        text.push('\n');
        self.stage(name, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> CliResult<()> {
        let text = visfocus_core::jsonl::to_string(records);
        self.stage(name, text.as_bytes())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.stage(name, bytes)
    }

    /// Moves staged outputs into place and writes the manifest.
    pub fn commit(mut self, complete: bool) -> CliResult<PathBuf> {
        let mut outputs = Vec::new();
        for name in &self.outputs {
            outputs.push(FileDigest { path: name.clone(), sha256: Some(sha256_file(&self.staging.join(name))?) });
        }
        let manifest = json!({
            "tool": TOOL,
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "created_at": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "dataset": self.dataset,
            "complete": complete,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "notes": self.notes,
        });
        let mut text = serde_json::to_string_pretty(&manifest).compute_err("serializing manifest")?;
        text.push('\n');
        for name in &self.outputs {
            fs::rename(self.staging.join(name), self.out_dir.join(name)).input_err(&format!("moving {name} into place"))?;
        }
        let manifest_path = self.out_dir.join(self.manifest_name());
        fs::write(&manifest_path, text).input_err("writing manifest")?;
        let _ = fs::remove_dir_all(&self.staging);
        self.committed = true;
        Ok(manifest_path)
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Drops `null` fields so the recorded config lists only what was set.
pub fn compact(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, compact(v)))
                .collect::<Map<_, _>>(),
        ),
        other => other,
    }
}
