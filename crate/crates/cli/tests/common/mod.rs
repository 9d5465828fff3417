#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn visfocus(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visfocus"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn visfocus")
}

fn step(out: &Path, args: &[&str]) -> Result<(), String> {
    let o = visfocus(out, args);
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

/// Every offline subcommand on the bundled fixture, writing into `out`.
pub fn full_pipeline(out: &Path) -> Result<(), String> {
    let f = fixtures();
    let p = |name: &str| f.join(name).display().to_string();
    let o = |name: &str| out.join(name).display().to_string();
    let (corpus, faces, gallery, ann, preds) =
        (p("corpus.jsonl"), p("faces.jsonl"), p("gallery.jsonl"), p("annotations.jsonl"), p("predictions.jsonl"));

    step(out, &["--dataset", "stories", "ingest", "--corpus", &corpus, "--faces", &faces, "--gallery", &gallery,
        "--annotations", &ann, "--predictions", &preds])?;
    step(out, &["calibrate", "--gallery", &gallery, "--faces", &faces, "--annotations", &ann, "--corpus", &corpus])?;
    step(out, &["match", "--gallery", &gallery, "--faces", &faces, "--corpus", &corpus, "--calibration",
        &o("calibration.json")])?;
    for task in ["face_identity", "candidate_presence", "person_count"] {
        step(&out.join(task), &["gold", "--annotations", &ann, "--task", task])?;
        step(&out.join(task), &["alpha", "--annotations", &ann, "--task", task, "--with-model", &preds])?;
    }
    let presence_gold = o("candidate_presence/gold.jsonl");
    step(&out.join("eval_model"), &["eval", "--gold", &presence_gold, "--task", "candidate_presence",
        "--predictions", &preds])?;
    step(&out.join("eval_faces"), &["eval", "--gold", &presence_gold, "--task", "candidate_presence",
        "--presence", &o("presence.jsonl"), "--corpus", &corpus])?;
    step(&out.join("eval_count"), &["eval", "--gold", &o("person_count/gold.jsonl"), "--task", "person_count",
        "--predictions", &preds])?;
    step(out, &["count", "--source", "faces", "--faces", &faces, "--corpus", &corpus])?;
    step(out, &["--dataset", "stories", "report", "--corpus", &corpus, "--gold", &presence_gold, "--counts",
        &o("counts.jsonl")])?;
    step(out, &["--dataset", "stories", "analyze", "--visibility", &o("visibility.csv")])?;
    Ok(())
}

/// All files below `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Manifest bytes with the timestamp and the run's own directory masked.
pub fn normalize_manifest(bytes: &[u8], out: &Path) -> String {
    let text = String::from_utf8_lossy(bytes).replace(&out.display().to_string(), "<out>");
    text.lines()
        .filter(|l| !l.trim_start().starts_with("\"created_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Compares two pipeline trees. Data files must match byte for byte.
pub fn compare_runs(a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (read_tree(a), read_tree(b));
    if ta.keys().ne(tb.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>()));
    }
    for (name, bytes) in &ta {
        let other = &tb[name];
        let is_manifest = Path::new(name).file_name().is_some_and(|f| f.to_string_lossy().starts_with("manifest."));
        let same = if is_manifest {
            normalize_manifest(bytes, a) == normalize_manifest(other, b)
        } else {
            bytes == other
        };
        if !same {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(ta.len())
}
