mod common;

use std::path::Path;

use common::{fixtures, visfocus};
use serde_json::Value;
use visfocus_llm::mock::{MockResponse, MockServer};

fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn error_record(stderr: &[u8]) -> Value {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|it| it.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn missing_input_exits_2_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = visfocus(dir.path(), &["ingest", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out.stderr);
    assert_eq!(rec["error"]["kind"], "input");
    assert_eq!(rec["error"]["exit_code"], 2);
    assert_eq!(rec["error"]["command"], "ingest");
    assert!(files_in(dir.path()).is_empty());
}

#[test]
fn malformed_jsonl_exits_2_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("corpus.jsonl");
    let good = std::fs::read_to_string(fixtures().join("corpus.jsonl")).unwrap();
    let mut lines: Vec<&str> = good.lines().collect();
    lines[3] = "{\"kind\": \"item\", broken";
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let out_dir = dir.path().join("out");
    let out = visfocus(&out_dir, &["ingest", "--corpus", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = error_record(&out.stderr)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("corpus.jsonl: line 4"), "{msg}");
    assert!(files_in(&out_dir).is_empty(), "failed run left files: {:?}", files_in(&out_dir));
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"threshhold": 0.5}"#).unwrap();
    let out = visfocus(dir.path(), &["--config", cfg.to_str().unwrap(), "ingest", "--corpus", &fx("corpus.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibration_without_face_labels_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("presence_only.jsonl");
    let text = std::fs::read_to_string(fixtures().join("annotations.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("face_identity")).collect();
    std::fs::write(&ann, kept.join("\n")).unwrap();
    let out_dir = dir.path().join("out");
    let out = visfocus(
        &out_dir,
        &["calibrate", "--gallery", &fx("gallery.jsonl"), "--faces", &fx("faces.jsonl"), "--annotations",
            ann.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out.stderr)["error"]["kind"], "computation");
    assert!(files_in(&out_dir).is_empty());
}

#[test]
fn match_requires_a_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = visfocus(dir.path(), &["match", "--gallery", &fx("gallery.jsonl"), "--faces", &fx("faces.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_inputs_relative_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["corpus.jsonl", "faces.jsonl", "gallery.jsonl"] {
        std::fs::copy(fixtures().join(f), dir.path().join(f)).unwrap();
    }
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": "posts", "out_dir": "out", "threshold": 0.5,
            "inputs": {"corpus": "corpus.jsonl", "faces": "faces.jsonl", "gallery": "gallery.jsonl"}}"#,
    )
    .unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_visfocus"))
        .args(["--config", cfg.to_str().unwrap(), "match"])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = read_json(&dir.path().join("out/manifest.match.json"));
    assert_eq!(manifest["dataset"], "posts");
    assert_eq!(manifest["config"]["threshold"]["threshold"], 0.5);
    assert_eq!(manifest["complete"], true);
}

#[test]
fn manifest_lists_inputs_and_outputs_with_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = visfocus(
        dir.path(),
        &["--dataset", "stories", "match", "--gallery", &fx("gallery.jsonl"), "--faces", &fx("faces.jsonl"),
            "--corpus", &fx("corpus.jsonl"), "--threshold", "0.4"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(files_in(dir.path()), ["manifest.match.json", "matches.jsonl", "presence.jsonl"]);
    let m = read_json(&dir.path().join("manifest.match.json"));
    assert_eq!(m["command"], "match");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    let outputs = m["outputs"].as_array().unwrap();
    let presence = outputs.iter().find(|o| o["path"] == "presence.jsonl").unwrap();
    let digest = presence["sha256"].as_str().unwrap();
    let bytes = std::fs::read(dir.path().join("presence.jsonl")).unwrap();
    use sha2::Digest;
    assert_eq!(digest, hex::encode(sha2::Sha256::digest(&bytes)));
    // One presence row per image for its party's front-runner.
    assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 50);
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    common::full_pipeline(&a).unwrap();
    common::full_pipeline(&b).unwrap();
    common::compare_runs(&a, &b).unwrap();

    let battery = read_json(&a.join("battery.json"));
    assert_eq!(battery["dataset"], "stories");
    assert_eq!(battery["n_images"], 50);
    let csv = std::fs::read_to_string(a.join("visibility.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    let eval = read_json(&a.join("eval_model/eval_report.json"));
    assert_eq!(eval["n_failed_prediction"], 1);
}

#[test]
fn unsure_policy_exclude_drops_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let gold_dir = dir.path().join("gold");
    assert!(visfocus(&gold_dir, &["gold", "--annotations", &fx("annotations.jsonl"), "--task", "candidate_presence"])
        .status
        .success());
    let gold = gold_dir.join("gold.jsonl").display().to_string();
    let run = |policy: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let o = visfocus(
            &out_dir,
            &["eval", "--gold", &gold, "--task", "candidate_presence", "--predictions", &fx("predictions.jsonl"),
                "--unsure-policy", policy],
        );
        assert!(o.status.success());
        read_json(&out_dir.join("eval_report.json"))
    };
    let absent = run("as-absent", "a");
    let exclude = run("exclude", "b");
    let refusals = exclude["n_unsure_excluded"].as_u64().unwrap();
    assert!(refusals > 0);
    assert_eq!(absent["n_unsure_excluded"], 0);
    assert_eq!(
        absent["n_evaluated"].as_u64().unwrap(),
        exclude["n_evaluated"].as_u64().unwrap() + refusals
    );
}

fn write_images(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..50 {
        std::fs::write(dir.join(format!("img{i:03}.jpg")), format!("\u{ff}\u{d8} fixture image {i}")).unwrap();
    }
}

#[test]
fn llm_annotate_against_mock_then_cached() {
    let server = MockServer::start(|req| {
        let prompt = req.prompt().unwrap_or_default().to_string();
        let verdict = if prompt.contains("Olaf Scholz") { "True" } else { "False" };
        MockResponse::chat(&format!(r#"{{"comment": "ok", "pictures_candidate": "{verdict}"}}"#))
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    write_images(&images);
    let args = |out: &Path| {
        visfocus(
            out,
            &["llm-annotate", "--corpus", &fx("corpus.jsonl"), "--images-dir", images.to_str().unwrap(), "--task",
                "candidate-presence", "--endpoint", &server.url(), "--cache-dir",
                dir.path().join("cache").to_str().unwrap(), "--max-retries", "0"],
        )
    };
    let first = args(&dir.path().join("one"));
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(server.hits(), 50);
    let preds = std::fs::read_to_string(dir.path().join("one/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 50);
    assert_eq!(preds.lines().filter(|l| l.contains("\"label\":\"True\"")).count(), 10);

    let second = args(&dir.path().join("two"));
    assert!(second.status.success());
    assert_eq!(server.hits(), 50);
    let run = read_json(&dir.path().join("two/llm_run.json"));
    assert_eq!(run["stats"]["network_calls"], 0);
    assert_eq!(
        std::fs::read(dir.path().join("one/predictions.jsonl")).unwrap(),
        std::fs::read(dir.path().join("two/predictions.jsonl")).unwrap()
    );
}

#[test]
fn llm_transport_failure_exits_4_and_marks_incomplete() {
    let server = MockServer::start(|_| MockResponse::error(503, "unavailable")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    write_images(&images);
    let out_dir = dir.path().join("out");
    let out = visfocus(
        &out_dir,
        &["llm-annotate", "--corpus", &fx("corpus.jsonl"), "--images-dir", images.to_str().unwrap(), "--task",
            "person-count", "--endpoint", &server.url(), "--max-retries", "0", "--concurrency", "2"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out.stderr)["error"]["kind"], "transport");
    let manifest = read_json(&out_dir.join("manifest.llm-annotate.json"));
    assert_eq!(manifest["complete"], false);
    let preds = std::fs::read_to_string(out_dir.join("predictions.jsonl")).unwrap();
    assert!(preds.lines().all(|l| l.contains("transport_failure")));
    // Failed replies are not cached.
    assert_eq!(files_in(&out_dir.join("llm_cache")).len(), 0);
}

#[test]
fn every_output_is_traceable_to_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    common::full_pipeline(dir.path()).unwrap();
    let mut checked = 0;
    for rel in common::read_tree(dir.path()).keys() {
        let path = dir.path().join(rel);
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("manifest.") {
            continue;
        }
        let folder = path.parent().unwrap();
        let owners: Vec<String> = files_in(folder)
            .into_iter()
            .filter(|f| f.starts_with("manifest."))
            .filter(|f| {
                read_json(&folder.join(f))["outputs"].as_array().unwrap().iter().any(|o| o["path"] == name.as_str())
            })
            .collect();
        assert_eq!(owners.len(), 1, "{rel} listed by {owners:?}");
        if name.ends_with(".json") {
            assert_eq!(read_json(&path)["manifest"], owners[0].as_str(), "{rel}");
        }
        checked += 1;
    }
    assert!(checked >= 20);
}
