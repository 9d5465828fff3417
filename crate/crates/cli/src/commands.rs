use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use visfocus_core::agreement::{alpha_with_model, build_gold, krippendorff_alpha, GoldRecord, ReliabilityMatrix, Resolution};
use visfocus_core::calibrate::{default_labels, optimize_threshold, CalibrationCase, CalibrationResult};
use visfocus_core::corpus::{read_annotations, read_jsonl, read_predictions, CorpusPaths, ABSENT_LABEL, PRESENT_LABEL, UNSURE_LABEL};
use visfocus_core::counting::{bucket, count_from_prediction, person_boxes, CountBucket, CountRecord, CountSource, ObjectBox};
use visfocus_core::evalmetrics::{classification_report, confusion};
use visfocus_core::facematch::{match_corpus, match_faces as match_face_list, CorpusMatches, Gallery, GalleryMode, MatchResult, PresenceResult, PresenceSource};
use visfocus_core::visibility::{self, build_rows, crosstab, run_battery, BatterySpec, GroupField, Signals, VisibilityRow};
use visfocus_core::{AnnotationRecord, Corpus, FaceDetection, GalleryEntry, LabelSpace, PredictionRecord, Task};
use visfocus_llm::client::DEFAULT_ENDPOINT;
use visfocus_llm::{annotate_batch, BatchOptions, Endpoint, HttpTransport, ImageJob, PromptTemplate, RequestParams, ResponseCache, RetryPolicy};

use crate::config::{optional, required, Globals, UnsurePolicy};
use crate::error::{CliError, CliResult, Classify};
use crate::run::{compact, Run};
use crate::{AlphaArgs, AnalyzeArgs, CalibrateArgs, CountArgs, CountSourceArg, EvalArgs, GoldArgs, IngestArgs, LlmAnnotateArgs, MatchArgs, ReportArgs};

fn config_value<T: Serialize>(v: &T) -> Value {
    compact(serde_json::to_value(v).unwrap_or(Value::Null))
}

fn load_corpus(g: &Globals, paths: CorpusPaths) -> CliResult<Corpus> {
    Corpus::load(&paths, g.roster.clone()).input_err("loading corpus")
}

fn load_resolutions(path: Option<&Path>) -> CliResult<Vec<Resolution>> {
    match path {
        Some(p) => read_jsonl(p).input_err("reading resolutions"),
        None => Ok(Vec::new()),
    }
}

fn gold_for(g: &Globals, annotations: &Path, resolutions: Option<&Path>, task: Task) -> CliResult<Vec<GoldRecord>> {
    let records = read_annotations(annotations, &g.roster).input_err("reading annotations")?;
    let resolutions = load_resolutions(resolutions)?;
    let space = LabelSpace::for_task(task, &g.roster);
    build_gold(&records, task, &resolutions, &space).input_err("building gold labels")
}

pub fn ingest(g: &Globals, a: &IngestArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let paths = CorpusPaths {
        corpus: required(&a.corpus, &i.corpus, "corpus")?,
        faces: optional(&a.faces, &i.faces),
        gallery: optional(&a.gallery, &i.gallery),
        annotations: optional(&a.annotations, &i.annotations),
        predictions: optional(&a.predictions, &i.predictions),
    };
    let inputs: Vec<&Path> = std::iter::once(paths.corpus.as_path())
        .chain([&paths.faces, &paths.gallery, &paths.annotations, &paths.predictions].into_iter().flatten().map(PathBuf::as_path))
        .collect();
    let mut run = Run::start("ingest", &g.out_dir, g.dataset_str(), json!({}), &inputs)?;
    let corpus = load_corpus(g, paths.clone())?;
    run.write_json(
        "corpus_summary.json",
        &json!({ "summary": corpus.summary(), "roster": g.roster.names() }),
    )?;
    run.commit(true)?;
    Ok(())
}

fn threshold_from(g: &Globals, flag: Option<f64>, calibration: Option<&PathBuf>) -> CliResult<(f64, Value)> {
    if let Some(t) = flag {
        return Ok((t, json!({"threshold": t})));
    }
    if let Some(p) = calibration.cloned().or_else(|| g.file.calibration.clone()) {
        let text = std::fs::read_to_string(&p).input_err(&format!("reading {}", p.display()))?;
        let v: Value = serde_json::from_str(&text).input_err("parsing calibration file")?;
        let t = v["threshold"].as_f64().ok_or_else(|| CliError::input("calibration file has no numeric threshold"))?;
        return Ok((t, json!({"threshold": t, "calibration": p.display().to_string()})));
    }
    g.file
        .threshold
        .map(|t| (t, json!({"threshold": t})))
        .ok_or_else(|| CliError::input("missing --threshold or --calibration (flag or config)"))
}

fn gallery_mode(g: &Globals, flag: Option<crate::GalleryModeArg>) -> GalleryMode {
    flag.map(GalleryMode::from).or(g.file.gallery_mode).unwrap_or_default()
}

/// Best matches for all faces, through the corpus when one is given.
fn run_matching(
    g: &Globals,
    faces: &Path,
    gallery: &Path,
    corpus: Option<&Path>,
    threshold: f64,
    mode: GalleryMode,
    run: &mut Run,
) -> CliResult<(CorpusMatches, Option<Corpus>)> {
    match corpus {
        Some(c) => {
            let corpus = load_corpus(
                g,
                CorpusPaths { corpus: c.to_path_buf(), faces: Some(faces.into()), gallery: Some(gallery.into()), ..Default::default() },
            )?;
            let gal = Gallery::new(corpus.gallery()).input_err("building gallery")?;
            let m = match_corpus(&corpus, &gal, threshold, mode).compute_err("matching faces")?;
            Ok((m, Some(corpus)))
        }
        None => {
            if mode == GalleryMode::PerParty {
                run.note("no corpus given: matched against the full gallery");
            }
            let faces: Vec<FaceDetection> = read_jsonl(faces).input_err("reading faces")?;
            let entries: Vec<GalleryEntry> = read_jsonl(gallery).input_err("reading gallery")?;
            let gal = Gallery::new(&entries).input_err("building gallery")?;
            Ok((match_face_list(&faces, &gal, threshold).compute_err("matching faces")?, None))
        }
    }
}

pub fn match_faces(g: &Globals, a: &MatchArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let gallery = required(&a.gallery, &i.gallery, "gallery")?;
    let faces = required(&a.faces, &i.faces, "faces")?;
    let corpus = optional(&a.corpus, &i.corpus);
    let (threshold, tcfg) = threshold_from(g, a.threshold, a.calibration.as_ref())?;
    let mode = gallery_mode(g, a.gallery_mode);
    let mut inputs = vec![gallery.as_path(), faces.as_path()];
    inputs.extend(corpus.as_deref());
    let cfg = json!({"threshold": tcfg, "gallery_mode": mode});
    let mut run = Run::start("match", &g.out_dir, g.dataset_str(), cfg, &inputs)?;
    let (m, _) = run_matching(g, &faces, &gallery, corpus.as_deref(), threshold, mode, &mut run)?;
    run.write_jsonl("matches.jsonl", &m.matches)?;
    run.write_jsonl("presence.jsonl", &m.presence)?;
    run.commit(true)?;
    Ok(())
}

pub fn calibrate(g: &Globals, a: &CalibrateArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let gallery = required(&a.gallery, &i.gallery, "gallery")?;
    let faces = required(&a.faces, &i.faces, "faces")?;
    let annotations = required(&a.annotations, &i.annotations, "annotations")?;
    let resolutions = optional(&a.resolutions, &i.resolutions);
    let corpus = optional(&a.corpus, &i.corpus);
    let mode = gallery_mode(g, a.gallery_mode);
    let mut inputs = vec![gallery.as_path(), faces.as_path(), annotations.as_path()];
    inputs.extend(resolutions.as_deref());
    inputs.extend(corpus.as_deref());
    let mut run = Run::start("calibrate", &g.out_dir, g.dataset_str(), json!({"gallery_mode": mode}), &inputs)?;

    // Any positive threshold works here: only best_person and distance are used.
    let (m, _) = run_matching(g, &faces, &gallery, corpus.as_deref(), 1.0, mode, &mut run)?;
    let gold = gold_for(g, &annotations, resolutions.as_deref(), Task::FaceIdentity)?;
    let truth: BTreeMap<&str, &str> = gold.iter().filter_map(|r| r.label.as_deref().map(|l| (r.unit_id.as_str(), l))).collect();
    let unresolved = gold.iter().filter(|r| r.label.is_none()).count();
    let cases: Vec<CalibrationCase> = m
        .matches
        .iter()
        .filter_map(|mr| {
            truth.get(mr.face_id.as_str()).map(|t| CalibrationCase {
                distance: mr.distance,
                truth: t.to_string(),
                best_person: mr.best_person.clone(),
            })
        })
        .collect();
    if unresolved > 0 {
        run.note(format!("{unresolved} faces without a majority label were left out"));
    }
    let labels = default_labels(&cases);
    let result: CalibrationResult = optimize_threshold(&cases, &labels).compute_err("calibrating threshold")?;
    run.write_json(
        "calibration.json",
        &json!({
            "threshold": result.threshold,
            "macro_f1": result.macro_f1,
            "sweep": result.sweep,
            "warnings": result.warnings,
            "labels": labels,
            "n_cases": cases.len(),
            "n_unresolved": unresolved,
        }),
    )?;
    run.commit(true)?;
    Ok(())
}

pub fn count(g: &Globals, a: &CountArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let corpus_path = optional(&a.corpus, &i.corpus);
    let (source, input) = match a.source {
        CountSourceArg::Faces => (CountSource::Faces, required(&a.faces, &i.faces, "faces")?),
        CountSourceArg::Objects => (CountSource::Objects, required(&a.objects, &i.objects, "objects")?),
        CountSourceArg::Model => (CountSource::Model, required(&a.predictions, &i.predictions, "predictions")?),
        CountSourceArg::Human => (CountSource::Human, required(&a.annotations, &i.annotations, "annotations")?),
    };
    let resolutions = optional(&a.resolutions, &i.resolutions);
    let mut inputs = vec![input.as_path()];
    inputs.extend(corpus_path.as_deref());
    inputs.extend(resolutions.as_deref());
    let mut run = Run::start("count", &g.out_dir, g.dataset_str(), json!({"source": source}), &inputs)?;
    let corpus = match &corpus_path {
        Some(c) => Some(load_corpus(g, CorpusPaths { corpus: c.clone(), ..Default::default() })?),
        None => None,
    };

    let mut records: BTreeMap<String, CountRecord> = BTreeMap::new();
    let mut skipped = 0usize;
    match source {
        CountSource::Faces | CountSource::Objects => {
            let mut raw: BTreeMap<String, usize> = BTreeMap::new();
            if let Some(c) = &corpus {
                for img in c.images() {
                    raw.insert(img.image_id.clone(), 0);
                }
            }
            if source == CountSource::Faces {
                let faces: Vec<FaceDetection> = read_jsonl(&input).input_err("reading faces")?;
                for f in &faces {
                    *raw.entry(f.image_id.clone()).or_default() += 1;
                }
            } else {
                let boxes: Vec<ObjectBox> = read_jsonl(&input).input_err("reading object boxes")?;
                for b in person_boxes(&boxes) {
                    *raw.entry(b.image_id.clone()).or_default() += 1;
                }
                for b in &boxes {
                    raw.entry(b.image_id.clone()).or_default();
                }
            }
            for (image_id, n) in raw {
                records.insert(image_id.clone(), CountRecord { image_id, source, raw: Some(n), bucket: bucket(n), crowd: None });
            }
        }
        CountSource::Model => {
            let preds = read_predictions(&input, &g.roster).input_err("reading predictions")?;
            let models: BTreeSet<&str> = preds.iter().filter(|p| p.task == Task::PersonCount).map(|p| p.model_id.as_str()).collect();
            if models.len() > 1 {
                return Err(CliError::input(format!("predictions hold several person_count models: {models:?}")));
            }
            for p in preds.iter().filter(|p| p.task == Task::PersonCount) {
                if p.status.is_failure() {
                    skipped += 1;
                    continue;
                }
                let b = count_from_prediction(p).input_err("reading count prediction")?;
                let crowd = p.extra.get("crowd").and_then(Value::as_bool);
                records.insert(p.unit_id.clone(), CountRecord { image_id: p.unit_id.clone(), source, raw: None, bucket: b, crowd });
            }
        }
        CountSource::Human => {
            let gold = gold_for(g, &input, resolutions.as_deref(), Task::PersonCount)?;
            for r in gold {
                match r.label {
                    Some(l) => {
                        let b: CountBucket = l.parse().input_err("reading count label")?;
                        records.insert(r.unit_id.clone(), CountRecord { image_id: r.unit_id, source, raw: None, bucket: b, crowd: None });
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    if let Some(c) = &corpus {
        if let Some(id) = records.keys().find(|id| c.image(id).is_none()) {
            return Err(CliError::input(format!("count for unknown image {id:?}")));
        }
    }
    if skipped > 0 {
        run.note(format!("{skipped} images without a usable count were left out"));
    }
    let out: Vec<CountRecord> = records.into_values().collect();
    run.write_jsonl("counts.jsonl", &out)?;
    run.commit(true)?;
    Ok(())
}

/// Maps a model label onto the human label space, or `None` to drop it.
fn map_model_label(task: Task, p: &PredictionRecord, policy: UnsurePolicy) -> Option<String> {
    if p.status.is_failure() {
        return None;
    }
    if task == Task::CandidatePresence && p.label == UNSURE_LABEL {
        return match policy {
            UnsurePolicy::AsAbsent => Some(ABSENT_LABEL.to_string()),
            UnsurePolicy::Exclude => None,
        };
    }
    Some(p.label.clone())
}

pub fn alpha(g: &Globals, a: &AlphaArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let annotations = required(&a.annotations, &i.annotations, "annotations")?;
    let policy = a.unsure_policy.or(g.file.unsure_policy).unwrap_or_default();
    let mut inputs = vec![annotations.as_path()];
    inputs.extend(a.with_model.iter().map(PathBuf::as_path));
    let mut run = Run::start("alpha", &g.out_dir, g.dataset_str(), json!({"task": a.task, "unsure_policy": policy}), &inputs)?;

    let records: Vec<AnnotationRecord> = read_annotations(&annotations, &g.roster).input_err("reading annotations")?;
    let m = ReliabilityMatrix::from_annotations(&records, a.task).input_err("building reliability matrix")?;
    let base = krippendorff_alpha(&m).compute_err("computing alpha")?;
    let space = LabelSpace::for_task(a.task, &g.roster);

    let mut with_model = BTreeMap::new();
    let mut detail = BTreeMap::new();
    for path in &a.with_model {
        let preds = read_predictions(path, &g.roster).input_err("reading predictions")?;
        let mut by_model: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for p in preds.iter().filter(|p| p.task == a.task) {
            if let Some(label) = map_model_label(a.task, p, policy) {
                by_model.entry(p.model_id.clone()).or_default().push((p.unit_id.clone(), label));
            }
        }
        for (model, labels) in by_model {
            if with_model.contains_key(&model) {
                return Err(CliError::input(format!("model {model:?} appears in more than one predictions file")));
            }
            let r = alpha_with_model(&m, &model, labels.iter().map(|(u, l)| (u.as_str(), l.as_str())), &space)
                .compute_err("computing alpha with model")?;
            with_model.insert(model.clone(), r.alpha);
            detail.insert(model, r);
        }
    }
    run.write_json(
        "alpha_report.json",
        &json!({
            "task": a.task,
            "metric": "nominal",
            "alpha": base.alpha,
            "Do": base.observed,
            "De": base.expected,
            "n_pairable": base.n_pairable,
            "units_pairable": base.units_pairable,
            "coders": m.coders().len(),
            "with_model": with_model,
            "with_model_detail": detail,
            "unsure_policy": policy,
        }),
    )?;
    run.commit(true)?;
    Ok(())
}

pub fn gold(g: &Globals, a: &GoldArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let annotations = required(&a.annotations, &i.annotations, "annotations")?;
    let resolutions = optional(&a.resolutions, &i.resolutions);
    let mut inputs = vec![annotations.as_path()];
    inputs.extend(resolutions.as_deref());
    let mut run = Run::start("gold", &g.out_dir, g.dataset_str(), json!({"task": a.task}), &inputs)?;
    let gold = gold_for(g, &annotations, resolutions.as_deref(), a.task)?;
    let review = gold.iter().filter(|r| r.label.is_none()).count();
    if review > 0 {
        run.note(format!("{review} units need review"));
    }
    run.write_jsonl("gold.jsonl", &gold)?;
    run.commit(true)?;
    Ok(())
}

fn present_label(present: bool) -> String {
    if present { PRESENT_LABEL } else { ABSENT_LABEL }.to_string()
}

/// One presence row per image, the one for the party's front-runner when a corpus is given.
fn presence_per_image(rows: &[PresenceResult], corpus: Option<&Corpus>) -> CliResult<BTreeMap<String, PresenceResult>> {
    let mut out: BTreeMap<String, PresenceResult> = BTreeMap::new();
    for r in rows {
        if let Some(c) = corpus {
            let item = c
                .item_of_image(&r.image_id)
                .ok_or_else(|| CliError::input(format!("presence for unknown image {:?}", r.image_id)))?;
            if c.roster().front_runner(&item.party) != Some(r.candidate.as_str()) {
                continue;
            }
        }
        if out.insert(r.image_id.clone(), r.clone()).is_some() {
            return Err(CliError::input(format!(
                "several presence rows for image {:?}; pass --corpus to select the front-runner",
                r.image_id
            )));
        }
    }
    Ok(out)
}

pub fn eval(g: &Globals, a: &EvalArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let gold_path = required(&a.gold, &i.gold, "gold")?;
    let policy = a.unsure_policy.or(g.file.unsure_policy).unwrap_or_default();
    let corpus_path = optional(&a.corpus, &i.corpus);
    let (source, pred_path) = match (&a.predictions, &a.presence, &a.matches) {
        (Some(p), _, _) => ("predictions", p.clone()),
        (_, Some(p), _) => ("presence", p.clone()),
        (_, _, Some(p)) => ("matches", p.clone()),
        _ => match (&i.predictions, &i.presence, &i.matches) {
            (Some(p), _, _) => ("predictions", p.clone()),
            (_, Some(p), _) => ("presence", p.clone()),
            (_, _, Some(p)) => ("matches", p.clone()),
            _ => return Err(CliError::input("missing --predictions, --presence or --matches")),
        },
    };
    let mut inputs = vec![gold_path.as_path(), pred_path.as_path()];
    inputs.extend(corpus_path.as_deref());
    let cfg = json!({"task": a.task, "source": source, "model_id": a.model_id, "unsure_policy": policy});
    let mut run = Run::start("eval", &g.out_dir, g.dataset_str(), compact(cfg), &inputs)?;

    let gold: Vec<GoldRecord> = read_jsonl(&gold_path).input_err("reading gold")?;
    let mut model_id = None;
    let mut excluded = 0usize;
    let mut failed = 0usize;
    let predicted: BTreeMap<String, String> = match source {
        "predictions" => {
            let preds = read_predictions(&pred_path, &g.roster).input_err("reading predictions")?;
            let preds: Vec<&PredictionRecord> = preds
                .iter()
                .filter(|p| p.task == a.task && a.model_id.as_ref().is_none_or(|m| &p.model_id == m))
                .collect();
            let models: BTreeSet<&str> = preds.iter().map(|p| p.model_id.as_str()).collect();
            if models.len() > 1 {
                return Err(CliError::input(format!("several models in predictions, choose one with --model-id: {models:?}")));
            }
            model_id = models.first().map(|m| m.to_string());
            let mut out = BTreeMap::new();
            for p in preds {
                if p.status.is_failure() {
                    failed += 1;
                    continue;
                }
                match map_model_label(a.task, p, policy) {
                    Some(l) => {
                        out.insert(p.unit_id.clone(), l);
                    }
                    None => excluded += 1,
                }
            }
            out
        }
        "presence" => {
            let rows: Vec<PresenceResult> = read_jsonl(&pred_path).input_err("reading presence")?;
            let corpus = match &corpus_path {
                Some(c) => Some(load_corpus(g, CorpusPaths { corpus: c.clone(), ..Default::default() })?),
                None => None,
            };
            presence_per_image(&rows, corpus.as_ref())?
                .into_iter()
                .map(|(k, r)| (k, present_label(r.present)))
                .collect()
        }
        _ => {
            let rows: Vec<MatchResult> = read_jsonl(&pred_path).input_err("reading matches")?;
            rows.into_iter().map(|m| (m.face_id, m.label)).collect()
        }
    };

    let space = LabelSpace::for_task(a.task, &g.roster);
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut missing = 0usize;
    let mut unresolved = 0usize;
    for r in gold.iter().filter(|r| r.task == a.task) {
        let Some(t) = &r.label else {
            unresolved += 1;
            continue;
        };
        match predicted.get(&r.unit_id) {
            Some(p) => {
                truth.push(t.as_str());
                pred.push(p.as_str());
            }
            None => missing += 1,
        }
    }
    let labels: Vec<&str> = space.labels().iter().map(String::as_str).collect();
    let cm = confusion(&truth, &pred, &labels).compute_err("building confusion matrix")?;
    let metrics = classification_report(&cm).compute_err("computing metrics")?;
    let mut csv_buf = Vec::new();
    cm.write_csv(&mut csv_buf).compute_err("writing confusion matrix")?;
    run.write_json(
        "eval_report.json",
        &json!({
            "task": a.task,
            "source": source,
            "model_id": model_id,
            "labels": labels,
            "n_evaluated": truth.len(),
            "n_missing_prediction": missing,
            "n_unresolved_gold": unresolved,
            "n_failed_prediction": failed,
            "n_unsure_excluded": excluded,
            "unsure_policy": policy,
            "metrics": metrics,
        }),
    )?;
    run.write_bytes("confusion.csv", &csv_buf)?;
    run.commit(true)?;
    Ok(())
}

fn find_image(dir: &Path, image_id: &str) -> PathBuf {
    for ext in ["jpg", "jpeg", "png", "webp", "gif"] {
        let p = dir.join(format!("{image_id}.{ext}"));
        if p.is_file() {
            return p;
        }
    }
    dir.join(format!("{image_id}.jpg"))
}

/// Image ids whose presence label (gold or presence.jsonl) is "present".
fn present_images(path: &Path) -> CliResult<BTreeSet<String>> {
    let rows: Vec<Value> = read_jsonl(path).input_err("reading presence filter")?;
    Ok(rows
        .into_iter()
        .filter(|r| r["present"].as_bool() == Some(true) || r["label"].as_str() == Some(PRESENT_LABEL))
        .filter_map(|r| r["image_id"].as_str().or(r["unit_id"].as_str()).map(str::to_string))
        .collect())
}

pub fn llm_annotate(g: &Globals, a: &LlmAnnotateArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let l = &g.file.llm;
    let corpus_path = required(&a.corpus, &i.corpus, "corpus")?;
    let images_dir = required(&a.images_dir, &i.images_dir, "images-dir")?;
    let task = Task::from(a.task);
    let endpoint_url = optional(&a.endpoint, &l.endpoint).unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
    let mut params = RequestParams::default();
    if let Some(m) = optional(&a.model, &l.model) {
        params.model_id = m;
    }
    if let Some(d) = &l.image_detail {
        params.image_detail = d.clone();
    }
    let opts = BatchOptions {
        concurrency: optional(&a.concurrency, &l.concurrency).unwrap_or(4).max(1),
        retry: RetryPolicy {
            max_retries: optional(&a.max_retries, &l.max_retries).unwrap_or(RetryPolicy::default().max_retries),
            ..RetryPolicy::default()
        },
    };
    let cache_dir = optional(&a.cache_dir, &l.cache_dir).unwrap_or_else(|| g.out_dir.join("llm_cache"));
    let template = match task {
        Task::PersonCount if a.no_crowd => PromptTemplate::count(),
        _ => PromptTemplate::for_task(task).input_err("choosing prompt")?,
    };
    let mut inputs = vec![corpus_path.as_path(), images_dir.as_path()];
    inputs.extend(a.only_present.as_deref());
    let cfg = json!({
        "task": task,
        "endpoint": endpoint_url,
        "params": params,
        "template_version": template.version,
        "concurrency": opts.concurrency,
        "max_retries": opts.retry.max_retries,
        "image_encoding": "base64 data URL",
    });
    let mut run = Run::start("llm-annotate", &g.out_dir, g.dataset_str(), cfg, &inputs)?;

    let corpus = load_corpus(g, CorpusPaths { corpus: corpus_path.clone(), ..Default::default() })?;
    let keep = a.only_present.as_deref().map(present_images).transpose()?;
    let mut jobs = Vec::new();
    for img in corpus.images() {
        if keep.as_ref().is_some_and(|k| !k.contains(&img.image_id)) {
            continue;
        }
        let item = corpus.item_of_image(&img.image_id).expect("validated corpus");
        let name = corpus
            .roster()
            .front_runner(&item.party)
            .ok_or_else(|| CliError::input(format!("no front-runner for party {}", item.party)))?;
        jobs.push(ImageJob {
            image_id: img.image_id.clone(),
            path: find_image(&images_dir, &img.image_id),
            name: name.to_string(),
            party: item.party.clone(),
        });
    }
    let transport = HttpTransport::new(Duration::from_secs(l.timeout_secs.unwrap_or(120)))
        .map_err(|e| CliError::transport(e.to_string()))?;
    let cache = ResponseCache::open(&cache_dir).input_err("opening cache directory")?;
    let endpoint = Endpoint::from_env(&endpoint_url);
    let out = annotate_batch(&jobs, &template, &params, &endpoint, &transport, Some(&cache), &opts)
        .input_err("annotating images")?;
    log::info!(
        "{} images, {} network calls, {} cache hits, {} retries",
        out.stats.images,
        out.stats.network_calls,
        out.stats.cache_hits,
        out.stats.retries
    );
    run.write_jsonl("predictions.jsonl", &out.records)?;
    run.write_json("llm_run.json", &json!({"task": task, "template_version": template.version, "stats": out.stats}))?;
    let complete = out.stats.transport_failures == 0;
    if !complete {
        run.note(format!("{} images failed in transport; rerun to retry them", out.stats.transport_failures));
    }
    run.commit(complete)?;
    if !complete {
        return Err(CliError::transport(format!(
            "{} of {} requests failed after retries",
            out.stats.transport_failures, out.stats.images
        )));
    }
    Ok(())
}

pub fn report(g: &Globals, a: &ReportArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let corpus_path = required(&a.corpus, &i.corpus, "corpus")?;
    let counts_path = required(&a.counts, &i.counts, "counts")?;
    let policy = a.unsure_policy.or(g.file.unsure_policy).unwrap_or_default();
    let (kind, presence_path) = match (&a.gold, &a.presence, &a.predictions) {
        (Some(p), _, _) => (PresenceSource::Human, p.clone()),
        (_, Some(p), _) => (PresenceSource::Embedding, p.clone()),
        (_, _, Some(p)) => (PresenceSource::Model, p.clone()),
        _ => match (&i.gold, &i.presence) {
            (Some(p), _) => (PresenceSource::Human, p.clone()),
            (_, Some(p)) => (PresenceSource::Embedding, p.clone()),
            _ => return Err(CliError::input("missing --gold, --presence or --predictions")),
        },
    };
    let inputs = [corpus_path.as_path(), presence_path.as_path(), counts_path.as_path()];
    let cfg = json!({"presence_source": kind, "unsure_policy": policy});
    let mut run = Run::start("report", &g.out_dir, g.dataset_str(), cfg, &inputs)?;
    let corpus = load_corpus(g, CorpusPaths { corpus: corpus_path.clone(), ..Default::default() })?;

    let mut presence: BTreeMap<String, Signals> = BTreeMap::new();
    let mut excluded: BTreeSet<String> = BTreeSet::new();
    let mut unresolved = 0usize;
    let signal = |present| Signals { present, presence_source: kind };
    match kind {
        PresenceSource::Human => {
            let gold: Vec<GoldRecord> = read_jsonl(&presence_path).input_err("reading presence gold")?;
            for r in gold.iter().filter(|r| r.task == Task::CandidatePresence) {
                match r.label.as_deref() {
                    Some(l) => {
                        presence.insert(r.unit_id.clone(), signal(l == PRESENT_LABEL));
                    }
                    None => unresolved += 1,
                }
            }
        }
        PresenceSource::Embedding => {
            let rows: Vec<PresenceResult> = read_jsonl(&presence_path).input_err("reading presence")?;
            for (id, r) in presence_per_image(&rows, Some(&corpus))? {
                presence.insert(id, signal(r.present));
            }
        }
        PresenceSource::Model => {
            let preds = read_predictions(&presence_path, &g.roster).input_err("reading presence predictions")?;
            let preds: Vec<&PredictionRecord> = preds.iter().filter(|p| p.task == Task::CandidatePresence).collect();
            let models: BTreeSet<&str> = preds.iter().map(|p| p.model_id.as_str()).collect();
            if models.len() > 1 {
                return Err(CliError::input(format!("several presence models in predictions: {models:?}")));
            }
            for p in preds {
                if p.status.is_failure() {
                    excluded.insert(p.unit_id.clone());
                    continue;
                }
                match map_model_label(Task::CandidatePresence, p, policy) {
                    Some(l) => {
                        presence.insert(p.unit_id.clone(), signal(l == PRESENT_LABEL));
                    }
                    None => {
                        excluded.insert(p.unit_id.clone());
                    }
                }
            }
        }
    }
    if unresolved > 0 {
        run.note(format!("{unresolved} images without a presence majority were treated as not present"));
    }

    let count_rows: Vec<CountRecord> = read_jsonl(&counts_path).input_err("reading counts")?;
    let mut counts = BTreeMap::new();
    for c in count_rows {
        if counts.insert(c.image_id.clone(), (c.bucket, c.source)).is_some() {
            return Err(CliError::input(format!("duplicate count for image {:?}", c.image_id)));
        }
    }
    let rows: Vec<VisibilityRow> = build_rows(&corpus, &presence, &counts, kind)
        .input_err("building visibility rows")?
        .into_iter()
        .filter(|r| !excluded.contains(&r.image_id))
        .collect();
    if !excluded.is_empty() {
        run.note(format!("{} images left out: failed or unsure presence predictions", excluded.len()));
    }
    let inconsistent = rows.iter().filter(|r| r.inconsistent).count();
    let mut csv_buf = Vec::new();
    visibility::write_csv(&rows, &mut csv_buf).compute_err("writing visibility.csv")?;
    let groupings: [&[GroupField]; 4] = [
        &[GroupField::ItemType],
        &[GroupField::AccountType, GroupField::ItemType],
        &[GroupField::Party, GroupField::ItemType],
        &[GroupField::Party, GroupField::AccountType, GroupField::ItemType],
    ];
    let tables = groupings
        .iter()
        .map(|by| crosstab(&rows, by))
        .collect::<Result<Vec<_>, _>>()
        .compute_err("cross-tabulating")?;
    run.write_bytes("visibility.csv", &csv_buf)?;
    run.write_json(
        "crosstabs.json",
        &json!({"n_images": rows.len(), "n_inconsistent": inconsistent, "crosstabs": tables}),
    )?;
    run.commit(true)?;
    Ok(())
}

pub fn analyze(g: &Globals, a: &AnalyzeArgs) -> CliResult<()> {
    let i = &g.file.inputs;
    let path = required(&a.visibility, &i.visibility, "visibility")?;
    let b = &g.file.battery;
    let defaults = BatterySpec::default();
    let spec = BatterySpec {
        min_group_size: optional(&a.min_group_size, &b.min_group_size).unwrap_or(defaults.min_group_size),
        yates: a.yates || b.yates.unwrap_or(defaults.yates),
        bonferroni: a.bonferroni.map(Into::into).or(b.bonferroni).unwrap_or(defaults.bonferroni),
    };
    let mut run = Run::start("analyze", &g.out_dir, g.dataset_str(), config_value(&spec), &[path.as_path()])?;
    let file = std::fs::File::open(&path).input_err("opening visibility.csv")?;
    let rows = visibility::read_csv(file).input_err("reading visibility.csv")?;
    if rows.is_empty() {
        return Err(CliError::input("visibility.csv has no rows"));
    }
    let tests = run_battery(&rows, &spec);
    let executed: Vec<_> = tests.iter().filter_map(|t| t.result.clone()).collect();
    let skipped = tests.len() - executed.len();
    run.write_json(
        "battery.json",
        &json!({"spec": spec, "n_images": rows.len(), "n_executed": executed.len(), "n_skipped": skipped, "tests": tests}),
    )?;
    run.write_jsonl("stats.jsonl", &executed)?;
    run.commit(true)?;
    Ok(())
}
