//! Batch annotation: one request per image, cached, with bounded concurrency.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use visfocus_core::{Extra, PredictionRecord, PredictionStatus, Task};

use crate::cache::{sha256_hex, CacheKey, ResponseCache};
use crate::client::{ChatClient, Endpoint, RequestParams, RetryPolicy, Transport};
use crate::parse::{parse_count, parse_presence, ParseError};
use crate::prompt::{render_prompt, PromptError, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageJob {
    pub image_id: String,
    pub path: PathBuf,
    /// Front-runner name substituted into the prompt.
    pub name: String,
    pub party: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchOptions {
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { concurrency: 4, retry: RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub images: u64,
    pub network_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub parse_failures: u64,
    pub transport_failures: u64,
    pub refusals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One record per job, in job order.
    pub records: Vec<PredictionRecord>,
    pub stats: BatchStats,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("job {image_id}: {source}")]
    Prompt { image_id: String, source: PromptError },
    #[error("template task {0} has no response parser")]
    UnsupportedTask(Task),
}

fn base_record(image_id: &str, task: Task, model_id: &str) -> PredictionRecord {
    PredictionRecord {
        unit_id: image_id.to_string(),
        model_id: model_id.to_string(),
        task,
        label: String::new(),
        comment: None,
        raw_response: None,
        status: PredictionStatus::Ok,
        extra: Extra::new(),
    }
}

/// Turns a model reply into a prediction record. Unparseable replies keep an
/// empty label and a failure status.
pub fn record_from_reply(image_id: &str, task: Task, model_id: &str, content: &str) -> PredictionRecord {
    let mut rec = base_record(image_id, task, model_id);
    rec.raw_response = Some(content.to_string());
    let parse_failure = |rec: &mut PredictionRecord, e: ParseError| {
        rec.status = PredictionStatus::ParseFailure;
        rec.extra.insert("error".into(), Value::String(e.to_string()));
    };
    match task {
        Task::CandidatePresence => match parse_presence(content) {
            Ok(a) => {
                rec.label = a.value.as_str().to_string();
                rec.comment = a.comment;
                if a.refusal {
                    rec.status = PredictionStatus::Refusal;
                }
            }
            Err(e) => parse_failure(&mut rec, e),
        },
        Task::PersonCount => match parse_count(content) {
            Ok(a) => {
                rec.label = a.bucket.as_str().to_string();
                if let Some(c) = a.crowd {
                    rec.extra.insert("crowd".into(), Value::Bool(c));
                }
            }
            Err(e) => {
                if e == ParseError::Refusal {
                    rec.extra.insert("refusal".into(), Value::Bool(true));
                }
                parse_failure(&mut rec, e)
            }
        },
        Task::FaceIdentity => parse_failure(&mut rec, ParseError::NoJson),
    }
    rec
}

fn transport_failure(image_id: &str, task: Task, model_id: &str, error: String) -> PredictionRecord {
    let mut rec = base_record(image_id, task, model_id);
    rec.status = PredictionStatus::TransportFailure;
    rec.extra.insert("error".into(), Value::String(error));
    rec
}

struct Counters {
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
}

/// Annotates every job. Failures become records with a failure status, so the
/// output always has exactly one record per job.
pub fn annotate_batch(
    jobs: &[ImageJob],
    template: &PromptTemplate,
    params: &RequestParams,
    endpoint: &Endpoint,
    transport: &dyn Transport,
    cache: Option<&ResponseCache>,
    opts: &BatchOptions,
) -> Result<BatchOutcome, BatchError> {
    if template.task == Task::FaceIdentity {
        return Err(BatchError::UnsupportedTask(template.task));
    }
    let prompts = jobs
        .iter()
        .map(|j| {
            render_prompt(template, &j.name, Some(&j.party))
                .map_err(|source| BatchError::Prompt { image_id: j.image_id.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let client = ChatClient { transport, endpoint: endpoint.clone(), params: params.clone(), retry: opts.retry };
    let counters = Counters { network_calls: AtomicU64::new(0), cache_hits: AtomicU64::new(0), retries: AtomicU64::new(0) };
    let slots: Vec<Mutex<Option<PredictionRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.concurrency.clamp(1, jobs.len().max(1));

    let run_one = |i: usize| -> PredictionRecord {
        let job = &jobs[i];
        let task = template.task;
        let image = match std::fs::read(&job.path) {
            Ok(b) => b,
            Err(e) => {
                return transport_failure(&job.image_id, task, &params.model_id, format!("cannot read {}: {e}", job.path.display()))
            }
        };
        let key = CacheKey {
            image_sha256: sha256_hex(&image),
            image_id: job.image_id.clone(),
            task,
            template_version: template.version.clone(),
            model_id: params.model_id.clone(),
            prompt_sha256: sha256_hex(prompts[i].as_bytes()),
        };
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return record_from_reply(&job.image_id, task, &params.model_id, &hit.content);
        }
        let call = client.complete(&prompts[i], &image);
        counters.network_calls.fetch_add(call.network_calls as u64, Ordering::Relaxed);
        counters.retries.fetch_add(call.retries as u64, Ordering::Relaxed);
        if call.retries > 0 {
            log::info!("{}: {} retries", job.image_id, call.retries);
        }
        match call.result {
            Ok(c) => {
                if let Some(cache) = cache {
                    if let Err(e) = cache.put(&key, &c.content) {
                        log::warn!("{}: cache write failed: {e}", job.image_id);
                    }
                }
                record_from_reply(&job.image_id, task, &params.model_id, &c.content)
            }
            Err(e) => transport_failure(&job.image_id, task, &params.model_id, e.to_string()),
        }
    };

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let rec = run_one(i);
                *slots[i].lock().unwrap() = Some(rec);
            });
        }
    });

    let records: Vec<PredictionRecord> = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job produces a record"))
        .collect();
    let count = |st: PredictionStatus| records.iter().filter(|r| r.status == st).count() as u64;
    let stats = BatchStats {
        images: jobs.len() as u64,
        network_calls: counters.network_calls.into_inner(),
        cache_hits: counters.cache_hits.into_inner(),
        retries: counters.retries.into_inner(),
        parse_failures: count(PredictionStatus::ParseFailure),
        transport_failures: count(PredictionStatus::TransportFailure),
        refusals: count(PredictionStatus::Refusal),
    };
    Ok(BatchOutcome { records, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presence_records() {
        let r = record_from_reply("i1", Task::CandidatePresence, "m", r#"{"comment":"yes","pictures_candidate":"True"}"#);
        assert_eq!((r.label.as_str(), r.status, r.comment.as_deref()), ("True", PredictionStatus::Ok, Some("yes")));
        let r = record_from_reply("i1", Task::CandidatePresence, "m", "I cannot identify individuals in images.");
        assert_eq!((r.label.as_str(), r.status), ("Unsure", PredictionStatus::Refusal));
        let r = record_from_reply("i1", Task::CandidatePresence, "m", "lorem ipsum");
        assert_eq!((r.label.as_str(), r.status), ("", PredictionStatus::ParseFailure));
        assert_eq!(r.raw_response.as_deref(), Some("lorem ipsum"));
    }

    #[test]
    fn count_records() {
        let r = record_from_reply("i1", Task::PersonCount, "m", r#"{"GPT Count":"2","GPT Crowd":"False"}"#);
        assert_eq!(r.label, "2");
        assert_eq!(r.extra["crowd"], Value::Bool(false));
        let r = record_from_reply("i1", Task::PersonCount, "m", "I'm sorry, I can't help with that.");
        assert_eq!(r.status, PredictionStatus::ParseFailure);
        assert_eq!(r.extra["refusal"], Value::Bool(true));
    }
}
