use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use serde_json::json;
use visfocus_core::Task;
use visfocus_llm::client::{HttpResponse, TransportError};
use visfocus_llm::{annotate_batch, BatchOptions, Endpoint, ImageJob, PromptTemplate, RequestParams, RetryPolicy, Transport};

/// Replays a scripted sequence of outcomes, cycling when it runs out.
struct Scripted {
    script: Vec<Result<(u16, String), TransportError>>,
    next: AtomicUsize,
}

impl Transport for Scripted {
    fn post_json(&self, _: &str, _: Option<&str>, _: &str) -> Result<HttpResponse, TransportError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst) % self.script.len();
        self.script[i].clone().map(|(status, body)| HttpResponse { status, body })
    }
}

fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn outcome() -> impl Strategy<Value = Result<(u16, String), TransportError>> {
    prop_oneof![
        Just(Ok((200, chat(r#"{"comment":"x","pictures_candidate":"True"}"#)))),
        Just(Ok((200, chat("```json\n{\"GPT Count\": \"2\", \"GPT Crowd\": \"False\"}\n```")))),
        Just(Ok((200, chat("I'm sorry, I can't help with that.")))),
        Just(Ok((200, chat("no json here")))),
        Just(Ok((200, "not even json".to_string()))),
        Just(Ok((500, "boom".to_string()))),
        Just(Ok((400, "bad request".to_string()))),
        Just(Err(TransportError::Connection("refused".into()))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_record_per_job_in_job_order(
        script in prop::collection::vec(outcome(), 1..10),
        n in 0usize..12,
        missing in prop::collection::vec(any::<bool>(), 12),
        count_task in any::<bool>(),
        concurrency in 1usize..5,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let jobs: Vec<ImageJob> = (0..n)
            .map(|i| {
                let path = dir.path().join(format!("{i}.png"));
                if !missing[i] {
                    std::fs::write(&path, [0x89, b'P', b'N', b'G', i as u8]).unwrap();
                }
                ImageJob { image_id: format!("img{i:02}"), path, name: "Olaf Scholz".into(), party: "SPD".into() }
            })
            .collect();
        let template = if count_task { PromptTemplate::count_with_crowd() } else { PromptTemplate::presence() };
        let transport = Scripted { script, next: AtomicUsize::new(0) };
        let opts = BatchOptions { concurrency, retry: RetryPolicy { max_retries: 1, base_delay_ms: 0, max_delay_ms: 0 } };
        let endpoint = Endpoint { url: "http://unused".into(), api_key: None };
        let out = annotate_batch(&jobs, &template, &RequestParams::default(), &endpoint, &transport, None, &opts).unwrap();
        prop_assert_eq!(out.records.len(), n);
        prop_assert_eq!(out.stats.images as usize, n);
        let task = if count_task { Task::PersonCount } else { Task::CandidatePresence };
        for (job, rec) in jobs.iter().zip(&out.records) {
            prop_assert_eq!(&rec.unit_id, &job.image_id);
            prop_assert_eq!(rec.task, task);
            prop_assert_eq!(rec.label.is_empty(), rec.status.is_failure());
        }
    }
}
