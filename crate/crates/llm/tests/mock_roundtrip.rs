use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use visfocus_core::{PredictionStatus, Task};
use visfocus_llm::mock::{MockResponse, MockServer};
use visfocus_llm::{
    annotate_batch, BatchOptions, Endpoint, HttpTransport, ImageJob, PromptTemplate, RequestParams, ResponseCache,
    RetryPolicy,
};

fn jobs(dir: &Path, n: usize) -> Vec<ImageJob> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("img{i}.jpg"));
            std::fs::write(&path, format!("\u{ff}\u{d8}fake jpeg {i}")).unwrap();
            ImageJob { image_id: format!("img{i}"), path, name: "Olaf Scholz".into(), party: "SPD".into() }
        })
        .collect()
}

fn fast() -> BatchOptions {
    BatchOptions { concurrency: 4, retry: RetryPolicy { max_retries: 3, base_delay_ms: 1, max_delay_ms: 5 } }
}

fn transport() -> HttpTransport {
    HttpTransport::new(Duration::from_secs(10)).unwrap()
}

#[test]
fn fixed_json_round_trip_and_cache() {
    let server = MockServer::start(|req| {
        assert!(req.prompt().unwrap().contains("Olaf Scholz"));
        assert!(!req.image().unwrap().is_empty());
        MockResponse::chat(r#"{"comment":"He is at the podium.","pictures_candidate":"True"}"#)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(&dir.path().join("cache")).unwrap();
    let jobs = jobs(dir.path(), 3);
    let endpoint = Endpoint { url: server.url(), api_key: None };
    let t = transport();
    let run = || {
        annotate_batch(&jobs, &PromptTemplate::presence(), &RequestParams::default(), &endpoint, &t, Some(&cache), &fast())
            .unwrap()
    };
    let first = run();
    assert_eq!(first.records.len(), 3);
    assert!(first.records.iter().all(|r| r.label == "True" && r.status == PredictionStatus::Ok));
    assert_eq!(first.records.iter().map(|r| r.unit_id.as_str()).collect::<Vec<_>>(), ["img0", "img1", "img2"]);
    assert_eq!((first.stats.network_calls, first.stats.cache_hits), (3, 0));
    assert_eq!(server.hits(), 3);

    let second = run();
    assert_eq!(second.records, first.records);
    assert_eq!((second.stats.network_calls, second.stats.cache_hits), (0, 3));
    assert_eq!(server.hits(), 3);
}

#[test]
fn rate_limited_twice_then_ok() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = MockServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            MockResponse::error(429, "slow down")
        } else {
            MockResponse::chat(r#"{"GPT Count": "1", "GPT Crowd": "False"}"#)
        }
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let endpoint = Endpoint { url: server.url(), api_key: None };
    let out = annotate_batch(
        &jobs(dir.path(), 1),
        &PromptTemplate::count_with_crowd(),
        &RequestParams::default(),
        &endpoint,
        &transport(),
        None,
        &fast(),
    )
    .unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].task, Task::PersonCount);
    assert_eq!(out.records[0].label, "1");
    assert_eq!(out.stats.retries, 2);
    assert_eq!(out.stats.network_calls, 3);
}

#[test]
fn failures_become_records() {
    let server = MockServer::start(|req| {
        let img = String::from_utf8_lossy(&req.image().unwrap()).to_string();
        if img.ends_with(" 0") {
            MockResponse::error(400, "bad image")
        } else {
            MockResponse::chat("no structure here")
        }
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut jobs = jobs(dir.path(), 2);
    jobs.push(ImageJob {
        image_id: "missing".into(),
        path: dir.path().join("nope.jpg"),
        name: "Olaf Scholz".into(),
        party: "SPD".into(),
    });
    let endpoint = Endpoint { url: server.url(), api_key: None };
    let cache = ResponseCache::open(&dir.path().join("cache")).unwrap();
    let out = annotate_batch(&jobs, &PromptTemplate::presence(), &RequestParams::default(), &endpoint, &transport(), Some(&cache), &fast())
        .unwrap();
    assert_eq!(out.records.len(), 3);
    assert_eq!(out.records[0].status, PredictionStatus::TransportFailure);
    assert!(out.records[0].extra["error"].as_str().unwrap().starts_with("HTTP 400: "));
    assert_eq!(out.records[1].status, PredictionStatus::ParseFailure);
    assert_eq!(out.records[1].raw_response.as_deref(), Some("no structure here"));
    assert_eq!(out.records[2].status, PredictionStatus::TransportFailure);
    assert_eq!((out.stats.transport_failures, out.stats.parse_failures), (2, 1));
    // Only the served reply was cached.
    assert_eq!(std::fs::read_dir(cache.dir()).unwrap().count(), 1);
}

#[test]
fn unreachable_endpoint_is_reported_not_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = Endpoint { url: "http://127.0.0.1:9/v1/chat/completions".into(), api_key: None };
    let opts = BatchOptions { concurrency: 2, retry: RetryPolicy { max_retries: 1, base_delay_ms: 1, max_delay_ms: 1 } };
    let out = annotate_batch(&jobs(dir.path(), 2), &PromptTemplate::presence(), &RequestParams::default(), &endpoint, &transport(), None, &opts)
        .unwrap();
    assert_eq!(out.records.len(), 2);
    assert!(out.records.iter().all(|r| r.status == PredictionStatus::TransportFailure));
    assert_eq!(out.stats.retries, 2);
}
