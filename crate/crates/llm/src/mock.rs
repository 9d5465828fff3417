//! A minimal local chat-completions server for tests and dry runs.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::Engine;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct MockRequest {
    pub path: String,
    pub body: Value,
    /// 1-based arrival order.
    pub sequence: usize,
}

impl MockRequest {
    pub fn prompt(&self) -> Option<&str> {
        self.body.pointer("/messages/0/content/0/text").and_then(Value::as_str)
    }

    pub fn image(&self) -> Option<Vec<u8>> {
        let url = self.body.pointer("/messages/0/content/1/image_url/url")?.as_str()?;
        let (_, b64) = url.split_once(";base64,")?;
        base64::engine::general_purpose::STANDARD.decode(b64).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
}

impl MockResponse {
    /// A 200 chat completion whose assistant message is `content`.
    pub fn chat(content: &str) -> Self {
        MockResponse {
            status: 200,
            body: json!({
                "id": "mock",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
            })
            .to_string(),
        }
    }

    pub fn error(status: u16, message: &str) -> Self {
        MockResponse { status, body: json!({"error": {"message": message}}).to_string() }
    }
}

type Responder = dyn Fn(&MockRequest) -> MockResponse + Send + Sync;

pub struct MockServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start<F>(responder: F) -> io::Result<Self>
    where
        F: Fn(&MockRequest) -> MockResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let responder: Arc<Responder> = Arc::new(responder);
        let (h, st) = (hits.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if st.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (h, r) = (h.clone(), responder.clone());
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &h, r.as_ref()) {
                        log::debug!("mock server connection error: {e}");
                    }
                });
            }
        });
        Ok(MockServer { addr, hits, stop, handle: Some(handle) })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, hits: &AtomicUsize, responder: &Responder) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let sequence = hits.fetch_add(1, Ordering::SeqCst) + 1;
    let body = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let resp = responder(&MockRequest { path, body, sequence });
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
        resp.status,
        reason(resp.status),
        resp.body.len(),
        resp.body
    )?;
    out.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}
