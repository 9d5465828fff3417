//! Model annotation over an OpenAI-compatible chat-completions endpoint.
//!
//! Prompts are rendered from fixed templates, each image is sent once with
//! its bytes inlined as a data URL, and replies are cached on disk so that a
//! repeated run is served without network traffic.

pub mod batch;
pub mod cache;
pub mod client;
pub mod mock;
pub mod parse;
pub mod prompt;

pub use batch::{annotate_batch, record_from_reply, BatchError, BatchOptions, BatchOutcome, BatchStats, ImageJob};
pub use cache::{CacheKey, ResponseCache};
pub use client::{ChatClient, Endpoint, HttpTransport, RequestParams, RetryPolicy, Transport};
pub use parse::{parse_count, parse_presence, CountAnswer, ParseError, Presence, PresenceAnswer};
pub use prompt::{render_prompt, PromptError, PromptTemplate};
