//! Blocking JSON-over-HTTP helper shared by the remote extractor and
//! embedder clients.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Serialize;

#[derive(Debug, Clone)]
pub(crate) enum PostError {
    /// Connection failures, timeouts and retryable statuses that persisted
    /// through every attempt.
    Transport(String),
    /// A non-retryable HTTP status.
    Status(StatusCode, String),
    /// Body could not be decoded as JSON.
    Decode(String),
}

impl std::fmt::Display for PostError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PostError::Transport(m) => write!(f, "transport failure: {m}"),
            PostError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            PostError::Decode(m) => write!(f, "undecodable response: {m}"),
        }
    }
}

pub(crate) fn build_client(timeout: Duration) -> Result<Client, String> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| e.to_string())
}

fn retryable(status: StatusCode) -> bool {
    status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS
}

/// POST `body` as JSON and decode the JSON response. Transport errors, 5xx
/// and 429 are retried up to `max_retries` extra times.
pub(crate) fn post_json<B: Serialize>(
    client: &Client,
    endpoint: &str,
    api_key: Option<&str>,
    body: &B,
    max_retries: u32,
) -> Result<serde_json::Value, PostError> {
    let mut last = String::new();
    for attempt in 0..=max_retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
        }
        let mut req = client.post(endpoint).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(resp) => resp,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let status = resp.status();
        if retryable(status) {
            last = format!("HTTP {status}");
            continue;
        }
        let text = match resp.text() {
            Ok(text) => text,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        if !status.is_success() {
            return Err(PostError::Status(status, text));
        }
        return serde_json::from_str(&text).map_err(|e| PostError::Decode(e.to_string()));
    }
    Err(PostError::Transport(format!(
        "{last} (after {} attempts)",
        max_retries + 1
    )))
}
