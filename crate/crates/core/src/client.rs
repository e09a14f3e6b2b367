//! Text-completion clients for the annotation model and the caption judge:
//! a generic HTTP endpoint, a fixture-file replay, and a throttling wrapper.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompletionRequest {
    /// Stable request identity (e.g. `video_id/dialogue`), used by replay.
    pub key: String,
    /// 0-based retry counter.
    pub attempt: usize,
    pub prompt: String,
    pub image_refs: Vec<String>,
}

impl CompletionRequest {
    pub fn new(key: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            attempt: 0,
            prompt: prompt.into(),
            image_refs: Vec::new(),
        }
    }
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// Replays recorded replies: `{"<key>": ["reply for attempt 0", ...]}`.
/// Attempts past the end reuse the last reply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureClient {
    replies: BTreeMap<String, Vec<String>>,
}

impl FixtureClient {
    pub fn new(replies: BTreeMap<String, Vec<String>>) -> Self {
        Self { replies }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn insert(&mut self, key: impl Into<String>, replies: Vec<String>) {
        self.replies.insert(key.into(), replies);
    }
}

impl CompletionClient for FixtureClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let replies = self
            .replies
            .get(&request.key)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::Client(format!("no fixture reply for `{}`", request.key)))?;
        Ok(replies[request.attempt.min(replies.len() - 1)].clone())
    }
}

/// POSTs `{"model", "prompt", "images"}` and reads `{"text"}` from the reply.
/// The API key is read from the named environment variable at construction.
pub struct HttpClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    model: &'a str,
    prompt: &'a str,
    images: &'a [String],
}

#[derive(Deserialize)]
struct HttpReplyBody {
    text: String,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: &str) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(api_key_env).ok(),
        }
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let body = HttpRequestBody {
            model: &self.model,
            prompt: &request.prompt,
            images: &request.image_refs,
        };
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Client(e.to_string()))?;
        let reply: HttpReplyBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(reply.text)
    }
}

/// Caps concurrent requests, spaces them by `min_interval`, and retries
/// client errors with exponential backoff.
pub struct Throttled<C> {
    inner: C,
    max_concurrent: usize,
    min_interval: Duration,
    max_retries: usize,
    base_backoff: Duration,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
    last_start: Mutex<Option<Instant>>,
}

impl<C: CompletionClient> Throttled<C> {
    pub fn new(inner: C, max_concurrent: usize, min_interval: Duration) -> Self {
        Self {
            inner,
            max_concurrent: max_concurrent.max(1),
            min_interval,
            max_retries: 3,
            base_backoff: Duration::from_millis(200),
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
            last_start: Mutex::new(None),
        }
    }

    pub fn with_backoff(mut self, max_retries: usize, base: Duration) -> Self {
        self.max_retries = max_retries;
        self.base_backoff = base;
        self
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().expect("lock");
        while *n >= self.max_concurrent {
            n = self.slot_free.wait(n).expect("lock");
        }
        *n += 1;
        drop(n);
        let mut last = self.last_start.lock().expect("lock");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.min_interval {
                thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn release(&self) {
        *self.in_flight.lock().expect("lock") -= 1;
        self.slot_free.notify_one();
    }
}

impl<C: CompletionClient> CompletionClient for Throttled<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        let mut delay = self.base_backoff;
        let mut tries = 0;
        loop {
            self.acquire();
            let result = self.inner.complete(request);
            self.release();
            match result {
                Err(Error::Client(msg)) if tries < self.max_retries => {
                    warn!("request `{}` failed ({msg}); retrying in {delay:?}", request.key);
                    thread::sleep(delay);
                    delay *= 2;
                    tries += 1;
                }
                other => return other,
            }
        }
    }
}

impl<C: CompletionClient + ?Sized> CompletionClient for &C {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<C: CompletionClient + ?Sized> CompletionClient for Box<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<String> {
        (**self).complete(request)
    }
}
