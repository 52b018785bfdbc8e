//! HTTP client for a generation service.
//!
//! Wire format: `POST {endpoint}/generate` with a JSON [`GenerateBody`],
//! answered by `{"text": ...}`. Timeouts, transport errors, 429 and 5xx are
//! retried with exponential backoff; other statuses fail immediately.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, ModelAnswer, Oracle, RemoteParams};
use crate::error::{Error, OracleFailure, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateBody {
    pub prompt: String,
    pub image_refs: Vec<String>,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReply {
    pub text: String,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.backoff * 2u32.saturating_pow(attempt.min(16))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        self.peak.fetch_max(*used, Ordering::Relaxed);
        Permit(self)
    }

    /// Highest number of permits held at once.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

enum Attempt {
    Done(String),
    Retry(OracleFailure),
    Fail(OracleFailure),
}

pub struct RemoteOracle {
    url: String,
    agent: ureq::Agent,
    policy: RetryPolicy,
    max_new_tokens: usize,
    stop: Vec<String>,
    limiter: Limiter,
    calls: AtomicU64,
    model_id: String,
}

impl RemoteOracle {
    pub fn new(params: &RemoteParams, stop: Vec<String>) -> Result<Self> {
        let endpoint = params.resolved_endpoint().ok_or_else(|| {
            Error::Config(format!("remote oracle needs an endpoint or ${}", super::ENDPOINT_ENV))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(params.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = endpoint.trim_end_matches('/').to_string();
        Ok(Self {
            url: format!("{base}/generate"),
            model_id: format!("remote:{base}"),
            agent,
            policy: RetryPolicy {
                max_attempts: params.max_attempts.max(1),
                backoff: Duration::from_millis(params.backoff_ms),
            },
            max_new_tokens: params.max_new_tokens,
            stop,
            limiter: Limiter::new(params.max_in_flight),
            calls: AtomicU64::new(0),
        })
    }

    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    fn attempt(&self, body: &GenerateBody) -> Attempt {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut resp = match self.agent.post(&self.url).send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(OracleFailure::Timeout),
            Err(e) => return Attempt::Retry(OracleFailure::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Attempt::Retry(OracleFailure::Http(status));
        }
        if status != 200 {
            return Attempt::Fail(OracleFailure::Http(status));
        }
        match resp.body_mut().read_json::<GenerateReply>() {
            Ok(r) => Attempt::Done(r.text),
            Err(ureq::Error::Timeout(_)) => Attempt::Retry(OracleFailure::Timeout),
            Err(e) => Attempt::Fail(OracleFailure::Malformed(e.to_string())),
        }
    }
}

impl Oracle for RemoteOracle {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<ModelAnswer> {
        let body = GenerateBody {
            prompt: req.prompt.text.clone(),
            image_refs: req.prompt.image_refs.clone(),
            max_new_tokens: self.max_new_tokens,
            stop: self.stop.clone(),
        };
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let mut last = OracleFailure::Transport("no attempt made".into());
        for attempt in 0..self.policy.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.policy.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(ModelAnswer {
                        text,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        model_id: self.model_id.clone(),
                    })
                }
                Attempt::Retry(f) => {
                    log::debug!("query {}: attempt {} failed: {f}", req.query_id, attempt + 1);
                    last = f;
                }
                Attempt::Fail(f) => {
                    last = f;
                    break;
                }
            }
        }
        Err(Error::Oracle {
            query_id: req.query_id,
            kind: last,
        })
    }

    fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
