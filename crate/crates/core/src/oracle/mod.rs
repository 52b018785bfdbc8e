//! Generation-model interface.
//!
//! The harness never runs a vision-language model itself. An [`Oracle`]
//! receives the serialized prompt (plus the structured sequence, which the
//! mocks use) and returns raw answer text.

mod remote;
pub mod stub;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed_index::SimilarityIndex;
use crate::error::{Error, OracleFailure, Result};
use crate::manipulate::InContextSequence;
use crate::prompt::PromptText;

pub use remote::{GenerateBody, GenerateReply, Limiter, RemoteOracle, RetryPolicy};

/// Environment variable that overrides the remote endpoint.
pub const ENDPOINT_ENV: &str = "VQA_ICL_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub text: String,
    pub latency_ms: f64,
    pub model_id: String,
}

pub struct GenerationRequest<'a> {
    pub query_id: u64,
    pub prompt: &'a PromptText,
    pub sequence: &'a InContextSequence,
}

pub trait Oracle: Send + Sync {
    fn model_id(&self) -> &str;

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<ModelAnswer>;

    /// HTTP attempts made so far; zero for in-process mocks.
    fn network_calls(&self) -> u64 {
        0
    }
}

/// Cuts generated text at the first stop token and the first newline.
pub fn postprocess_answer(raw: &str, stops: &[String]) -> String {
    let mut end = raw.len();
    for s in stops.iter().filter(|s| !s.is_empty()) {
        if let Some(i) = raw.find(s.as_str()) {
            end = end.min(i);
        }
    }
    let cut = &raw[..end];
    let cut = cut.split('\n').next().unwrap_or("");
    cut.trim().to_string()
}

fn timed(model_id: &str, start: Instant, text: String) -> ModelAnswer {
    ModelAnswer {
        text,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        model_id: model_id.to_string(),
    }
}

/// Always answers the same string.
#[derive(Debug, Clone)]
pub struct MockFixed {
    text: String,
}

impl MockFixed {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

impl Oracle for MockFixed {
    fn model_id(&self) -> &str {
        "mock_fixed"
    }

    fn generate(&self, _req: &GenerationRequest<'_>) -> Result<ModelAnswer> {
        Ok(timed(self.model_id(), Instant::now(), self.text.clone()))
    }
}

/// Answers from a `query_id -> answer` table.
#[derive(Debug, Clone, Default)]
pub struct MockLookup {
    table: HashMap<u64, String>,
}

impl MockLookup {
    pub fn new(table: HashMap<u64, String>) -> Self {
        Self { table }
    }
}

impl Oracle for MockLookup {
    fn model_id(&self) -> &str {
        "mock_lookup"
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<ModelAnswer> {
        let start = Instant::now();
        let text = self.table.get(&req.query_id).cloned().ok_or_else(|| Error::Oracle {
            query_id: req.query_id,
            kind: OracleFailure::Model("query not in lookup table".into()),
        })?;
        Ok(timed(self.model_id(), start, text))
    }
}

/// Copies the answer of the demonstration whose question embedding is
/// closest to the query question's. Ties go to the demo nearest the query.
#[derive(Debug, Clone)]
pub struct MockCopy {
    demo_questions: Arc<SimilarityIndex>,
    query_questions: Arc<SimilarityIndex>,
}

impl MockCopy {
    pub fn new(demo_questions: Arc<SimilarityIndex>, query_questions: Arc<SimilarityIndex>) -> Self {
        Self {
            demo_questions,
            query_questions,
        }
    }
}

/// The short-cut answer for `seq`: see [`MockCopy`].
pub fn mock_copy_model(
    seq: &InContextSequence,
    demo_questions: &SimilarityIndex,
    query_questions: &SimilarityIndex,
) -> Result<String> {
    let fail = |msg: String| Error::Oracle {
        query_id: seq.query.sample_id,
        kind: OracleFailure::Model(msg),
    };
    if seq.demos.is_empty() {
        return Err(fail("copy model needs at least one demonstration".into()));
    }
    let q = query_questions.require_row(seq.query.sample_id)?;
    let mut best: Option<(f64, &str)> = None;
    for d in &seq.demos {
        let row = demo_questions.require_row(d.question_source)?;
        let score: f64 = row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
        // `>=` lets later positions (closer to the query) win ties.
        if best.is_none_or(|(s, _)| score >= s) {
            best = Some((score, d.answer.as_str()));
        }
    }
    Ok(best.expect("non-empty").1.to_string())
}

impl Oracle for MockCopy {
    fn model_id(&self) -> &str {
        "mock_copy"
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<ModelAnswer> {
        let start = Instant::now();
        let text = mock_copy_model(req.sequence, &self.demo_questions, &self.query_questions)?;
        Ok(timed(self.model_id(), start, text))
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_in_flight() -> usize {
    4
}
fn default_max_new_tokens() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteParams {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

impl Default for RemoteParams {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

impl RemoteParams {
    /// Endpoint after applying the environment override.
    pub fn resolved_endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.endpoint.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    RemoteHttp(RemoteParams),
    MockCopy,
    MockLookup,
    MockFixed { text: String },
}

impl OracleSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, OracleSpec::RemoteHttp(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OracleSpec::RemoteHttp(p) => {
                if p.resolved_endpoint().is_none() {
                    return Err(Error::Config(format!(
                        "remote_http oracle requires `endpoint` or ${ENDPOINT_ENV}"
                    )));
                }
                if p.max_attempts == 0 || p.max_in_flight == 0 {
                    return Err(Error::Config(
                        "max_attempts and max_in_flight must be positive".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
