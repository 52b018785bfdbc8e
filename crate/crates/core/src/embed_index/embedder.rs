use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::normalize_answer;
use crate::error::{Error, Result};

/// Text key used for question+answer retrieval (SQA, SQPA, I-SQA).
pub fn qa_key_text(question: &str, answer: &str) -> String {
    format!("{question} {answer}")
}

/// Source of embedding vectors for texts and image references.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn embed_images(&self, image_refs: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Deterministic bag-of-words feature hashing.
///
/// Each normalized token maps to a pseudo-random direction seeded from
/// `sha256(salt, token)`; a text embeds as the normalized sum of its token
/// directions, so texts sharing words land close together. Used for
/// synthetic datasets and the stub embedding service.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    salt: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::with_salt(dim, "text")
    }

    pub fn with_salt(dim: usize, salt: impl Into<String>) -> Self {
        assert!(dim > 0);
        Self {
            dim,
            salt: salt.into(),
        }
    }

    fn token_direction(&self, token: &str, acc: &mut [f64]) {
        let mut h = Sha256::new();
        h.update(self.salt.as_bytes());
        h.update([0u8]);
        h.update(token.as_bytes());
        let digest = h.finalize();
        let seed: [u8; 32] = digest.into();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        for a in acc.iter_mut() {
            *a += rng.random_range(-1.0f64..1.0);
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        let norm_text = normalize_answer(text);
        let mut any = false;
        for tok in norm_text.split_whitespace() {
            self.token_direction(tok, &mut acc);
            any = true;
        }
        if !any {
            self.token_direction("\u{0}empty", &mut acc);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn embed_images(&self, image_refs: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(image_refs
            .iter()
            .map(|r| self.embed_one(&format!("image {r}")))
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize, Default)]
pub struct EmbedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_refs: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

/// Client for a remote `POST /embed` service.
#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl EmbeddingClient {
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            dim,
            agent,
        }
    }

    fn call(&self, req: &EmbedRequest, expected: usize) -> Result<Vec<Vec<f32>>> {
        let url = format!("{}/embed", self.endpoint);
        let resp: EmbedResponse = self
            .agent
            .post(&url)
            .send_json(req)
            .map_err(|e| Error::EmbeddingService(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::EmbeddingService(format!("malformed response: {e}")))?;
        if resp.vectors.len() != expected {
            return Err(Error::EmbeddingService(format!(
                "expected {expected} vectors, got {}",
                resp.vectors.len()
            )));
        }
        for v in &resp.vectors {
            if v.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        Ok(resp.vectors)
    }
}

impl TextEmbedder for EmbeddingClient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let req = EmbedRequest {
            texts: Some(texts.to_vec()),
            image_refs: None,
        };
        self.call(&req, texts.len())
    }

    fn embed_images(&self, image_refs: &[String]) -> Result<Vec<Vec<f32>>> {
        let req = EmbedRequest {
            texts: None,
            image_refs: Some(image_refs.to_vec()),
        };
        self.call(&req, image_refs.len())
    }
}
