//! Contracts for the external models, with HTTP and fixture-backed implementations.
//!
//! Wire contracts (JSON over HTTP POST):
//!
//! * text model: `{"prompt": s}` -> `{"text": s}`
//! * detector: `{"image_b64": s, "prompts": [s]}` ->
//!   `{"detections": [{"prompt_index": n, "box": [x1, y1, x2, y2], "score": f}]}`
//! * vision model: `{"prompt": s, "image_b64": s}` -> `{"text": s}`
//!
//! Fixture text/vision models answer from `<dir>/<sha256(prompt)>.txt`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use async_trait::async_trait;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detection::DetectionPromptSet;
use crate::model::{Detection, ModelError};

pub const DEFAULT_ADAPTER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter timed out or was unreachable: {0}")]
    Timeout(String),
    #[error("adapter protocol error: {0}")]
    Protocol(String),
    #[error("no fixture for prompt hash {0}")]
    MissingFixture(String),
    #[error("fixture I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[async_trait]
pub trait TextModel: Send + Sync {
    async fn complete(&self, prompt: &str) -> Result<String, AdapterError>;
}

#[async_trait]
pub trait VisionModel: Send + Sync {
    async fn describe(&self, prompt: &str, image_b64: &str) -> Result<String, AdapterError>;
}

/// One detector hit, before boundary validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptHit {
    pub prompt_index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[async_trait]
pub trait Detector: Send + Sync {
    async fn detect(
        &self,
        image_b64: &str,
        prompts: &DetectionPromptSet,
    ) -> Result<Vec<PromptHit>, AdapterError>;
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Serialize)]
struct TextRequest<'a> {
    prompt: &'a str,
    temperature: f64,
}

#[derive(Serialize)]
struct VisionRequest<'a> {
    prompt: &'a str,
    image_b64: &'a str,
    temperature: f64,
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_b64: &'a str,
    prompts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<PromptHit>,
}

/// Shared JSON-over-HTTP transport for the three adapter kinds.
#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    client: reqwest::Client,
    url: String,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, AdapterError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AdapterError::Protocol(e.to_string()))?;
        Ok(Self {
            client,
            url: url.into(),
        })
    }

    async fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, AdapterError> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .await
            .map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(AdapterError::Protocol(format!("{} returned {status}", self.url)));
        }
        resp.json().await.map_err(|e| {
            if e.is_timeout() {
                AdapterError::Timeout(e.to_string())
            } else {
                AdapterError::Protocol(e.to_string())
            }
        })
    }
}

fn classify(e: reqwest::Error) -> AdapterError {
    if e.is_timeout() || e.is_connect() {
        AdapterError::Timeout(e.to_string())
    } else {
        AdapterError::Protocol(e.to_string())
    }
}

pub struct HttpTextModel(pub HttpEndpoint);

#[async_trait]
impl TextModel for HttpTextModel {
    async fn complete(&self, prompt: &str) -> Result<String, AdapterError> {
        let body = TextRequest {
            prompt,
            temperature: 0.0,
        };
        let resp: TextResponse = self.0.post(&body).await?;
        Ok(resp.text)
    }
}

pub struct HttpVisionModel(pub HttpEndpoint);

#[async_trait]
impl VisionModel for HttpVisionModel {
    async fn describe(&self, prompt: &str, image_b64: &str) -> Result<String, AdapterError> {
        let body = VisionRequest {
            prompt,
            image_b64,
            temperature: 0.0,
        };
        let resp: TextResponse = self.0.post(&body).await?;
        Ok(resp.text)
    }
}

pub struct HttpDetector(pub HttpEndpoint);

#[async_trait]
impl Detector for HttpDetector {
    async fn detect(
        &self,
        image_b64: &str,
        prompts: &DetectionPromptSet,
    ) -> Result<Vec<PromptHit>, AdapterError> {
        let body = DetectRequest {
            image_b64,
            prompts: prompts.prompts.iter().map(|(_, p)| p.as_str()).collect(),
        };
        let resp: DetectResponse = self.0.post(&body).await?;
        Ok(resp.detections)
    }
}

/// Canned responses keyed by prompt hash. Also serves as the vision fixture
/// (the image is ignored).
#[derive(Debug, Clone)]
pub struct FixtureTextModel {
    dir: PathBuf,
}

impl FixtureTextModel {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", prompt_hash(prompt)))
    }

    /// Stores `response` as the canned answer for `prompt`.
    pub fn record(&self, prompt: &str, response: &str) -> Result<(), AdapterError> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.path_for(prompt), response)?;
        Ok(())
    }

    fn lookup(&self, prompt: &str) -> Result<String, AdapterError> {
        let path = self.path_for(prompt);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(AdapterError::MissingFixture(prompt_hash(prompt)))
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[async_trait]
impl TextModel for FixtureTextModel {
    async fn complete(&self, prompt: &str) -> Result<String, AdapterError> {
        self.lookup(prompt)
    }
}

#[async_trait]
impl VisionModel for FixtureTextModel {
    async fn describe(&self, prompt: &str, _image_b64: &str) -> Result<String, AdapterError> {
        self.lookup(prompt)
    }
}

/// Offline detector: replays a canonical Detection JSON array, answering each
/// prompt with the recorded detections of that prompt's type.
#[derive(Debug, Clone)]
pub struct FixtureDetector {
    detections: Vec<Detection>,
}

impl FixtureDetector {
    pub fn new(detections: Vec<Detection>) -> Self {
        Self { detections }
    }

    pub fn from_file(path: &Path) -> Result<Self, crate::detection::DetectionError> {
        Ok(Self::new(crate::detection::load_fixture_detections(path)?))
    }
}

#[async_trait]
impl Detector for FixtureDetector {
    async fn detect(
        &self,
        _image_b64: &str,
        prompts: &DetectionPromptSet,
    ) -> Result<Vec<PromptHit>, AdapterError> {
        let mut hits = Vec::new();
        for (index, (kind, _)) in prompts.prompts.iter().enumerate() {
            for d in self.detections.iter().filter(|d| &d.label == kind) {
                hits.push(PromptHit {
                    prompt_index: index,
                    bbox: d.bbox.as_array(),
                    score: d.score,
                });
            }
        }
        Ok(hits)
    }
}

impl From<ModelError> for AdapterError {
    fn from(e: ModelError) -> Self {
        AdapterError::Protocol(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn fixture_model_answers_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let model = FixtureTextModel::new(dir.path());
        model.record("hello", "{\"fan\": 1}").unwrap();
        assert_eq!(model.complete("hello").await.unwrap(), "{\"fan\": 1}");
        assert!(matches!(
            model.complete("other").await,
            Err(AdapterError::MissingFixture(_))
        ));
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            prompt_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[tokio::test]
    async fn unreachable_endpoint_is_timeout() {
        let ep = HttpEndpoint::new("http://127.0.0.1:9/complete", Duration::from_millis(300)).unwrap();
        let err = HttpTextModel(ep).complete("x").await.unwrap_err();
        assert!(matches!(err, AdapterError::Timeout(_)), "{err:?}");
    }
}
