//! Client for an external chat-completion inference server.
//!
//! The rendered prompt goes out verbatim as the single user message of a
//! `chat/completions` request. Timeouts, transport failures and 5xx replies
//! are retried with exponential backoff; 4xx replies are not.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
const HEALTH_PROMPT: &str = "Reply with OK.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("RemoteLLMError after {attempts} attempt(s) (status {status:?}): {message}")]
    RemoteLlm {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("ProtocolError: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            stop: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
    pub model_id: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub ok: bool,
    pub model_id: String,
    pub round_trip_ms: u64,
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    fn model_id(&self) -> &str;
    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
    /// Cheap probe; failures are reported as `ok = false`.
    async fn health_check(&self) -> HealthStatus;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            url: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "llama-3.2-3b-instruct".into(),
            timeout_ms: 60_000,
            max_in_flight: 2,
            max_attempts: 3,
            backoff_ms: 250,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Wire request body of `POST /chat/completions`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub model: Option<String>,
    pub choices: Vec<ChatChoice>,
    #[serde(default)]
    pub usage: Option<ChatUsage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ChatUsage {
    #[serde(default)]
    pub prompt_tokens: u32,
    #[serde(default)]
    pub completion_tokens: u32,
}

pub struct LlmGateway {
    config: GatewayConfig,
    client: reqwest::Client,
    in_flight: Arc<Semaphore>,
}

impl LlmGateway {
    pub fn new(config: GatewayConfig) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .expect("reqwest client without TLS builds");
        let in_flight = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        LlmGateway {
            config,
            client,
            in_flight,
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Request with this gateway's model and sampling defaults.
    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
            ..CompletionRequest::new(self.config.model.clone(), prompt)
        }
    }

    async fn send(&self, req: &CompletionRequest, max_attempts: u32) -> Result<CompletionResult, GatewayError> {
        req.validate()?;
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let body = ChatRequest {
            model: req.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: req.prompt.clone(),
            }],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            stop: req.stop.clone(),
        };
        let started = Instant::now();
        let attempts = max_attempts.max(1);
        let mut last = (None, String::new());
        for attempt in 1..=attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_ms << (attempt - 2);
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            let resp = match self.client.post(&self.config.url).json(&body).send().await {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("completion attempt {attempt} failed: {e}");
                    last = (None, e.to_string());
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() {
                log::warn!("completion attempt {attempt} got {status}");
                last = (
                    Some(status.as_u16()),
                    resp.text().await.unwrap_or_else(|_| status.to_string()),
                );
                continue;
            }
            if !status.is_success() {
                return Err(GatewayError::RemoteLlm {
                    attempts: attempt,
                    status: Some(status.as_u16()),
                    message: resp.text().await.unwrap_or_default(),
                });
            }
            let raw = match resp.bytes().await {
                Ok(b) => b,
                Err(e) => {
                    last = (None, e.to_string());
                    continue;
                }
            };
            let parsed: ChatResponse =
                serde_json::from_slice(&raw).map_err(|e| GatewayError::Protocol(e.to_string()))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
            let usage = parsed.usage.unwrap_or_default();
            return Ok(CompletionResult {
                text: choice.message.content,
                latency_ms: started.elapsed().as_millis() as u64,
                token_usage: TokenUsage {
                    prompt: usage.prompt_tokens,
                    completion: usage.completion_tokens,
                },
                model_id: parsed
                    .model
                    .filter(|m| !m.is_empty())
                    .unwrap_or_else(|| req.model.clone()),
                attempt_count: attempt,
            });
        }
        Err(GatewayError::RemoteLlm {
            attempts,
            status: last.0,
            message: last.1,
        })
    }
}

#[async_trait]
impl ChatModel for LlmGateway {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        self.send(req, self.config.max_attempts).await
    }

    async fn health_check(&self) -> HealthStatus {
        let started = Instant::now();
        let mut req = self.request(HEALTH_PROMPT);
        req.max_tokens = 1;
        let outcome = self.send(&req, 1).await;
        let round_trip_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(r) if !r.model_id.is_empty() => HealthStatus {
                ok: true,
                model_id: r.model_id,
                round_trip_ms,
            },
            Ok(_) => HealthStatus {
                ok: false,
                model_id: String::new(),
                round_trip_ms,
            },
            Err(e) => {
                log::warn!("health check failed: {e}");
                HealthStatus {
                    ok: false,
                    model_id: self.config.model.clone(),
                    round_trip_ms,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults_and_validation() {
        let r = CompletionRequest::new("m", "p");
        assert_eq!(r.temperature, 0.2);
        assert!(r.validate().is_ok());
        let bad = CompletionRequest {
            max_tokens: 0,
            ..r.clone()
        };
        assert!(matches!(bad.validate(), Err(GatewayError::InvalidRequest(_))));
        let bad = CompletionRequest { temperature: -0.1, ..r };
        assert!(matches!(bad.validate(), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn wire_shape() {
        let body = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: "hi".into(),
            }],
            max_tokens: 8,
            temperature: 0.2,
            stop: vec![],
        };
        assert_eq!(
            serde_json::to_string(&body).unwrap(),
            r#"{"model":"m","messages":[{"role":"user","content":"hi"}],"max_tokens":8,"temperature":0.2}"#
        );
    }
}
