//! Scripted stand-ins for the inference and embedding servers.
//!
//! A script is JSONL, one rule per line:
//!
//! ```text
//! {"match": "chest pain", "response": "Consider ACS.", "status": 200, "times": 1}
//! ```
//!
//! The first rule whose `match` substring occurs in the prompt and still has
//! uses left answers the request. An empty `match` matches everything.
//! `raw: true` sends `response` as the literal body, and `delay_ms` holds the
//! reply back.

use std::io::BufRead;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embedding::hash_embed;
use crate::gateway::{
    ChatModel, ChatRequest, CompletionRequest, CompletionResult, GatewayError, HealthStatus, TokenUsage,
};
use crate::text::token_count;

pub const MOCK_MODEL_ID: &str = "mock-llm";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("script line {line}: {reason}")]
    Script { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn ok_status() -> u16 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match", default)]
    pub pattern: String,
    #[serde(default)]
    pub response: String,
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
    #[serde(default)]
    pub raw: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

impl ScriptRule {
    pub fn reply(pattern: &str, response: &str) -> Self {
        ScriptRule {
            pattern: pattern.into(),
            response: response.into(),
            status: 200,
            times: None,
            raw: false,
            delay_ms: 0,
        }
    }

    pub fn failing(status: u16, times: usize) -> Self {
        ScriptRule {
            status,
            times: Some(times),
            response: format!("scripted failure {status}"),
            ..ScriptRule::reply("", "")
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    rules: Vec<ScriptRule>,
}

impl MockScript {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        MockScript { rules }
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, MockError> {
        let mut rules = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(&line).map_err(|e| MockError::Script {
                line: i + 1,
                reason: e.to_string(),
            })?;
            rules.push(rule);
        }
        Ok(MockScript { rules })
    }

    pub fn load(path: &Path) -> Result<Self, MockError> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Picks the rule for `prompt` and consumes one of its uses.
    pub fn next_for(&mut self, prompt: &str) -> Option<ScriptRule> {
        let rule = self
            .rules
            .iter_mut()
            .find(|r| r.times != Some(0) && prompt.contains(&r.pattern))?;
        if let Some(t) = rule.times.as_mut() {
            *t -= 1;
        }
        Some(rule.clone())
    }
}

#[derive(Debug, Clone)]
pub struct MockOptions {
    pub model_id: String,
    pub embedding_dim: usize,
    /// When set, every embeddings request fails with this status.
    pub embedding_status: Option<u16>,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            model_id: MOCK_MODEL_ID.into(),
            embedding_dim: 256,
            embedding_status: None,
        }
    }
}

#[derive(Debug, Default)]
struct Recorded {
    prompts: Vec<String>,
    chat_requests: usize,
    embedding_requests: usize,
}

struct MockState {
    script: Mutex<MockScript>,
    options: MockOptions,
    recorded: Mutex<Recorded>,
}

#[derive(Debug, Deserialize)]
struct EmbedBody {
    input: Vec<String>,
}

fn error_body(status: u16, message: &str) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(json!({"error": {"message": message}}))).into_response()
}

async fn chat(State(state): State<Arc<MockState>>, body: String) -> Response {
    state.recorded.lock().unwrap().chat_requests += 1;
    let req: ChatRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error_body(400, &format!("bad request body: {e}")),
    };
    let prompt: String = req
        .messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    state.recorded.lock().unwrap().prompts.push(prompt.clone());
    let rule = state.script.lock().unwrap().next_for(&prompt);
    let Some(rule) = rule else {
        return error_body(404, "no scripted response matches this prompt");
    };
    if rule.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(rule.delay_ms)).await;
    }
    if rule.raw {
        let code = StatusCode::from_u16(rule.status).unwrap_or(StatusCode::OK);
        return (code, rule.response).into_response();
    }
    if rule.status != 200 {
        return error_body(rule.status, &rule.response);
    }
    Json(json!({
        "id": "mock-completion",
        "object": "chat.completion",
        "model": state.options.model_id,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": rule.response},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": token_count(&prompt),
            "completion_tokens": token_count(&rule.response)
        }
    }))
    .into_response()
}

async fn embeddings(State(state): State<Arc<MockState>>, Json(body): Json<EmbedBody>) -> Response {
    state.recorded.lock().unwrap().embedding_requests += 1;
    if let Some(status) = state.options.embedding_status {
        return error_body(status, "scripted embedding failure");
    }
    let data: Vec<_> = body
        .input
        .iter()
        .enumerate()
        .map(|(i, t)| {
            json!({"object": "embedding", "index": i, "embedding": hash_embed(t, state.options.embedding_dim).values})
        })
        .collect();
    Json(json!({"object": "list", "model": state.options.model_id, "data": data})).into_response()
}

/// Router serving `/v1/chat/completions` and `/v1/embeddings`.
fn router(state: Arc<MockState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .with_state(state)
}

/// A mock server bound to a local port; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    task: tokio::task::JoinHandle<()>,
}

impl MockServer {
    pub async fn spawn(script: MockScript, options: MockOptions) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().unwrap(), script, options).await
    }

    pub async fn bind(addr: SocketAddr, script: MockScript, options: MockOptions) -> std::io::Result<Self> {
        let state = Arc::new(MockState {
            script: Mutex::new(script),
            options,
            recorded: Mutex::default(),
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let app = router(state.clone());
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                log::error!("mock server stopped: {e}");
            }
        });
        Ok(MockServer { addr, state, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn chat_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url())
    }

    pub fn embeddings_url(&self) -> String {
        format!("{}/v1/embeddings", self.base_url())
    }

    /// Prompts received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.state.recorded.lock().unwrap().prompts.clone()
    }

    pub fn chat_requests(&self) -> usize {
        self.state.recorded.lock().unwrap().chat_requests
    }

    pub fn embedding_requests(&self) -> usize {
        self.state.recorded.lock().unwrap().embedding_requests
    }

    /// Runs until the task ends; used by the CLI's mock subcommand.
    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// In-process [`ChatModel`] answering from a script, without sockets.
pub struct ScriptedChat {
    script: Mutex<MockScript>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedChat {
    pub fn new(script: MockScript) -> Self {
        ScriptedChat {
            script: Mutex::new(script),
            prompts: Mutex::default(),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

#[async_trait]
impl ChatModel for ScriptedChat {
    fn model_id(&self) -> &str {
        MOCK_MODEL_ID
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        req.validate()?;
        let started = Instant::now();
        self.prompts.lock().unwrap().push(req.prompt.clone());
        let rule = self.script.lock().unwrap().next_for(&req.prompt);
        let Some(rule) = rule else {
            return Err(GatewayError::RemoteLlm {
                attempts: 1,
                status: Some(404),
                message: "no scripted response matches this prompt".into(),
            });
        };
        if rule.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(rule.delay_ms)).await;
        }
        if rule.status != 200 {
            return Err(GatewayError::RemoteLlm {
                attempts: 1,
                status: Some(rule.status),
                message: rule.response,
            });
        }
        Ok(CompletionResult {
            latency_ms: started.elapsed().as_millis() as u64,
            token_usage: TokenUsage {
                prompt: token_count(&req.prompt) as u32,
                completion: token_count(&rule.response) as u32,
            },
            text: rule.response,
            model_id: MOCK_MODEL_ID.into(),
            attempt_count: 1,
        })
    }

    async fn health_check(&self) -> HealthStatus {
        HealthStatus {
            ok: true,
            model_id: MOCK_MODEL_ID.into(),
            round_trip_ms: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_rules_are_consumed_in_order() {
        let mut s = MockScript::new(vec![ScriptRule::failing(503, 2), ScriptRule::reply("", "OK")]);
        assert_eq!(s.next_for("x").unwrap().status, 503);
        assert_eq!(s.next_for("x").unwrap().status, 503);
        assert_eq!(s.next_for("x").unwrap().response, "OK");
        assert_eq!(s.next_for("y").unwrap().response, "OK");
    }

    #[test]
    fn script_parsing() {
        let raw =
            "# comment\n{\"match\": \"chest\", \"response\": \"ACS\"}\n\n{\"response\": \"fallback\", \"times\": 1}\n";
        let mut s = MockScript::parse(raw.as_bytes()).unwrap();
        assert_eq!(s.next_for("chest pain").unwrap().response, "ACS");
        assert_eq!(s.next_for("headache").unwrap().response, "fallback");
        assert!(s.next_for("headache").is_none());
        assert!(matches!(
            MockScript::parse("{not json".as_bytes()),
            Err(MockError::Script { line: 1, .. })
        ));
    }
}
