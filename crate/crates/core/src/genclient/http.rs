//! OpenAI-compatible `/v1/chat/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, FinishReason, GenerationBackend, GenerationRequest, GenerationResult};

pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body, serialized with keys in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl ChatCompletionRequest {
    pub fn from_request(request: &GenerationRequest, default_model: &str) -> Self {
        let model = if request.model_name.is_empty() { default_model } else { &request.model_name };
        Self {
            model: model.to_string(),
            messages: vec![
                ChatMessage { role: "system".into(), content: request.system_prompt.clone() },
                ChatMessage { role: "user".into(), content: request.user_prompt.clone() },
            ],
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Parses a chat-completions response body into the first choice.
pub(crate) fn parse_response(body: &str) -> Result<GenerationResult, BackendError> {
    let resp: ChatCompletionResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| BackendError::Malformed("first choice has no message content".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    Ok(GenerationResult { text, finish_reason, latency_ms: 0, attempts: 1 })
}

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { base_url: base_url.into(), api_key, model: model.into(), agent }
    }

    pub fn url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with(CHAT_COMPLETIONS_PATH) {
            base.to_string()
        } else {
            format!("{}{CHAT_COMPLETIONS_PATH}", base.trim_end_matches("/v1"))
        }
    }
}

impl GenerationBackend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai"
    }

    fn endpoint(&self) -> String {
        self.url()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let body = ChatCompletionRequest::from_request(request, &self.model);
        let mut call = self.agent.post(&self.url()).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_string(&body).expect("request body serializes");
        match call.send_string(&payload) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| BackendError::Network(e.to_string()))?;
                parse_response(&text)
            }
            Err(ureq::Error::Status(code, resp)) => {
                Err(BackendError::Status { code, body: resp.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => Err(BackendError::Network(t.to_string())),
        }
    }
}
