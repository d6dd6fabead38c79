use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::prompt::{ChatMessage, PromptTemplate};
use super::{BackendKind, LlmBackend, LlmError, LlmRequest};

pub const TOKEN_ENV: &str = "EVDRANK_LLM_TOKEN";

/// Chat-completions client.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    model_name: String,
    token: Option<String>,
    timeout: Duration,
    retries: u32,
    backoff: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl RemoteBackend {
    /// Client with a 30 s timeout, 3 retries and the bearer token from
    /// `EVDRANK_LLM_TOKEN` when set.
    pub fn new(endpoint: &str, model_name: &str) -> Result<Self, LlmError> {
        if endpoint.trim().is_empty() {
            return Err(LlmError::InvalidRequest("remote backend requires an endpoint".into()));
        }
        Ok(Self {
            endpoint: endpoint.to_string(),
            model_name: model_name.to_string(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Retry count and the first backoff delay (doubled on every retry).
    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &ChatRequest) -> Result<String, Attempt> {
        let mut req = client.post(&self.endpoint).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(LlmError::BackendUnavailable(format!("HTTP {status}"))));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(LlmError::MalformedResponse(format!("response body: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(LlmError::MalformedResponse("no choices".into())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(LlmError),
}

impl LlmBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        request.validate()?;
        let messages = PromptTemplate::builtin(request.template).render(&request.bindings)?;
        let body = ChatRequest {
            model: &self.model_name,
            messages,
            temperature: request.temperature,
            seed: request.seed,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                warn!("LLM request failed ({last}); retry {attempt}/{} in {delay:?}", self.retries);
                thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&client, &body) {
                Ok(content) => return Ok(content),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(LlmError::BackendUnavailable(last))
    }
}
