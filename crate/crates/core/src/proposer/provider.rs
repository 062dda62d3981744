//! Chat-completion backends.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Body(String),
    #[error("no scripted response left")]
    Exhausted,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, ProviderError> {
        (**self).complete(messages, temperature)
    }
}

/// Chat-completions endpoint over HTTPS. The bearer key is read from an
/// environment variable and is never printed.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    key: String,
    tries: u32,
    backoff: Duration,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("key", &"<redacted>")
            .finish()
    }
}

impl HttpProvider {
    pub fn from_env(endpoint: &str, model: &str, key_var: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let key = std::env::var(key_var).map_err(|_| ProviderError::MissingKey(key_var.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            key,
            tries: 3,
            backoff: Duration::from_secs(1),
            client,
        })
    }

    fn once(&self, body: &Value) -> Result<Completion, ProviderError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.key)
            .json(body)
            .send()
            .map_err(|e| ProviderError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        parse_completion(&text)
    }
}

pub(crate) fn parse_completion(text: &str) -> Result<Completion, ProviderError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ProviderError::Body(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Body("missing choices[0].message.content".into()))?;
    let tok = |p: &str| v.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok(Completion {
        text: content.to_string(),
        prompt_tokens: tok("/usage/prompt_tokens"),
        completion_tokens: tok("/usage/completion_tokens"),
    })
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
        });
        let mut delay = self.backoff;
        let mut last = ProviderError::Transport("no attempt made".into());
        for attempt in 0..self.tries {
            match self.once(&body) {
                Ok(c) => return Ok(c),
                // Client errors other than rate limiting will not improve on retry.
                Err(ProviderError::Status { status, body }) if (400..500).contains(&status) && status != 429 => {
                    return Err(ProviderError::Status { status, body });
                }
                Err(e) => {
                    log::warn!("provider attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
            if attempt + 1 < self.tries {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last)
    }
}

type Responder = Box<dyn Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync>;

/// Test provider: replays scripted responses in order, or answers through a
/// closure. Every request is recorded.
pub struct MockProvider {
    script: Mutex<VecDeque<String>>,
    responder: Option<Responder>,
    pub requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl MockProvider {
    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Mutex::new(responses.into_iter().map(Into::into).collect()),
            responder: None,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn with<F>(f: F) -> Self
    where
        F: Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync + 'static,
    {
        Self {
            script: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().expect("mock lock").len()
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, messages: &[ChatMessage], _temperature: f64) -> Result<Completion, ProviderError> {
        self.requests.lock().expect("mock lock").push(messages.to_vec());
        let text = match &self.responder {
            Some(f) => f(messages)?,
            None => self
                .script
                .lock()
                .expect("mock lock")
                .pop_front()
                .ok_or(ProviderError::Exhausted)?,
        };
        Ok(Completion {
            text,
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chat_body() {
        let c = parse_completion(r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#).unwrap();
        assert_eq!((c.text.as_str(), c.prompt_tokens, c.completion_tokens), ("hi", 3, 1));
        assert!(parse_completion(r#"{"choices":[]}"#).is_err());
    }

    #[test]
    fn missing_key_is_reported_by_name() {
        let e = HttpProvider::from_env("http://127.0.0.1:9", "m", "EVOKERNEL_TEST_UNSET_KEY", Duration::from_secs(1)).unwrap_err();
        assert_eq!(e, ProviderError::MissingKey("EVOKERNEL_TEST_UNSET_KEY".into()));
    }

    #[test]
    fn debug_hides_key() {
        std::env::set_var("EVOKERNEL_TEST_DEBUG_KEY", "sk-secret-value");
        let p = HttpProvider::from_env("http://127.0.0.1:9", "m", "EVOKERNEL_TEST_DEBUG_KEY", Duration::from_secs(1)).unwrap();
        assert!(!format!("{p:?}").contains("sk-secret-value"));
    }

    #[test]
    fn mock_replays_then_exhausts() {
        let m = MockProvider::scripted(["a", "b"]);
        assert_eq!(m.complete(&[ChatMessage::user("q")], 0.0).unwrap().text, "a");
        assert_eq!(m.complete(&[], 0.0).unwrap().text, "b");
        assert_eq!(m.complete(&[], 0.0).unwrap_err(), ProviderError::Exhausted);
        assert_eq!(m.request_count(), 3);
    }
}
