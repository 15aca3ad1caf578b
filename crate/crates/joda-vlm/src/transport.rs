//! Chat-completion transports.
//!
//! Requests are provider-neutral message lists; the HTTP transport renders
//! them into an OpenAI-style or Gemini-style body. Body builders and
//! response extractors are pure functions so they are testable without a
//! network, and tests drive the rest of the crate through the [`Transport`]
//! trait with scripted doubles.

use crate::VlmError;
use serde_json::{json, Value};
use std::time::Duration;

/// The only place an API key may come from.
pub const API_KEY_ENV: &str = "JODA_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// A base64-encoded image ready to attach to a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    /// MIME type, e.g. `image/png`.
    pub media_type: String,
    pub base64_data: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self::plain(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::plain(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, text)
    }

    fn plain(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_images(mut self, images: Vec<ImageAttachment>) -> Self {
        self.images = images;
        self
    }
}

/// A provider-neutral chat request.
///
/// Temperature is pinned to zero at construction; transports pass it
/// through where the API accepts one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: 0.0,
        }
    }

    /// Transcript form: everything needed to replay the request, including
    /// attachment bytes.
    pub fn to_value(&self) -> Value {
        json!({
            "messages": self
                .messages
                .iter()
                .map(|m| {
                    json!({
                        "images": m
                            .images
                            .iter()
                            .map(|img| json!({
                                "base64_data": img.base64_data,
                                "media_type": img.media_type,
                            }))
                            .collect::<Vec<_>>(),
                        "role": m.role.as_str(),
                        "text": m.text,
                    })
                })
                .collect::<Vec<_>>(),
            "temperature": self.temperature,
        })
    }

    /// Approximate wire size: text plus encoded attachment bytes.
    pub fn approx_size(&self) -> usize {
        self.messages
            .iter()
            .map(|m| {
                m.text.len()
                    + m.images
                        .iter()
                        .map(|img| img.base64_data.len() + img.media_type.len())
                        .sum::<usize>()
            })
            .sum()
    }
}

/// Anything that can answer a chat request with the assistant's text.
///
/// Implementations must be shareable across threads so independent joints
/// can run loops concurrently.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, VlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    OpenAi,
    Gemini,
}

impl Backend {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "openai" => Some(Backend::OpenAi),
            "gemini" => Some(Backend::Gemini),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::OpenAi => "openai",
            Backend::Gemini => "gemini",
        }
    }

    pub fn default_model(self) -> &'static str {
        match self {
            Backend::OpenAi => "gpt-4o",
            Backend::Gemini => "gemini-1.5-pro",
        }
    }

    fn default_base_url(self) -> &'static str {
        match self {
            Backend::OpenAi => "https://api.openai.com",
            Backend::Gemini => "https://generativelanguage.googleapis.com",
        }
    }
}

/// OpenAI-style chat-completions body.
///
/// Text-only messages use the plain string content form; messages with
/// attachments use the content-part array with `data:` image URLs.
pub fn openai_body(request: &ChatRequest, model: &str) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content = if m.images.is_empty() {
                Value::String(m.text.clone())
            } else {
                let mut parts = vec![json!({ "text": m.text, "type": "text" })];
                parts.extend(m.images.iter().map(|img| {
                    json!({
                        "image_url": {
                            "url": format!(
                                "data:{};base64,{}",
                                img.media_type, img.base64_data
                            ),
                        },
                        "type": "image_url",
                    })
                }));
                Value::Array(parts)
            };
            json!({ "content": content, "role": m.role.as_str() })
        })
        .collect();
    json!({
        "messages": messages,
        "model": model,
        "temperature": request.temperature,
    })
}

/// Assistant text from an OpenAI-style response.
pub fn openai_text(body: &Value) -> Result<String, VlmError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| VlmError::MalformedResponse("choices[0].message.content".into()))
}

/// Gemini-style generateContent body.
///
/// The system message becomes `systemInstruction`; user/assistant turns
/// map to `user`/`model` contents with inline image data.
pub fn gemini_body(request: &ChatRequest) -> Value {
    let mut system_parts = Vec::new();
    let mut contents = Vec::new();
    for m in &request.messages {
        if m.role == Role::System {
            system_parts.push(json!({ "text": m.text }));
            continue;
        }
        let mut parts = vec![json!({ "text": m.text })];
        parts.extend(m.images.iter().map(|img| {
            json!({
                "inline_data": {
                    "data": img.base64_data,
                    "mime_type": img.media_type,
                },
            })
        }));
        let role = match m.role {
            Role::Assistant => "model",
            _ => "user",
        };
        contents.push(json!({ "parts": parts, "role": role }));
    }
    let mut body = json!({
        "contents": contents,
        "generationConfig": { "temperature": request.temperature },
    });
    if !system_parts.is_empty() {
        body["systemInstruction"] = json!({ "parts": system_parts });
    }
    body
}

/// Concatenated candidate text from a Gemini-style response.
pub fn gemini_text(body: &Value) -> Result<String, VlmError> {
    let parts = body
        .pointer("/candidates/0/content/parts")
        .and_then(Value::as_array)
        .ok_or_else(|| VlmError::MalformedResponse("candidates[0].content.parts".into()))?;
    let text: String = parts
        .iter()
        .filter_map(|p| p.get("text").and_then(Value::as_str))
        .collect();
    if text.is_empty() {
        return Err(VlmError::MalformedResponse(
            "candidates[0].content.parts had no text".into(),
        ));
    }
    Ok(text)
}

/// Replays a fixed list of assistant replies and records every request.
///
/// This is the offline stand-in for a live endpoint: recorded conversations
/// are replayed through it in tests and audits.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    replies: std::sync::Mutex<std::collections::VecDeque<String>>,
    requests: std::sync::Mutex<Vec<Value>>,
}

impl ScriptedTransport {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: std::sync::Mutex::new(replies.into_iter().map(Into::into).collect()),
            requests: std::sync::Mutex::new(Vec::new()),
        }
    }

    /// Transcript values of every request seen so far.
    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, VlmError> {
        self.requests.lock().unwrap().push(request.to_value());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| VlmError::Network("scripted transport has no more replies".into()))
    }
}

/// Blocking HTTPS transport for the two supported backend styles.
pub struct HttpTransport {
    backend: Backend,
    model: String,
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    /// Build a transport reading the key from `JODA_API_KEY` only.
    ///
    /// `base_url` overrides the backend's public endpoint (useful for
    /// proxies); `model` falls back to the backend default.
    pub fn from_env(
        backend: Backend,
        model: Option<String>,
        base_url: Option<String>,
    ) -> Result<Self, VlmError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or(VlmError::MissingKey)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(180))
            .build()
            .map_err(|e| VlmError::Network(e.to_string()))?;
        Ok(Self {
            backend,
            model: model.unwrap_or_else(|| backend.default_model().to_string()),
            base_url: base_url
                .unwrap_or_else(|| backend.default_base_url().to_string())
                .trim_end_matches('/')
                .to_string(),
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> String {
        match self.backend {
            Backend::OpenAi => format!("{}/v1/chat/completions", self.base_url),
            Backend::Gemini => format!(
                "{}/v1beta/models/{}:generateContent",
                self.base_url, self.model
            ),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, VlmError> {
        let body = match self.backend {
            Backend::OpenAi => openai_body(request, &self.model),
            Backend::Gemini => gemini_body(request),
        };
        let builder = self.client.post(self.endpoint()).json(&body);
        let builder = match self.backend {
            Backend::OpenAi => builder.bearer_auth(&self.api_key),
            Backend::Gemini => builder.header("x-goog-api-key", &self.api_key),
        };
        let response = builder
            .send()
            .map_err(|e| VlmError::Network(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| VlmError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(VlmError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| VlmError::MalformedResponse(e.to_string()))?;
        match self.backend {
            Backend::OpenAi => openai_text(&value),
            Backend::Gemini => gemini_text(&value),
        }
    }
}
