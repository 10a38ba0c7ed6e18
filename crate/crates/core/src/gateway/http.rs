//! OpenAI-compatible `POST /v1/chat/completions` adapter.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{AdapterKind, ChatAdapter, ChatMessage, ChatRequest, ChatResponse, SendError, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

pub struct HttpAdapter {
    client: Client,
    settings: HttpSettings,
}

impl std::fmt::Debug for HttpAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpAdapter")
            .field("base_url", &self.settings.base_url)
            .field("model", &self.settings.model)
            .field("has_api_key", &self.settings.api_key.is_some())
            .finish()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpAdapter {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client, settings })
    }

    fn endpoint(&self) -> String {
        let base = self.settings.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/chat/completions")
    }
}

pub(crate) fn parse_completion(body: &str) -> std::result::Result<(String, Usage), SendError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| SendError::Protocol(format!("malformed completion body: {e}")))?;
    let content = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| SendError::Protocol("completion has no choices[0].message.content".into()))?;
    let usage = wire.usage.map_or_else(Usage::default, |u| Usage {
        input_tokens: u.prompt_tokens,
        output_tokens: u.completion_tokens,
    });
    Ok((content, usage))
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

impl ChatAdapter for HttpAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Http
    }

    fn send(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, SendError> {
        let body = WireRequest {
            model: &self.settings.model,
            messages: &req.messages,
            temperature: req.temperature,
            seed: req.seed,
            max_tokens: req.max_output,
        };
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.settings.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| SendError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| SendError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            let message = format!("HTTP {status}: {}", truncate(&text, 300));
            return Err(if status == 429 || status >= 500 {
                SendError::Transient {
                    status: Some(status),
                    message,
                }
            } else {
                SendError::Fatal {
                    status: Some(status),
                    message,
                }
            });
        }
        let (text, usage) = parse_completion(&text)?;
        Ok(ChatResponse {
            text,
            usage,
            adapter: AdapterKind::Http,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::gateway::{Gateway, ModelRole, RetryPolicy};

    /// Serves the given (status, body) replies in order, recording request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen_thread = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen_thread.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn adapter(base: &str) -> Arc<HttpAdapter> {
        Arc::new(
            HttpAdapter::new(HttpSettings {
                base_url: base.to_string(),
                model: "m".into(),
                api_key: Some("k".into()),
                timeout: Duration::from_secs(5),
            })
            .unwrap(),
        )
    }

    fn request() -> ChatRequest {
        ChatRequest {
            model_role: ModelRole::Target,
            messages: vec![ChatMessage::system("s"), ChatMessage::user("u")],
            temperature: 0.0,
            seed: Some(42),
            max_output: 32,
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Final Answer: B"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

    #[test]
    fn sends_wire_fields_and_reads_choice() {
        let (base, seen) = serve(vec![(200, OK.into())]);
        let resp = adapter(&base).send(&request()).unwrap();
        assert_eq!(resp.text, "Final Answer: B");
        assert_eq!(resp.usage, Usage { input_tokens: 12, output_tokens: 3 });
        let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["seed"], 42);
        assert_eq!(body["max_tokens"], 32);
        assert_eq!(body["messages"][0]["role"], "system");
    }

    #[test]
    fn rate_limit_then_success_through_gateway() {
        let (base, _) = serve(vec![(429, "{}".into()), (200, OK.into())]);
        let a = adapter(&base);
        let gw = Gateway::builder(a.clone(), a)
            .retry(RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::ZERO,
                max_delay: Duration::ZERO,
            })
            .build();
        assert_eq!(gw.complete(&request()).unwrap().text, "Final Answer: B");
    }

    #[test]
    fn unauthorized_is_fatal() {
        let (base, _) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
        assert!(matches!(
            adapter(&base).send(&request()),
            Err(SendError::Fatal { status: Some(401), .. })
        ));
    }

    #[test]
    fn malformed_body_is_protocol_error() {
        assert!(matches!(parse_completion("not json"), Err(SendError::Protocol(_))));
        assert!(matches!(parse_completion(r#"{"choices":[]}"#), Err(SendError::Protocol(_))));
        let (text, usage) = parse_completion(r#"{"choices":[{"message":{"content":"x"}}]}"#).unwrap();
        assert_eq!(text, "x");
        assert_eq!(usage, Usage::default());
    }
}
