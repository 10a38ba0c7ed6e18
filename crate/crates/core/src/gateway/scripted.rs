//! Offline adapter whose replies are a pure function of the request.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::jsonl::read_jsonl;
use super::{AdapterKind, ChatAdapter, ChatRequest, ChatResponse, SendError, Usage};
use crate::error::Result;

/// Stand-in tokenizer: whitespace-separated words.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub type ScriptRule = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

/// Replies from a digest table first, then from an optional rule.
#[derive(Default)]
pub struct ScriptedAdapter {
    table: HashMap<String, String>,
    rule: Option<ScriptRule>,
}

impl std::fmt::Debug for ScriptedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedAdapter")
            .field("entries", &self.table.len())
            .field("rule", &self.rule.is_some())
            .finish()
    }
}

#[derive(Deserialize)]
struct ScriptLine {
    digest: String,
    text: String,
}

impl ScriptedAdapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rule(rule: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        Self {
            table: HashMap::new(),
            rule: Some(Box::new(rule)),
        }
    }

    /// Loads `{"digest": .., "text": ..}` lines.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let mut adapter = Self::new();
        for line in read_jsonl::<ScriptLine>(path)? {
            adapter.table.insert(line.digest, line.text);
        }
        Ok(adapter)
    }

    /// Scripts a reply for the exact message list of `req`.
    pub fn script(&mut self, req: &ChatRequest, reply: impl Into<String>) -> &mut Self {
        self.table.insert(req.messages_digest(), reply.into());
        self
    }

    pub fn script_digest(&mut self, digest: impl Into<String>, reply: impl Into<String>) -> &mut Self {
        self.table.insert(digest.into(), reply.into());
        self
    }
}

impl ChatAdapter for ScriptedAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Scripted
    }

    fn send(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, SendError> {
        let digest = req.messages_digest();
        let text = self
            .table
            .get(&digest)
            .cloned()
            .or_else(|| self.rule.as_ref().and_then(|rule| rule(req)))
            .ok_or_else(|| SendError::Protocol(format!("no scripted reply for message digest {digest}")))?;
        let input_tokens = req.messages.iter().map(|m| whitespace_tokens(&m.content)).sum();
        Ok(ChatResponse {
            usage: Usage {
                input_tokens,
                output_tokens: whitespace_tokens(&text),
            },
            text,
            adapter: AdapterKind::Scripted,
        })
    }
}
