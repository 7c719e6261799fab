//! Chat-completion abstraction plus the offline replay backend.
//!
//! Remote HTTP backends live in the CLI crate; everything here runs without
//! network access.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datapoint::{Axis, QueryClassifier};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replay transcript exhausted after {0} responses")]
    TranscriptExhausted(usize),
    #[error("replay entry {index}: expected prompt hash {expected}, got {actual}")]
    PromptMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("unexpected response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            model_id: "replay".to_string(),
            temperature: 0.7,
            seed: None,
        }
    }
}

pub trait ChatProvider {
    fn complete(
        &mut self,
        conversation: &[Message],
        params: &CompletionParams,
    ) -> Result<String, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &mut P {
    fn complete(&mut self, c: &[Message], p: &CompletionParams) -> Result<String, ProviderError> {
        (**self).complete(c, p)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(&mut self, c: &[Message], p: &CompletionParams) -> Result<String, ProviderError> {
        (**self).complete(c, p)
    }
}

/// Hex SHA-256 over the JSON encoding of the conversation.
pub fn conversation_hash(conversation: &[Message]) -> String {
    let json = serde_json::to_string(conversation).expect("messages serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One scripted reply in a replay transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_prompt_hash: Option<String>,
    pub response: String,
}

/// Serves scripted responses in order and records every conversation it was
/// given. Running past the end of the transcript is an error.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    entries: Vec<TranscriptEntry>,
    cursor: usize,
    seen: Vec<Vec<Message>>,
}

impl ReplayProvider {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        ReplayProvider {
            entries,
            cursor: 0,
            seen: Vec::new(),
        }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ReplayProvider::new(
            responses
                .into_iter()
                .map(|r| TranscriptEntry {
                    expect_prompt_hash: None,
                    response: r.into(),
                })
                .collect(),
        )
    }

    pub fn from_jsonl(text: &str) -> Result<Self, crate::datapoint::JsonlError> {
        Ok(ReplayProvider::new(crate::datapoint::read_jsonl(
            text.as_bytes(),
        )?))
    }

    pub fn load(path: &Path) -> Result<Self, crate::datapoint::JsonlError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }

    /// Conversations received so far, in call order.
    pub fn seen(&self) -> &[Vec<Message>] {
        &self.seen
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }
}

impl ChatProvider for ReplayProvider {
    fn complete(
        &mut self,
        conversation: &[Message],
        _params: &CompletionParams,
    ) -> Result<String, ProviderError> {
        self.seen.push(conversation.to_vec());
        let entry = self
            .entries
            .get(self.cursor)
            .ok_or(ProviderError::TranscriptExhausted(self.cursor))?;
        if let Some(expected) = &entry.expect_prompt_hash {
            let actual = conversation_hash(conversation);
            if *expected != actual {
                return Err(ProviderError::PromptMismatch {
                    index: self.cursor,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        self.cursor += 1;
        Ok(entry.response.clone())
    }
}

/// Wraps a provider and keeps a replayable transcript of its answers.
pub struct RecordingProvider<P> {
    inner: P,
    transcript: Vec<TranscriptEntry>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            transcript: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn into_parts(self) -> (P, Vec<TranscriptEntry>) {
        (self.inner, self.transcript)
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&mut self, c: &[Message], p: &CompletionParams) -> Result<String, ProviderError> {
        let response = self.inner.complete(c, p)?;
        self.transcript.push(TranscriptEntry {
            expect_prompt_hash: Some(conversation_hash(c)),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// First alphabetic token of a reply, lower-cased.
pub fn leading_token(text: &str) -> Option<String> {
    text.split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())
        .map(str::to_lowercase)
}

const CONTEXTUAL_PROMPT: &str = "\
A situational query can only be answered by assessing several relevant objects and whether \
their states collectively satisfy a scenario, for example \"Is the dining area set up for dinner?\". \
A query that directly references an object or property, such as \"Is the sofa blue?\", does not qualify.
Does the following query require such an assessment? Reply with one word: Yes or No.
Query: ";

const SITUATIONAL_PROMPT: &str = "\
Classify the household query as Situational or Simple.
Situational queries ask about the readiness or condition of the environment and need a consensus \
on multiple object states without naming the objects, e.g. \"Is the house ready for sleeptime?\" -> Situational.
Simple queries reference target objects or properties directly, e.g. \"What is the color of the sofa?\" -> Simple, \
\"Is the sofa blue?\" -> Simple.
Reply with one word: Situational or Simple.
Query: ";

const TEMPORAL_PROMPT: &str = "\
Classify the household query as Spatial or Temporal.
Spatial queries can be answered from the current states and positions of objects, e.g. \
\"Is the kitchen ready for cooking?\" -> Spatial.
Temporal queries need time-sensitive knowledge about past states of a dynamic environment, e.g. \
\"Was someone sleeping in the bedroom today?\" -> Temporal.
Reply with one word: Spatial or Temporal.
Query: ";

/// Classifier that asks a chat model, one fresh conversation per query.
pub struct LlmClassifier<P> {
    provider: P,
    params: CompletionParams,
}

impl<P: ChatProvider> LlmClassifier<P> {
    pub fn new(provider: P, params: CompletionParams) -> Self {
        LlmClassifier { provider, params }
    }

    pub fn into_inner(self) -> P {
        self.provider
    }

    pub fn prompt(axis: Axis, query: &str) -> String {
        let head = match axis {
            Axis::Contextual => CONTEXTUAL_PROMPT,
            Axis::Situational => SITUATIONAL_PROMPT,
            Axis::Temporal => TEMPORAL_PROMPT,
        };
        format!("{head}{query}")
    }
}

impl<P: ChatProvider> QueryClassifier for LlmClassifier<P> {
    fn classify(&mut self, axis: Axis, query: &str) -> Result<bool, ProviderError> {
        let reply = self
            .provider
            .complete(&[Message::user(Self::prompt(axis, query))], &self.params)?;
        let token = leading_token(&reply).unwrap_or_default();
        let verdict = match (axis, token.as_str()) {
            (Axis::Contextual | Axis::Situational, "yes" | "pass" | "situational") => true,
            (Axis::Contextual | Axis::Situational, "no" | "fail" | "simple") => false,
            (Axis::Temporal, "temporal") => true,
            (Axis::Temporal, "spatial") => false,
            _ => return Err(ProviderError::BadResponse(reply)),
        };
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_serves_in_order_and_records() {
        let mut p = ReplayProvider::from_responses(["a", "b"]);
        let params = CompletionParams::default();
        assert_eq!(p.complete(&[Message::user("x")], &params).unwrap(), "a");
        assert_eq!(p.complete(&[Message::user("y")], &params).unwrap(), "b");
        assert_eq!(
            p.complete(&[Message::user("z")], &params),
            Err(ProviderError::TranscriptExhausted(2))
        );
        assert_eq!(p.seen().len(), 3);
        assert_eq!(p.seen()[1][0].content, "y");
    }

    #[test]
    fn replay_checks_prompt_hash() {
        let conv = [Message::system("s"), Message::user("u")];
        let mut ok = ReplayProvider::new(vec![TranscriptEntry {
            expect_prompt_hash: Some(conversation_hash(&conv)),
            response: "r".into(),
        }]);
        assert_eq!(
            ok.complete(&conv, &CompletionParams::default()).unwrap(),
            "r"
        );
        let mut bad = ReplayProvider::new(vec![TranscriptEntry {
            expect_prompt_hash: Some("00".into()),
            response: "r".into(),
        }]);
        assert!(matches!(
            bad.complete(&conv, &CompletionParams::default()),
            Err(ProviderError::PromptMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn recording_round_trips_through_replay() {
        let inner = ReplayProvider::from_responses(["one", "two"]);
        let mut rec = RecordingProvider::new(inner);
        let c1 = [Message::user("p1")];
        let c2 = [Message::user("p2")];
        rec.complete(&c1, &CompletionParams::default()).unwrap();
        rec.complete(&c2, &CompletionParams::default()).unwrap();
        let (_, transcript) = rec.into_parts();
        let mut replay = ReplayProvider::new(transcript);
        assert_eq!(
            replay.complete(&c1, &CompletionParams::default()).unwrap(),
            "one"
        );
        assert!(replay.complete(&c1, &CompletionParams::default()).is_err());
    }

    #[test]
    fn transcript_jsonl_optional_hash() {
        let p = ReplayProvider::from_jsonl(
            "{\"response\":\"hi\"}\n\n{\"expect_prompt_hash\":\"ab\",\"response\":\"x\"}\n",
        )
        .unwrap();
        assert_eq!(p.remaining(), 2);
    }

    #[test]
    fn classifier_parses_axis_words() {
        let mut c = LlmClassifier::new(
            ReplayProvider::from_responses(["Yes.", "simple", "Temporal", "spatial", "maybe"]),
            CompletionParams::default(),
        );
        assert!(c.classify(Axis::Contextual, "q?").unwrap());
        assert!(!c.classify(Axis::Situational, "q?").unwrap());
        assert!(c
            .classify(Axis::Temporal, "Was someone sleeping in the bedroom today?")
            .unwrap());
        assert!(!c
            .classify(Axis::Temporal, "Is the kitchen ready for cooking?")
            .unwrap());
        assert!(matches!(
            c.classify(Axis::Contextual, "q?"),
            Err(ProviderError::BadResponse(_))
        ));
        let seen = c.into_inner();
        assert!(seen.seen()[2][0]
            .content
            .ends_with("Was someone sleeping in the bedroom today?"));
    }

    #[test]
    fn leading_token_skips_punctuation() {
        assert_eq!(leading_token("  **Yes**, the room"), Some("yes".into()));
        assert_eq!(leading_token("..."), None);
    }
}
