//! LLM-powered atomic operations.
//!
//! Each [`OpKind`] is a text-to-text transformation with a fixed set of
//! required input keys and required output keys. A request is rendered into
//! a prompt whose first line is a header naming the operation, sent to a
//! [`CompletionBackend`], and the completion is scanned for tagged lines
//! (`QUERY:`, `Q:`, `A:`).

mod mock;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use mock::{mock_complete, MockBackend};
pub use remote::RemoteBackend;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("{kind}: missing required input {key:?}")]
    MissingInput { kind: OpKind, key: &'static str },
    #[error("{kind}: response lacks a non-empty {tag:?} line")]
    UnparseableResponse { kind: OpKind, tag: &'static str },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("prompt does not come from a known template")]
    UnknownTemplate,
    #[error("unknown atomic operation {0:?}")]
    UnknownOp(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Caption2Query,
    Caption2QaQ,
    DriveHs,
    DriveIH,
    Query2DepQ,
    Caption2QaQDep,
    DriveHsDep,
    DriveIHDep,
    QFromCaption,
    AFromCaption,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Caption2Query,
        OpKind::Caption2QaQ,
        OpKind::DriveHs,
        OpKind::DriveIH,
        OpKind::Query2DepQ,
        OpKind::Caption2QaQDep,
        OpKind::DriveHsDep,
        OpKind::DriveIHDep,
        OpKind::QFromCaption,
        OpKind::AFromCaption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Caption2Query => "caption2query",
            OpKind::Caption2QaQ => "caption2QA_q",
            OpKind::DriveHs => "drive_hs",
            OpKind::DriveIH => "drive_i_h",
            OpKind::Query2DepQ => "query2dep_q",
            OpKind::Caption2QaQDep => "caption2QA_q_dep",
            OpKind::DriveHsDep => "drive_hs_dep",
            OpKind::DriveIHDep => "drive_i_h_dep",
            OpKind::QFromCaption => "Q_from_caption",
            OpKind::AFromCaption => "A_from_caption",
        }
    }

    pub fn required_inputs(self) -> &'static [&'static str] {
        match self {
            OpKind::Caption2Query
            | OpKind::Caption2QaQ
            | OpKind::Caption2QaQDep
            | OpKind::QFromCaption => &["caption"],
            OpKind::DriveHs | OpKind::DriveHsDep => &["caption_a", "caption_b"],
            OpKind::DriveIH | OpKind::DriveIHDep => &["caption_history"],
            OpKind::Query2DepQ => &["query", "target_caption"],
            OpKind::AFromCaption => &["caption", "question"],
        }
    }

    /// Output keys paired with the response tag that carries each.
    pub fn required_outputs(self) -> &'static [(&'static str, &'static str)] {
        match self {
            OpKind::Caption2QaQ | OpKind::Caption2QaQDep => {
                &[("q", "Q:"), ("a", "A:"), ("query", "QUERY:")]
            }
            OpKind::QFromCaption => &[("q", "Q:")],
            OpKind::AFromCaption => &[("a", "A:")],
            _ => &[("query", "QUERY:")],
        }
    }

    fn header(self) -> String {
        format!("### atomic-op: {}", self.name())
    }

    fn instructions(self) -> &'static str {
        match self {
            OpKind::Caption2Query => {
                "Rewrite the image caption below as a natural request a user would type \
                 to ask an assistant to generate that image."
            }
            OpKind::Caption2QaQ => {
                "Write a general-knowledge question a user might ask about the main subject \
                 of the caption below, a factual answer, and then a short generic follow-up \
                 request asking the assistant to create an image of it (for example \
                 \"Create one for me\")."
            }
            OpKind::DriveHs => {
                "The two captions below describe subjects generated in the two previous turns. \
                 Write a short user request asking to combine both subjects in one new image \
                 (for example \"Draw them together\")."
            }
            OpKind::DriveIH => {
                "The caption below describes a subject generated in the previous turn. The user \
                 has also uploaded an image with this message. Write a short user request asking \
                 to combine the generated subject with the subject of the uploaded image \
                 (for example \"Put them together\")."
            }
            OpKind::Query2DepQ => {
                "The user query below was issued several turns after the image it refers to, \
                 with unrelated turns in between. Rewrite it into a specific, explicit \
                 instruction that identifies the target image using its caption, so it is \
                 unambiguous without the immediately preceding turn."
            }
            OpKind::Caption2QaQDep => {
                "Write a general-knowledge question about the main subject of the caption below, \
                 a factual answer, and then a follow-up request that explicitly refers back to \
                 the subject discussed earlier in the conversation (for example \"Generate the \
                 dog we discussed earlier\")."
            }
            OpKind::DriveHsDep => {
                "The two captions below describe subjects generated in earlier turns, separated \
                 from the current turn by unrelated conversation. Write a user request that \
                 explicitly names both subjects and asks to draw them together in the next image."
            }
            OpKind::DriveIHDep => {
                "The caption below describes a subject generated several turns ago, separated \
                 from the current turn by unrelated conversation. The user has uploaded an image \
                 with this message. Write a user request that explicitly names the earlier \
                 subject and asks to combine it with \"this image I uploaded\"."
            }
            OpKind::QFromCaption => {
                "Write one relevant general-knowledge question inspired by the image caption below."
            }
            OpKind::AFromCaption => {
                "Answer the question below factually and concisely. The caption describes the \
                 image the question is about."
            }
        }
    }

    fn from_header(line: &str) -> Option<OpKind> {
        let name = line.strip_prefix("### atomic-op: ")?.trim();
        name.parse().ok()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = OpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| OpError::UnknownOp(s.to_string()))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRequest {
    pub kind: OpKind,
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
}

impl OpRequest {
    pub fn new<'a>(
        kind: OpKind,
        inputs: impl IntoIterator<Item = (&'a str, &'a str)>,
        seed: u64,
    ) -> Self {
        OpRequest {
            kind,
            inputs: inputs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            seed,
        }
    }

    fn input(&self, key: &'static str) -> Result<&str, OpError> {
        self.inputs
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.trim().is_empty())
            .ok_or(OpError::MissingInput {
                kind: self.kind,
                key,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpResponse {
    pub kind: OpKind,
    pub fields: BTreeMap<String, String>,
    pub raw: String,
}

impl OpResponse {
    /// A required output field. Parsing guarantees presence.
    pub fn field(&self, key: &str) -> &str {
        self.fields.get(key).map(String::as_str).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_length: u32,
    pub temperature: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            max_length: 512,
            temperature: 0.7,
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(
        &self,
        prompt: &str,
        seed: u64,
        params: &CompletionParams,
    ) -> Result<String, OpError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(
        &self,
        prompt: &str,
        seed: u64,
        params: &CompletionParams,
    ) -> Result<String, OpError> {
        (**self).complete(prompt, seed, params)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(
        &self,
        prompt: &str,
        seed: u64,
        params: &CompletionParams,
    ) -> Result<String, OpError> {
        (**self).complete(prompt, seed, params)
    }
}

pub(crate) const INPUT_OPEN: &str = "[";
pub(crate) const INPUT_CLOSE: &str = "[/";

pub fn render_prompt(req: &OpRequest) -> Result<String, OpError> {
    let kind = req.kind;
    let mut out = kind.header();
    out.push_str("\n\n");
    out.push_str(kind.instructions());
    out.push_str("\n\nRespond with exactly these lines and nothing else:\n");
    for (key, tag) in kind.required_outputs() {
        out.push_str(&format!("{tag} <{key}>\n"));
    }
    for &key in kind.required_inputs() {
        let value = req.input(key)?;
        out.push_str(&format!(
            "\n{INPUT_OPEN}{key}]\n{value}\n{INPUT_CLOSE}{key}]\n"
        ));
    }
    Ok(out)
}

/// Strips markdown decoration a chat model may wrap around a tagged line.
fn clean_line(line: &str) -> &str {
    line.trim().trim_start_matches(|c: char| {
        matches!(c, '*' | '_' | '`' | '>' | '#' | '-') || c.is_whitespace()
    })
}

pub fn parse_response(kind: OpKind, raw: &str) -> Result<OpResponse, OpError> {
    let mut fields = BTreeMap::new();
    for &(key, tag) in kind.required_outputs() {
        let value = raw
            .lines()
            .map(clean_line)
            .find_map(|line| line.strip_prefix(tag))
            .map(|payload| {
                payload.trim_matches(|c: char| c.is_whitespace() || c == '*' || c == '`')
            })
            .filter(|payload| !payload.is_empty())
            .ok_or(OpError::UnparseableResponse { kind, tag })?;
        fields.insert(key.to_string(), value.to_string());
    }
    Ok(OpResponse {
        kind,
        fields,
        raw: raw.to_string(),
    })
}

/// Render, complete, parse. Failed attempts are retried with
/// `seed + attempt` up to `retries` more times.
pub fn invoke(
    req: &OpRequest,
    backend: &dyn CompletionBackend,
    params: &CompletionParams,
    retries: u32,
) -> Result<OpResponse, OpError> {
    let prompt = render_prompt(req)?;
    let mut last_err = None;
    for attempt in 0..=retries {
        let seed = req.seed.wrapping_add(u64::from(attempt));
        match backend.complete(&prompt, seed, params) {
            Ok(raw) => match parse_response(req.kind, &raw) {
                Ok(resp) => return Ok(resp),
                Err(e) => last_err = Some(e),
            },
            Err(e @ OpError::BackendUnavailable(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Invokes many requests with at most `in_flight` running at once. Results
/// come back in input order.
pub fn invoke_batch(
    reqs: &[OpRequest],
    backend: &dyn CompletionBackend,
    params: &CompletionParams,
    retries: u32,
    in_flight: usize,
) -> Vec<Result<OpResponse, OpError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(in_flight.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        reqs.par_iter()
            .map(|r| invoke(r, backend, params, retries))
            .collect()
    })
}

/// Shared execution settings for stages that call the backend.
#[derive(Clone, Copy)]
pub struct OpContext<'a> {
    pub backend: &'a dyn CompletionBackend,
    pub params: CompletionParams,
    pub retries: u32,
}

impl<'a> OpContext<'a> {
    pub fn new(backend: &'a dyn CompletionBackend) -> Self {
        OpContext {
            backend,
            params: CompletionParams::default(),
            retries: 2,
        }
    }

    pub fn call<'k>(
        &self,
        kind: OpKind,
        inputs: impl IntoIterator<Item = (&'k str, &'k str)>,
        seed: u64,
    ) -> Result<OpResponse, OpError> {
        invoke(
            &OpRequest::new(kind, inputs, seed),
            self.backend,
            &self.params,
            self.retries,
        )
    }
}
