//! Deterministic stand-in for a chat model.
//!
//! The mock reads the operation header and the substituted inputs back out
//! of a rendered prompt and answers with fixed string rules. It ignores the
//! seed, so the same prompt always yields the same bytes.

use std::collections::BTreeMap;

use super::{CompletionBackend, CompletionParams, OpError, OpKind, INPUT_CLOSE, INPUT_OPEN};

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl CompletionBackend for MockBackend {
    fn complete(
        &self,
        prompt: &str,
        seed: u64,
        _params: &CompletionParams,
    ) -> Result<String, OpError> {
        mock_complete(prompt, seed)
    }
}

fn extract_inputs(prompt: &str) -> BTreeMap<&str, String> {
    let mut inputs = BTreeMap::new();
    let mut lines = prompt.lines();
    while let Some(line) = lines.next() {
        let Some(key) = line
            .strip_prefix(INPUT_OPEN)
            .and_then(|rest| rest.strip_suffix(']'))
            .filter(|k| !k.starts_with('/') && !k.is_empty())
        else {
            continue;
        };
        let close = format!("{INPUT_CLOSE}{key}]");
        let mut body = Vec::new();
        for inner in lines.by_ref() {
            if inner == close {
                break;
            }
            body.push(inner);
        }
        inputs.insert(key, body.join("\n"));
    }
    inputs
}

pub fn mock_complete(prompt: &str, _seed: u64) -> Result<String, OpError> {
    let kind = prompt
        .lines()
        .next()
        .and_then(OpKind::from_header)
        .ok_or(OpError::UnknownTemplate)?;
    let inputs = extract_inputs(prompt);
    let get = |key: &str| inputs.get(key).map(String::as_str).unwrap_or_default();

    let out = match kind {
        OpKind::Caption2Query => format!("QUERY: Please generate an image of {}", get("caption")),
        OpKind::Caption2QaQ => format!(
            "Q: What can you tell me about {caption}?\n\
             A: It is {caption}.\n\
             QUERY: Create one for me.",
            caption = get("caption")
        ),
        OpKind::DriveHs => format!(
            "QUERY: Draw them together: {} and {}.",
            get("caption_a"),
            get("caption_b")
        ),
        OpKind::DriveIH => format!(
            "QUERY: Put {} together with this image I uploaded.",
            get("caption_history")
        ),
        OpKind::Query2DepQ => format!(
            "QUERY: {} \u{2014} apply this to the image showing: {}",
            get("query"),
            get("target_caption")
        ),
        OpKind::Caption2QaQDep => format!(
            "Q: What can you tell me about {caption}?\n\
             A: It is {caption}.\n\
             QUERY: Generate {caption}, the one we discussed earlier.",
            caption = get("caption")
        ),
        OpKind::DriveHsDep => format!(
            "QUERY: Draw {} and {} from our earlier turns together in the next image.",
            get("caption_a"),
            get("caption_b")
        ),
        OpKind::DriveIHDep => format!(
            "QUERY: Draw {} from earlier together with this image I uploaded.",
            get("caption_history")
        ),
        OpKind::QFromCaption => format!("Q: What is notable about {}?", get("caption")),
        OpKind::AFromCaption => format!(
            "A: Regarding \"{}\": the image shows {}.",
            get("question"),
            get("caption")
        ),
    };
    Ok(out)
}
