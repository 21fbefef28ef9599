//! Plumbing shared by the synthesis stages: error type, per-record seeds,
//! order-preserving parallel map, and the per-stage result bundle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialogue::{Dialogue, DialogueError};
use crate::ops::OpError;
use crate::taxonomy::{TaskSignature, TaxonomyError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("missing caption: {0}")]
    MissingCaption(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("expected a depth-1 dialogue, got {0}")]
    WrongDepth(TaskSignature),
    #[error("distractor count must be at least 1")]
    InvalidDistractorCount,
    #[error("distractor pool has {have} entries, {need} requested")]
    PoolExhausted { need: usize, have: usize },
    #[error("insertion plan does not fit the dialogue: {0}")]
    PlanMismatch(String),
    #[error("no history-dependent rewrite for signature {0}")]
    UnsupportedSignature(TaskSignature),
    #[error("final turn already produces interleaved output")]
    AlreadyInterleaved,
    #[error("produced dialogue fails validation: {0}")]
    InvalidOutput(String),
}

impl SynthesisError {
    /// Transport failures are run-level problems, not record-level ones.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, SynthesisError::Op(OpError::BackendUnavailable(_)))
    }
}

/// Derives an independent seed for one record and purpose from the run's
/// root seed. Stable across platforms and thread schedules.
pub fn derive_seed(root: u64, record_id: &str, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0]);
    h.update(record_id.as_bytes());
    h.update([0]);
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Maps `f` over `items` on at most `concurrency` threads; output order is
/// input order.
pub fn map_ordered<T, R, F>(items: &[T], concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if concurrency <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub error: String,
    #[serde(default)]
    pub backend_failure: bool,
}

impl Reject {
    pub fn new(id: impl Into<String>, err: &SynthesisError) -> Self {
        Reject {
            id: id.into(),
            error: err.to_string(),
            backend_failure: err.is_backend_failure(),
        }
    }
}

/// What a stage run produced. Skipped dialogues are passed through
/// unchanged and also appear in `dialogues`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutput {
    pub dialogues: Vec<Dialogue>,
    pub rejects: Vec<Reject>,
    pub skipped: Vec<String>,
}

impl StageOutput {
    pub fn backend_failures(&self) -> usize {
        self.rejects.iter().filter(|r| r.backend_failure).count()
    }
}

pub(crate) enum Outcome {
    Done(Dialogue),
    Skipped(Dialogue),
    Failed(Reject),
}

pub(crate) fn collect(outcomes: Vec<Outcome>) -> StageOutput {
    let mut out = StageOutput::default();
    for o in outcomes {
        match o {
            Outcome::Done(d) => out.dialogues.push(d),
            Outcome::Skipped(d) => {
                out.skipped.push(d.id.clone());
                out.dialogues.push(d);
            }
            Outcome::Failed(r) => out.rejects.push(r),
        }
    }
    out
}

/// Rejects a produced dialogue that breaks an invariant instead of emitting it.
pub(crate) fn checked(d: Dialogue) -> Result<Dialogue, SynthesisError> {
    let report = crate::dialogue::validate_dialogue(&d);
    if report.is_valid() {
        Ok(d)
    } else {
        let msgs: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
        Err(SynthesisError::InvalidOutput(msgs.join("; ")))
    }
}
