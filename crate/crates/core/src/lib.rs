//! Synthetic multi-turn image dialogue construction and the token-stream
//! layout used to train on it.
//!
//! * [`taxonomy`]: four-field task signatures.
//! * [`dialogue`]: the dialogue schema and its validator.
//! * [`ops`]: prompt-level atomic operations over a completion backend.
//! * [`stage_a`], [`stage_b`], [`stage_c`]: base construction, distractor
//!   insertion and interleaved-output augmentation.
//! * [`stream`]: serialization to typed token blocks and the attention mask.
//! * [`pack`]: weighted sampling and sequence packing.

pub mod dialogue;
pub mod jsonl;
pub mod ops;
pub mod pack;
pub mod pipeline;
pub mod stage_a;
pub mod stage_b;
pub mod stage_c;
pub mod stream;
pub mod taxonomy;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/signatures.md")]
    mod signatures {}
    #[doc = include_str!("../../../book/src/dialogues.md")]
    mod dialogues {}
    #[doc = include_str!("../../../book/src/atomic-ops.md")]
    mod atomic_ops {}
    #[doc = include_str!("../../../book/src/stages.md")]
    mod stages {}
    #[doc = include_str!("../../../book/src/streams.md")]
    mod streams {}
    #[doc = include_str!("../../../book/src/packing.md")]
    mod packing {}
}
