//! Generalized causal attention over a token stream.
//!
//! A query at position `q` may attend to key `k` when either
//!
//! * both lie in the same noised-latent block (bidirectional inside it), or
//! * `k <= q` and `k` is not inside any noised-latent block.
//!
//! So every token sees all earlier text, ViT and clean-latent positions plus
//! itself, and noised latents are visible to nothing outside their own block.

use serde::Serialize;
use thiserror::Error;

use super::{BlockKind, TokenStream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("stream layout is inconsistent: {0}")]
    InvalidStream(String),
    #[error("stream of {len} positions exceeds the oracle limit of {max}")]
    StreamTooLong { len: usize, max: usize },
}

/// Dense boolean mask, row-major `[query][key]`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    fn new(len: usize) -> Self {
        AttentionMask {
            len,
            bits: vec![false; len * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.len + k]
    }

    fn set(&mut self, q: usize, k: usize) {
        self.bits[q * self.len + k] = true;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.len..(q + 1) * self.len]
    }

    /// Rows as `0`/`1` strings, for debugging output.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.len)
            .map(|q| {
                self.row(q)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }

    /// The top-left `n`×`n` corner.
    pub fn leading(&self, n: usize) -> AttentionMask {
        let mut out = AttentionMask::new(n);
        for q in 0..n {
            out.bits[q * n..(q + 1) * n].copy_from_slice(&self.row(q)[..n]);
        }
        out
    }
}

impl std::fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Within {
    /// Position `q` sees its own block up to and including itself.
    Causal,
    /// Every position sees the whole block.
    Full,
}

/// Run-length form of the mask for all queries in one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockVisibility {
    pub start: usize,
    pub end: usize,
    pub within: Within,
    /// Half-open key intervals before `start` that the block sees.
    pub visible: Vec<(usize, usize)>,
}

fn check_layout(s: &TokenStream) -> Result<(), MaskError> {
    let mut pos = 0;
    for (i, b) in s.blocks.iter().enumerate() {
        if b.start != pos || b.end != b.start + b.units || b.units == 0 {
            return Err(MaskError::InvalidStream(format!(
                "block {i} is not contiguous"
            )));
        }
        pos = b.end;
    }
    if pos != s.total_len {
        return Err(MaskError::InvalidStream(format!(
            "blocks cover {pos} positions, total_len is {}",
            s.total_len
        )));
    }
    Ok(())
}

/// Per-block visibility intervals; the compact form of [`build_mask`].
pub fn mask_runs(s: &TokenStream) -> Result<Vec<BlockVisibility>, MaskError> {
    check_layout(s)?;
    let mut prior: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(s.blocks.len());
    for b in &s.blocks {
        let noised = b.kind == BlockKind::VaeNoised;
        out.push(BlockVisibility {
            start: b.start,
            end: b.end,
            within: if noised { Within::Full } else { Within::Causal },
            visible: prior.clone(),
        });
        if !noised {
            match prior.last_mut() {
                Some(last) if last.1 == b.start => last.1 = b.end,
                _ => prior.push((b.start, b.end)),
            }
        }
    }
    Ok(out)
}

/// Dense mask built from [`mask_runs`].
pub fn build_mask(s: &TokenStream) -> Result<AttentionMask, MaskError> {
    let runs = mask_runs(s)?;
    let mut m = AttentionMask::new(s.total_len);
    for run in &runs {
        for q in run.start..run.end {
            for &(a, b) in &run.visible {
                m.bits[q * m.len + a..q * m.len + b].fill(true);
            }
            let upto = match run.within {
                Within::Full => run.end,
                Within::Causal => q + 1,
            };
            m.bits[q * m.len + run.start..q * m.len + upto].fill(true);
        }
    }
    Ok(m)
}

pub const ORACLE_MAX_LEN: usize = 512;

/// Evaluates the attention rule pair by pair. Test reference only.
pub fn mask_oracle(s: &TokenStream) -> Result<AttentionMask, MaskError> {
    if s.total_len > ORACLE_MAX_LEN {
        return Err(MaskError::StreamTooLong {
            len: s.total_len,
            max: ORACLE_MAX_LEN,
        });
    }
    check_layout(s)?;
    // Block index and noised flag of every position.
    let mut owner = Vec::with_capacity(s.total_len);
    for (i, b) in s.blocks.iter().enumerate() {
        for _ in 0..b.units {
            owner.push((i, b.kind == BlockKind::VaeNoised));
        }
    }
    let mut m = AttentionMask::new(s.total_len);
    for q in 0..s.total_len {
        for k in 0..s.total_len {
            let (qb, _) = owner[q];
            let (kb, k_noised) = owner[k];
            let same_noised_block = k_noised && qb == kb;
            let causal_clean = k <= q && !k_noised;
            if same_noised_block || causal_clean {
                m.set(q, k);
            }
        }
    }
    Ok(m)
}
