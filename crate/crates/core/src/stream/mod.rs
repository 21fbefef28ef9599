//! Serialization of dialogues into the special-token training stream.
//!
//! Every round becomes a user part followed by an assistant part:
//!
//! ```text
//! user       |im_s| TEXT |im_e| ( |v_s| VIT VAE_CLEAN |v_e| )?
//! assistant  ( |v_s| VAE_NOISED |v_e| ( |v_s| VIT VAE_CLEAN |v_e| )? )?
//!            ( |im_s| TEXT |im_e| )?
//!            |end|
//! ```
//!
//! Only assistant output is supervised: noised latents with MSE, assistant
//! text and the specials the assistant emits with cross-entropy. The clean
//! replay of a generated image is context for later rounds and carries no
//! loss.

pub mod grammar;
pub mod mask;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{Dialogue, ImageRef, Role, Turn};

pub use grammar::{
    dialogue_skeleton, parse_skeleton, validate_stream, RoundSkeleton, StreamViolation,
};
pub use mask::{
    build_mask, mask_oracle, mask_runs, AttentionMask, BlockVisibility, MaskError, Within,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("round {round}: {role} turn has no text")]
    EmptyText { round: usize, role: Role },
    #[error("image {image_id}: {units} units exceed the cap of {cap}")]
    UnitOverflow {
        image_id: String,
        units: usize,
        cap: usize,
    },
    #[error("image {image_id}: unit function returned 0")]
    ZeroUnits { image_id: String },
    #[error("round {round}: {reason}")]
    UnsupportedLayout { round: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecialToken {
    #[serde(rename = "|im_s|")]
    ImStart,
    #[serde(rename = "|im_e|")]
    ImEnd,
    #[serde(rename = "|v_s|")]
    VisionStart,
    #[serde(rename = "|v_e|")]
    VisionEnd,
    #[serde(rename = "|end|")]
    End,
}

impl SpecialToken {
    pub fn literal(self) -> &'static str {
        match self {
            SpecialToken::ImStart => "|im_s|",
            SpecialToken::ImEnd => "|im_e|",
            SpecialToken::VisionStart => "|v_s|",
            SpecialToken::VisionEnd => "|v_e|",
            SpecialToken::End => "|end|",
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.literal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Special,
    Text,
    Vit,
    VaeClean,
    VaeNoised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    None,
    Ce,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tok: Option<SpecialToken>,
    pub units: usize,
    pub round: usize,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub loss: Loss,
    pub start: usize,
    pub end: usize,
}

impl TokenBlock {
    pub fn is_special(&self, tok: SpecialToken) -> bool {
        self.kind == BlockKind::Special && self.tok == Some(tok)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub dialogue_id: String,
    pub total_len: usize,
    pub blocks: Vec<TokenBlock>,
}

pub type TextUnits = Arc<dyn Fn(&str) -> usize + Send + Sync>;
pub type ImageUnits = Arc<dyn Fn(u32, u32) -> usize + Send + Sync>;

/// Unit-count functions and layout switches for [`serialize`].
#[derive(Clone)]
pub struct StreamConfig {
    pub text_units: TextUnits,
    pub vit_units: ImageUnits,
    pub vae_units: ImageUnits,
    /// Any image block larger than this is an error.
    pub max_image_units: usize,
    pub replay_clean_after_noised: bool,
}

impl fmt::Debug for StreamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamConfig")
            .field("max_image_units", &self.max_image_units)
            .field("replay_clean_after_noised", &self.replay_clean_after_noised)
            .finish_non_exhaustive()
    }
}

fn patches(w: u32, h: u32, patch: u32) -> usize {
    (w.div_ceil(patch) as usize) * (h.div_ceil(patch) as usize)
}

/// Serializable knobs for the default unit functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSettings {
    pub vit_patch: u32,
    pub vit_max_units: usize,
    pub vae_patch: u32,
    pub max_image_units: usize,
    pub replay_clean_after_noised: bool,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings {
            vit_patch: 14,
            vit_max_units: 4096,
            vae_patch: 16,
            max_image_units: 16384,
            replay_clean_after_noised: true,
        }
    }
}

impl From<StreamSettings> for StreamConfig {
    fn from(s: StreamSettings) -> Self {
        let (vit_patch, vit_max, vae_patch) =
            (s.vit_patch.max(1), s.vit_max_units, s.vae_patch.max(1));
        StreamConfig {
            text_units: Arc::new(|t: &str| t.split_whitespace().count()),
            vit_units: Arc::new(move |w, h| patches(w, h, vit_patch).min(vit_max)),
            vae_units: Arc::new(move |w, h| patches(w, h, vae_patch)),
            max_image_units: s.max_image_units,
            replay_clean_after_noised: s.replay_clean_after_noised,
        }
    }
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamSettings::default().into()
    }
}

struct Emitter<'a> {
    cfg: &'a StreamConfig,
    blocks: Vec<TokenBlock>,
    pos: usize,
    round: usize,
    role: Role,
}

impl Emitter<'_> {
    fn push(
        &mut self,
        kind: BlockKind,
        tok: Option<SpecialToken>,
        units: usize,
        image_id: Option<&str>,
        loss: Loss,
    ) {
        self.blocks.push(TokenBlock {
            kind,
            tok,
            units,
            round: self.round,
            role: self.role,
            image_id: image_id.map(String::from),
            loss,
            start: self.pos,
            end: self.pos + units,
        });
        self.pos += units;
    }

    fn special(&mut self, tok: SpecialToken, loss: Loss) {
        self.push(BlockKind::Special, Some(tok), 1, None, loss);
    }

    fn image_units(&self, img: &ImageRef, f: &ImageUnits) -> Result<usize, StreamError> {
        let units = f(img.width, img.height);
        if units == 0 {
            return Err(StreamError::ZeroUnits {
                image_id: img.id.clone(),
            });
        }
        if units > self.cfg.max_image_units {
            return Err(StreamError::UnitOverflow {
                image_id: img.id.clone(),
                units,
                cap: self.cfg.max_image_units,
            });
        }
        Ok(units)
    }

    fn text(&mut self, turn: &Turn, loss: Loss) -> Result<(), StreamError> {
        let text = turn.joined_text();
        let units = if text.trim().is_empty() {
            0
        } else {
            (self.cfg.text_units)(&text)
        };
        if units == 0 {
            return Err(StreamError::EmptyText {
                round: self.round,
                role: self.role,
            });
        }
        self.special(SpecialToken::ImStart, loss);
        self.push(BlockKind::Text, None, units, None, loss);
        self.special(SpecialToken::ImEnd, loss);
        Ok(())
    }

    /// `|v_s| VIT VAE_CLEAN |v_e|`, never supervised.
    fn clean_image(&mut self, img: &ImageRef) -> Result<(), StreamError> {
        let vit = self.image_units(img, &self.cfg.vit_units)?;
        let vae = self.image_units(img, &self.cfg.vae_units)?;
        self.special(SpecialToken::VisionStart, Loss::None);
        self.push(BlockKind::Vit, None, vit, Some(&img.id), Loss::None);
        self.push(BlockKind::VaeClean, None, vae, Some(&img.id), Loss::None);
        self.special(SpecialToken::VisionEnd, Loss::None);
        Ok(())
    }

    fn generated_image(&mut self, img: &ImageRef) -> Result<(), StreamError> {
        let vae = self.image_units(img, &self.cfg.vae_units)?;
        self.special(SpecialToken::VisionStart, Loss::Ce);
        self.push(BlockKind::VaeNoised, None, vae, Some(&img.id), Loss::Mse);
        self.special(SpecialToken::VisionEnd, Loss::Ce);
        if self.cfg.replay_clean_after_noised {
            self.clean_image(img)?;
        }
        Ok(())
    }
}

pub fn serialize(d: &Dialogue, cfg: &StreamConfig) -> Result<TokenStream, StreamError> {
    let mut em = Emitter {
        cfg,
        blocks: Vec::new(),
        pos: 0,
        round: 0,
        role: Role::User,
    };
    for (i, round) in d.rounds.iter().enumerate() {
        let layout = |reason: &str| StreamError::UnsupportedLayout {
            round: i,
            reason: reason.to_string(),
        };
        em.round = i;
        em.role = Role::User;
        let uploads: Vec<&ImageRef> = round.user.images().collect();
        if uploads.len() > 1 {
            return Err(layout("user turn has more than one image"));
        }
        em.text(&round.user, Loss::None)?;
        if let Some(img) = uploads.first() {
            em.clean_image(img)?;
        }

        let asst = round
            .assistant
            .as_ref()
            .ok_or_else(|| layout("missing assistant turn"))?;
        em.role = Role::Assistant;
        let images: Vec<&ImageRef> = asst.images().collect();
        if images.len() > 1 {
            return Err(layout("assistant turn has more than one image"));
        }
        if asst.segments.is_empty() {
            return Err(layout("assistant turn is empty"));
        }
        if let Some(img) = images.first() {
            em.generated_image(img)?;
        }
        if asst.has_text() {
            em.text(asst, Loss::Ce)?;
        }
        em.special(SpecialToken::End, Loss::Ce);
    }
    Ok(TokenStream {
        dialogue_id: d.id.clone(),
        total_len: em.pos,
        blocks: em.blocks,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSummary {
    pub ce_positions: usize,
    pub mse_positions: usize,
    pub none_positions: usize,
}

impl LossSummary {
    pub fn total(&self) -> usize {
        self.ce_positions + self.mse_positions + self.none_positions
    }
}

impl std::ops::AddAssign for LossSummary {
    fn add_assign(&mut self, rhs: Self) {
        self.ce_positions += rhs.ce_positions;
        self.mse_positions += rhs.mse_positions;
        self.none_positions += rhs.none_positions;
    }
}

pub fn loss_summary(s: &TokenStream) -> LossSummary {
    let mut out = LossSummary::default();
    for b in &s.blocks {
        match b.loss {
            Loss::Ce => out.ce_positions += b.units,
            Loss::Mse => out.mse_positions += b.units,
            Loss::None => out.none_positions += b.units,
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn block(
        kind: BlockKind,
        tok: Option<SpecialToken>,
        units: usize,
        start: usize,
    ) -> TokenBlock {
        TokenBlock {
            kind,
            tok,
            units,
            round: 0,
            role: Role::Assistant,
            image_id: None,
            loss: Loss::None,
            start,
            end: start + units,
        }
    }

    /// Lays out `(kind, units)` pairs contiguously.
    pub fn layout(parts: &[(BlockKind, usize)]) -> TokenStream {
        let mut pos = 0;
        let blocks = parts
            .iter()
            .map(|&(kind, units)| {
                let tok = (kind == BlockKind::Special).then_some(SpecialToken::ImStart);
                let b = block(kind, tok, units, pos);
                pos += units;
                b
            })
            .collect();
        TokenStream {
            dialogue_id: "layout".into(),
            total_len: pos,
            blocks,
        }
    }
}
