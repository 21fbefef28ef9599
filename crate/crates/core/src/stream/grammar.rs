use std::fmt;

use serde::Serialize;

use super::{BlockKind, Loss, SpecialToken, TokenBlock, TokenStream};
use crate::dialogue::{Dialogue, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamViolation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    pub message: String,
}

impl fmt::Display for StreamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "block {b}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn violation(block: Option<usize>, message: impl Into<String>) -> StreamViolation {
    StreamViolation {
        block,
        message: message.into(),
    }
}

/// Structure of one round as recovered from a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSkeleton {
    pub user_upload: Option<String>,
    pub assistant_image: Option<String>,
    pub assistant_text: bool,
}

pub fn dialogue_skeleton(d: &Dialogue) -> Vec<RoundSkeleton> {
    d.rounds
        .iter()
        .map(|r| {
            let asst = r.assistant.as_ref();
            RoundSkeleton {
                user_upload: r.user.images().next().map(|i| i.id.clone()),
                assistant_image: asst.and_then(|t| t.images().next()).map(|i| i.id.clone()),
                assistant_text: asst.is_some_and(|t| t.has_text()),
            }
        })
        .collect()
}

struct Parser<'a> {
    blocks: &'a [TokenBlock],
    pos: usize,
    round: usize,
    role: Role,
    /// Loss each consumed block must carry.
    expected: Vec<Loss>,
}

impl<'a> Parser<'a> {
    /// Next block is `tok` and belongs to the current role. A user upload
    /// and an assistant image both open with `|v_s|`; the role decides.
    fn peek_special(&self, tok: SpecialToken) -> bool {
        self.blocks
            .get(self.pos)
            .is_some_and(|b| b.is_special(tok) && b.role == self.role)
    }

    fn take(
        &mut self,
        what: &str,
        ok: impl Fn(&TokenBlock) -> bool,
        loss: Loss,
    ) -> Result<&'a TokenBlock, StreamViolation> {
        let Some(b) = self.blocks.get(self.pos) else {
            return Err(violation(
                None,
                format!("stream ends where {what} is expected"),
            ));
        };
        let at = Some(self.pos);
        if !ok(b) {
            return Err(violation(at, format!("expected {what}")));
        }
        if b.role != self.role {
            return Err(violation(
                at,
                format!("{what} must belong to the {} turn", self.role),
            ));
        }
        if b.round != self.round {
            return Err(violation(
                at,
                format!("round index {} where {} expected", b.round, self.round),
            ));
        }
        self.pos += 1;
        self.expected.push(loss);
        Ok(b)
    }

    fn special(&mut self, tok: SpecialToken, loss: Loss) -> Result<(), StreamViolation> {
        self.take(tok.literal(), |b| b.is_special(tok), loss)
            .map(|_| ())
    }

    fn kind(&mut self, kind: BlockKind, loss: Loss) -> Result<&'a TokenBlock, StreamViolation> {
        self.take(&format!("{kind:?}"), |b| b.kind == kind, loss)
    }

    /// `|v_s| VIT VAE_CLEAN |v_e|`, returning the image id.
    fn clean_image(&mut self) -> Result<Option<String>, StreamViolation> {
        self.special(SpecialToken::VisionStart, Loss::None)?;
        let vit = self.kind(BlockKind::Vit, Loss::None)?;
        let at = self.pos;
        let vae = self.kind(BlockKind::VaeClean, Loss::None)?;
        if vit.image_id != vae.image_id {
            return Err(violation(
                Some(at),
                "VIT and clean VAE blocks name different images",
            ));
        }
        self.special(SpecialToken::VisionEnd, Loss::None)?;
        Ok(vit.image_id.clone())
    }

    fn text_part(&mut self, loss: Loss) -> Result<(), StreamViolation> {
        self.special(SpecialToken::ImStart, loss)?;
        self.kind(BlockKind::Text, loss)?;
        self.special(SpecialToken::ImEnd, loss)
    }

    fn round(&mut self) -> Result<RoundSkeleton, StreamViolation> {
        self.role = Role::User;
        self.text_part(Loss::None)?;
        let user_upload = if self.peek_special(SpecialToken::VisionStart) {
            self.clean_image()?
        } else {
            None
        };

        self.role = Role::Assistant;
        let mut assistant_image = None;
        if self.peek_special(SpecialToken::VisionStart) {
            self.special(SpecialToken::VisionStart, Loss::Ce)?;
            let noised = self.kind(BlockKind::VaeNoised, Loss::Mse)?;
            self.special(SpecialToken::VisionEnd, Loss::Ce)?;
            if self.peek_special(SpecialToken::VisionStart) {
                let at = self.pos;
                let replay = self.clean_image()?;
                if replay != noised.image_id {
                    return Err(violation(
                        Some(at),
                        "clean replay names a different image than the noised block",
                    ));
                }
            }
            assistant_image = noised.image_id.clone();
        }
        let assistant_text = self.peek_special(SpecialToken::ImStart);
        if assistant_text {
            self.text_part(Loss::Ce)?;
        }
        if assistant_image.is_none() && !assistant_text {
            return Err(violation(
                Some(self.pos),
                "assistant part has neither image nor text",
            ));
        }
        self.special(SpecialToken::End, Loss::Ce)?;
        Ok(RoundSkeleton {
            user_upload,
            assistant_image,
            assistant_text,
        })
    }

    fn rounds(&mut self) -> Result<Vec<RoundSkeleton>, StreamViolation> {
        let mut out = Vec::new();
        if self.blocks.is_empty() {
            return Err(violation(None, "stream has no rounds"));
        }
        while self.pos < self.blocks.len() {
            out.push(self.round()?);
            self.round += 1;
        }
        Ok(out)
    }
}

fn parse(s: &TokenStream) -> Result<(Vec<RoundSkeleton>, Vec<Loss>), StreamViolation> {
    let mut p = Parser {
        blocks: &s.blocks,
        pos: 0,
        round: 0,
        role: Role::User,
        expected: Vec::with_capacity(s.blocks.len()),
    };
    let rounds = p.rounds()?;
    Ok((rounds, p.expected))
}

/// Recovers round boundaries, roles and image ids from a stream.
pub fn parse_skeleton(s: &TokenStream) -> Result<Vec<RoundSkeleton>, StreamViolation> {
    parse(s).map(|(rounds, _)| rounds)
}

fn check_layout(s: &TokenStream, out: &mut Vec<StreamViolation>) {
    let mut pos = 0;
    for (i, b) in s.blocks.iter().enumerate() {
        let at = Some(i);
        if b.start != pos {
            out.push(violation(
                at,
                format!("starts at {} but previous block ends at {pos}", b.start),
            ));
        }
        if b.end != b.start + b.units {
            out.push(violation(at, "end - start differs from unit count"));
        }
        if b.units == 0 {
            out.push(violation(at, "zero units"));
        }
        let is_special = b.kind == BlockKind::Special;
        if is_special != b.tok.is_some() {
            out.push(violation(
                at,
                "special token literal present iff kind is special",
            ));
        }
        if is_special && b.units != 1 {
            out.push(violation(at, "special token must be one unit"));
        }
        let is_image = matches!(
            b.kind,
            BlockKind::Vit | BlockKind::VaeClean | BlockKind::VaeNoised
        );
        if is_image != b.image_id.is_some() {
            out.push(violation(at, "image id present iff block is visual"));
        }
        if (b.kind == BlockKind::VaeNoised) != (b.loss == Loss::Mse) {
            out.push(violation(at, "MSE loss iff noised latents"));
        }
        if matches!(b.kind, BlockKind::Vit | BlockKind::VaeClean) && b.loss != Loss::None {
            out.push(violation(at, "clean visual context carries no loss"));
        }
        if b.loss == Loss::Ce && b.role == Role::User {
            out.push(violation(at, "user tokens carry no loss"));
        }
        pos = b.start + b.units;
    }
    if s.total_len != pos {
        out.push(violation(
            None,
            format!("total_len {} but blocks cover {pos}", s.total_len),
        ));
    }
}

/// Grammar, layout and loss-tag checks. An empty result means valid.
pub fn validate_stream(s: &TokenStream) -> Vec<StreamViolation> {
    let mut out = Vec::new();
    check_layout(s, &mut out);
    match parse(s) {
        Ok((_, expected)) => {
            for (i, (b, want)) in s.blocks.iter().zip(expected).enumerate() {
                if b.loss == want {
                    continue;
                }
                let msg = match (b.kind, want) {
                    (BlockKind::Special, Loss::Ce) => "assistant special must be CE".to_string(),
                    (BlockKind::Text, Loss::Ce) => "assistant text must be CE".to_string(),
                    _ => format!("loss {:?} where {:?} expected", b.loss, want),
                };
                out.push(violation(Some(i), msg));
            }
        }
        Err(v) => out.push(v),
    }
    out
}
