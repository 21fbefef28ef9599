//! Basic multi-turn construction: single-turn source records become
//! dialogues with dependency depth 0 or 1.
//!
//! | builder          | record          | rounds | signature   |
//! |------------------|-----------------|--------|-------------|
//! | `TextToImage`    | [`T2IRecord`]   | 1      | `t_i_0_0`   |
//! | `QaThenGenerate` | [`T2IRecord`]   | 2      | `t_i_t1_1`  |
//! | `SingleEdit`     | [`EditRecord`]  | 1      | `ti_i_0_0`  |
//! | `SequentialEdit` | [`EditRecord`]  | 2      | `t_i_i1_1`  |
//! | `SubjectPair`    | [`SubjectRecord`] | 3    | `t_i_in_1`  |
//! | `SubjectUpload`  | [`SubjectRecord`] | 2    | `ti_i_i1_1` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dialogue::{Dialogue, ImageRef, ImageSource, Provenance, Round, Segment, Stage, Turn};
use crate::ops::{OpContext, OpKind};
use crate::pipeline::{
    checked, collect, derive_seed, map_ordered, Outcome, Reject, StageOutput, SynthesisError,
};
use crate::taxonomy::TaskSignature;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct T2IRecord {
    pub id: String,
    pub caption: String,
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub instruction: String,
    pub source_image: ImageRef,
    pub target_image: ImageRef,
    pub source_caption: String,
    pub target_caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub caption: String,
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub subjects: Vec<Subject>,
    pub composed_image: ImageRef,
    pub composed_caption: String,
}

fn invalid(id: &str, msg: impl fmt::Display) -> SynthesisError {
    SynthesisError::InvalidRecord(format!("{id}: {msg}"))
}

fn require_text(id: &str, field: &str, value: &str) -> Result<(), SynthesisError> {
    if value.trim().is_empty() {
        Err(invalid(id, format_args!("{field} is empty")))
    } else {
        Ok(())
    }
}

fn require_dataset_image(id: &str, field: &str, img: &ImageRef) -> Result<(), SynthesisError> {
    if img.source != ImageSource::Dataset {
        return Err(invalid(id, format_args!("{field} must be a dataset image")));
    }
    if img.width == 0 || img.height == 0 {
        return Err(invalid(id, format_args!("{field} has zero size")));
    }
    Ok(())
}

impl T2IRecord {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        require_text(&self.id, "caption", &self.caption)?;
        require_dataset_image(&self.id, "image", &self.image)?;
        if let Some(c) = &self.image.caption {
            if c != &self.caption {
                return Err(invalid(
                    &self.id,
                    "image caption differs from record caption",
                ));
            }
        }
        Ok(())
    }
}

impl EditRecord {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        require_text(&self.id, "instruction", &self.instruction)?;
        require_dataset_image(&self.id, "source_image", &self.source_image)?;
        require_dataset_image(&self.id, "target_image", &self.target_image)?;
        if self.source_image.id == self.target_image.id {
            return Err(invalid(&self.id, "source and target image ids are equal"));
        }
        Ok(())
    }
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.subjects.len() != 2 {
            return Err(invalid(
                &self.id,
                format_args!("{} subjects, expected 2", self.subjects.len()),
            ));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.caption.trim().is_empty() {
                return Err(SynthesisError::MissingCaption(format!(
                    "{}: subject {i}",
                    self.id
                )));
            }
            require_dataset_image(&self.id, "subject image", &s.image)?;
        }
        if self.subjects[0].image.id == self.subjects[1].image.id {
            return Err(invalid(&self.id, "subject image ids are equal"));
        }
        require_text(&self.id, "composed_caption", &self.composed_caption)?;
        require_dataset_image(&self.id, "composed_image", &self.composed_image)
    }
}

/// One Stage (a) construction recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builder {
    TextToImage,
    QaThenGenerate,
    SingleEdit,
    SequentialEdit,
    SubjectPair,
    SubjectUpload,
}

impl Builder {
    pub const ALL: [Builder; 6] = [
        Builder::TextToImage,
        Builder::QaThenGenerate,
        Builder::SingleEdit,
        Builder::SequentialEdit,
        Builder::SubjectPair,
        Builder::SubjectUpload,
    ];

    pub fn signature_str(self) -> &'static str {
        match self {
            Builder::TextToImage => "t_i_0_0",
            Builder::QaThenGenerate => "t_i_t1_1",
            Builder::SingleEdit => "ti_i_0_0",
            Builder::SequentialEdit => "t_i_i1_1",
            Builder::SubjectPair => "t_i_in_1",
            Builder::SubjectUpload => "ti_i_i1_1",
        }
    }

    pub fn signature(self) -> TaskSignature {
        self.signature_str()
            .parse()
            .expect("builder signatures are valid")
    }

    pub fn record_kind(self) -> RecordKind {
        match self {
            Builder::TextToImage | Builder::QaThenGenerate => RecordKind::T2I,
            Builder::SingleEdit | Builder::SequentialEdit => RecordKind::Edit,
            Builder::SubjectPair | Builder::SubjectUpload => RecordKind::Subject,
        }
    }

    pub fn for_signature(sig: &TaskSignature) -> Option<Builder> {
        Builder::ALL.into_iter().find(|b| b.signature() == *sig)
    }
}

impl fmt::Display for Builder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.signature_str())
    }
}

impl FromStr for Builder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Builder::ALL
            .into_iter()
            .find(|b| b.signature_str() == s)
            .ok_or_else(|| format!("no stage (a) builder produces {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    T2I,
    Edit,
    Subject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceRecord {
    T2I(T2IRecord),
    Edit(EditRecord),
    Subject(SubjectRecord),
}

impl SourceRecord {
    pub fn id(&self) -> &str {
        match self {
            SourceRecord::T2I(r) => &r.id,
            SourceRecord::Edit(r) => &r.id,
            SourceRecord::Subject(r) => &r.id,
        }
    }
}

pub fn dialogue_id(record_id: &str, builder: Builder, seed: u64) -> String {
    format!("{record_id}.{builder}.{seed}")
}

struct Ctx<'a, 'b> {
    ops: &'a OpContext<'b>,
    id: String,
    seed: u64,
    calls: u32,
}

impl<'a, 'b> Ctx<'a, 'b> {
    fn new(ops: &'a OpContext<'b>, record_id: &str, builder: Builder, seed: u64) -> Self {
        Ctx {
            ops,
            id: dialogue_id(record_id, builder, seed),
            seed,
            calls: 0,
        }
    }

    fn call<'k>(
        &mut self,
        kind: OpKind,
        inputs: impl IntoIterator<Item = (&'k str, &'k str)>,
    ) -> Result<crate::ops::OpResponse, SynthesisError> {
        let purpose = format!("stage_a/{}", self.calls);
        self.calls += 1;
        let seed = derive_seed(self.seed, &self.id, &purpose);
        Ok(self.ops.call(kind, inputs, seed)?)
    }
}

fn text_turn(text: impl Into<String>, op: Option<OpKind>) -> Turn {
    Turn::new(
        vec![Segment::Text(text.into())],
        Provenance::new(Stage::A, op),
    )
}

fn image_turn(img: ImageRef) -> Turn {
    Turn::new(vec![Segment::Image(img)], Provenance::new(Stage::A, None))
}

fn generated(img: &ImageRef, caption: &str) -> ImageRef {
    ImageRef {
        caption: Some(caption.to_string()),
        ..img.with_source(ImageSource::Generated)
    }
}

fn generation_round(ctx: &mut Ctx, caption: &str, img: &ImageRef) -> Result<Round, SynthesisError> {
    let q = ctx.call(OpKind::Caption2Query, [("caption", caption)])?;
    Ok(Round::new(
        text_turn(q.field("query"), Some(OpKind::Caption2Query)),
        image_turn(generated(img, caption)),
    ))
}

fn assemble(
    ctx: Ctx,
    builder: Builder,
    rounds: Vec<Round>,
    targets: Vec<usize>,
) -> Result<Dialogue, SynthesisError> {
    let depth = if targets.is_empty() { None } else { Some(1) };
    checked(Dialogue {
        id: ctx.id,
        signature: builder.signature(),
        dep_target_rounds: targets,
        dep_depth_value: depth,
        rounds,
    })
}

pub fn build_t_i_0_0(
    rec: &T2IRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    rec.validate()?;
    let mut ctx = Ctx::new(ops, &rec.id, Builder::TextToImage, seed);
    let round = generation_round(&mut ctx, &rec.caption, &rec.image)?;
    assemble(ctx, Builder::TextToImage, vec![round], vec![])
}

pub fn build_t_i_t1_1(
    rec: &T2IRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    rec.validate()?;
    let mut ctx = Ctx::new(ops, &rec.id, Builder::QaThenGenerate, seed);
    let qa = ctx.call(OpKind::Caption2QaQ, [("caption", rec.caption.as_str())])?;
    let op = Some(OpKind::Caption2QaQ);
    let rounds = vec![
        Round::new(text_turn(qa.field("q"), op), text_turn(qa.field("a"), op)),
        Round::new(
            text_turn(qa.field("query"), op),
            image_turn(generated(&rec.image, &rec.caption)),
        ),
    ];
    assemble(ctx, Builder::QaThenGenerate, rounds, vec![0])
}

pub fn build_ti_i_0_0(rec: &EditRecord, seed: u64) -> Result<Dialogue, SynthesisError> {
    rec.validate()?;
    let upload = ImageRef {
        caption: Some(rec.source_caption.clone()).filter(|c| !c.trim().is_empty()),
        ..rec.source_image.with_source(ImageSource::Uploaded)
    };
    let target = ImageRef {
        caption: Some(rec.target_caption.clone()).filter(|c| !c.trim().is_empty()),
        ..rec.target_image.with_source(ImageSource::Generated)
    };
    let user = Turn::new(
        vec![
            Segment::Text(rec.instruction.clone()),
            Segment::Image(upload),
        ],
        Provenance::new(Stage::A, None),
    );
    let id = dialogue_id(&rec.id, Builder::SingleEdit, seed);
    checked(Dialogue {
        id,
        signature: Builder::SingleEdit.signature(),
        dep_target_rounds: vec![],
        dep_depth_value: None,
        rounds: vec![Round::new(user, image_turn(target))],
    })
}

pub fn build_t_i_i1_1(
    rec: &EditRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    if rec.source_caption.trim().is_empty() {
        return Err(SynthesisError::MissingCaption(format!(
            "{}: source_caption",
            rec.id
        )));
    }
    rec.validate()?;
    let mut ctx = Ctx::new(ops, &rec.id, Builder::SequentialEdit, seed);
    let first = generation_round(&mut ctx, &rec.source_caption, &rec.source_image)?;
    let target = ImageRef {
        caption: Some(rec.target_caption.clone()).filter(|c| !c.trim().is_empty()),
        ..rec.target_image.with_source(ImageSource::Generated)
    };
    let edit = Round::new(text_turn(rec.instruction.clone(), None), image_turn(target));
    assemble(ctx, Builder::SequentialEdit, vec![first, edit], vec![0])
}

pub fn build_t_i_in_1(
    rec: &SubjectRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    rec.validate()?;
    let mut ctx = Ctx::new(ops, &rec.id, Builder::SubjectPair, seed);
    let [a, b] = [&rec.subjects[0], &rec.subjects[1]];
    let r0 = generation_round(&mut ctx, &a.caption, &a.image)?;
    let r1 = generation_round(&mut ctx, &b.caption, &b.image)?;
    let q = ctx.call(
        OpKind::DriveHs,
        [
            ("caption_a", a.caption.as_str()),
            ("caption_b", b.caption.as_str()),
        ],
    )?;
    let r2 = Round::new(
        text_turn(q.field("query"), Some(OpKind::DriveHs)),
        image_turn(generated(&rec.composed_image, &rec.composed_caption)),
    );
    assemble(ctx, Builder::SubjectPair, vec![r0, r1, r2], vec![0, 1])
}

pub fn build_ti_i_i1_1(
    rec: &SubjectRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    rec.validate()?;
    let mut ctx = Ctx::new(ops, &rec.id, Builder::SubjectUpload, seed);
    let [a, b] = [&rec.subjects[0], &rec.subjects[1]];
    let r0 = generation_round(&mut ctx, &a.caption, &a.image)?;
    let q = ctx.call(OpKind::DriveIH, [("caption_history", a.caption.as_str())])?;
    let upload = ImageRef {
        caption: Some(b.caption.clone()),
        ..b.image.with_source(ImageSource::Uploaded)
    };
    let user = Turn::new(
        vec![
            Segment::Text(q.field("query").to_string()),
            Segment::Image(upload),
        ],
        Provenance::new(Stage::A, Some(OpKind::DriveIH)),
    );
    let r1 = Round::new(
        user,
        image_turn(generated(&rec.composed_image, &rec.composed_caption)),
    );
    assemble(ctx, Builder::SubjectUpload, vec![r0, r1], vec![0])
}

/// Runs one builder over a record of the matching kind.
pub fn build(
    builder: Builder,
    rec: &SourceRecord,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    match (builder, rec) {
        (Builder::TextToImage, SourceRecord::T2I(r)) => build_t_i_0_0(r, ops, seed),
        (Builder::QaThenGenerate, SourceRecord::T2I(r)) => build_t_i_t1_1(r, ops, seed),
        (Builder::SingleEdit, SourceRecord::Edit(r)) => build_ti_i_0_0(r, seed),
        (Builder::SequentialEdit, SourceRecord::Edit(r)) => build_t_i_i1_1(r, ops, seed),
        (Builder::SubjectPair, SourceRecord::Subject(r)) => build_t_i_in_1(r, ops, seed),
        (Builder::SubjectUpload, SourceRecord::Subject(r)) => build_ti_i_i1_1(r, ops, seed),
        _ => Err(invalid(
            rec.id(),
            format_args!("record type does not fit builder {builder}"),
        )),
    }
}

/// Builds every record; output order follows input order.
pub fn run_stage_a(
    records: &[SourceRecord],
    builder: Builder,
    ops: &OpContext,
    seed: u64,
    concurrency: usize,
) -> StageOutput {
    let outcomes = map_ordered(records, concurrency, |rec| {
        match build(builder, rec, ops, seed) {
            Ok(d) => Outcome::Done(d),
            Err(e) => Outcome::Failed(Reject::new(rec.id(), &e)),
        }
    });
    collect(outcomes)
}
