//! Conversation data model: rounds of user/assistant turns made of text and
//! image segments, plus the dependency annotation that ties the final request
//! to earlier rounds.
//!
//! Dependency depth is measured in rounds. A dialogue whose final request
//! edits the image generated one round earlier has depth 1. When the final
//! request references several rounds, the depth is the separation to the
//! *nearest* of them.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::OpKind;
use crate::taxonomy::{
    DependencyDepth, DependencyModality, DepthKind, InputModality, OutputModality, TaskSignature,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogueError {
    #[error("dependency target round {target} is not before the final round {last}")]
    InvalidTarget { target: usize, last: usize },
    #[error("dependency targets mix text and image history, or reference an upload: {0}")]
    AmbiguousDependency(String),
    #[error("dialogue has no rounds")]
    Empty,
    #[error("final round has no assistant turn")]
    MissingAssistant,
    #[error("final assistant turn produces no image")]
    NoImageOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Dataset,
    Uploaded,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub source: ImageSource,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ImageRef {
    pub fn with_source(&self, source: ImageSource) -> ImageRef {
        ImageRef {
            source,
            ..self.clone()
        }
    }

    /// Caption if present and non-blank.
    pub fn caption_text(&self) -> Option<&str> {
        self.caption.as_deref().filter(|c| !c.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Image(ImageRef),
}

impl Segment {
    pub fn text(s: impl Into<String>) -> Segment {
        Segment::Text(s.into())
    }

    pub fn as_image(&self) -> Option<&ImageRef> {
        match self {
            Segment::Image(img) => Some(img),
            Segment::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(t),
            Segment::Image(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

/// Which pipeline step produced a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    A,
    B,
    C,
    Distractor,
    Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_kind: Option<OpKind>,
    /// The user text as it was before a history-dependent rewrite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_query: Option<String>,
}

impl Provenance {
    pub fn new(stage: Stage, op_kind: Option<OpKind>) -> Self {
        Provenance {
            stage,
            op_kind,
            original_query: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub is_distractor: bool,
    pub provenance: Provenance,
}

impl Turn {
    pub fn new(segments: Vec<Segment>, provenance: Provenance) -> Self {
        Turn {
            segments,
            is_distractor: false,
            provenance,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.segments.iter().filter_map(Segment::as_image)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(Segment::as_text)
    }

    pub fn has_image(&self) -> bool {
        self.images().next().is_some()
    }

    pub fn has_text(&self) -> bool {
        self.texts().next().is_some()
    }

    /// Text segments joined by a single space.
    pub fn joined_text(&self) -> String {
        self.texts().collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub user: Turn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant: Option<Turn>,
}

impl Round {
    pub fn new(user: Turn, assistant: Turn) -> Self {
        Round {
            user,
            assistant: Some(assistant),
        }
    }

    pub fn is_distractor(&self) -> bool {
        self.user.is_distractor
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub signature: TaskSignature,
    #[serde(default)]
    pub dep_target_rounds: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_depth_value: Option<u32>,
    pub rounds: Vec<Round>,
}

impl Dialogue {
    pub fn last_round_index(&self) -> Option<usize> {
        self.rounds.len().checked_sub(1)
    }

    pub fn final_round(&self) -> Option<&Round> {
        self.rounds.last()
    }

    pub fn final_round_mut(&mut self) -> Option<&mut Round> {
        self.rounds.last_mut()
    }

    pub fn distractor_count(&self) -> usize {
        self.rounds.iter().filter(|r| r.is_distractor()).count()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.rounds
            .iter()
            .flat_map(|r| std::iter::once(&r.user).chain(r.assistant.as_ref()))
            .flat_map(|t| t.images())
            .map(|img| img.id.as_str())
    }
}

/// The dialogue invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyDialogue,
    RolesMustAlternate,
    MustEndWithAssistant,
    EmptyTurn,
    EmptyText,
    UserMultipleImages,
    AssistantImageAfterText,
    ImageSourceRole,
    ImageDimensions,
    DuplicateImageId,
    DistractorFlagMismatch,
    TargetsVsDependency,
    InvalidTarget,
    DistractorTarget,
    DepthMismatch,
    DependencyModalityMismatch,
    DependencyCountMismatch,
    InputModalityMismatch,
    OutputModalityMismatch,
}

impl Rule {
    pub fn describe(self) -> &'static str {
        match self {
            Rule::EmptyDialogue => "dialogue has no rounds",
            Rule::RolesMustAlternate => "roles must alternate user/assistant",
            Rule::MustEndWithAssistant => "must end with assistant",
            Rule::EmptyTurn => "turn has no segments",
            Rule::EmptyText => "text segment is blank",
            Rule::UserMultipleImages => "user turn uploads more than one image",
            Rule::AssistantImageAfterText => "assistant image follows text",
            Rule::ImageSourceRole => "image source not allowed for this role",
            Rule::ImageDimensions => "image dimensions must be positive",
            Rule::DuplicateImageId => "duplicate image id",
            Rule::DistractorFlagMismatch => "distractor flag differs between user and assistant",
            Rule::TargetsVsDependency => "dependency targets present iff dependency is not 0",
            Rule::InvalidTarget => "dependency target not before final round",
            Rule::DistractorTarget => "distractor round used as dependency target",
            Rule::DepthMismatch => "depth mismatch",
            Rule::DependencyModalityMismatch => "dependency modality does not match target content",
            Rule::DependencyCountMismatch => "dependency multiplicity does not match target count",
            Rule::InputModalityMismatch => "final user turn does not match input modality",
            Rule::OutputModalityMismatch => "final assistant turn does not match output modality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.round {
            Some(r) => write!(f, "round {r}: {}", self.rule.describe())?,
            None => f.write_str(self.rule.describe())?,
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: Rule, round: Option<usize>, detail: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            round,
            detail: detail.into(),
        });
    }
}

fn check_turn(report: &mut ValidationReport, turn: &Turn, role: Role, round: usize) {
    if turn.segments.is_empty() {
        report.push(Rule::EmptyTurn, Some(round), role.to_string());
    }
    for seg in &turn.segments {
        match seg {
            Segment::Text(t) if t.trim().is_empty() => {
                report.push(Rule::EmptyText, Some(round), role.to_string())
            }
            Segment::Image(img) => {
                if img.width == 0 || img.height == 0 {
                    report.push(Rule::ImageDimensions, Some(round), img.id.clone());
                }
                let misplaced = matches!(
                    (role, img.source),
                    (Role::User, ImageSource::Generated) | (Role::Assistant, ImageSource::Uploaded)
                );
                if misplaced {
                    report.push(
                        Rule::ImageSourceRole,
                        Some(round),
                        format!("{:?} image {} in {role} turn", img.source, img.id),
                    );
                }
            }
            Segment::Text(_) => {}
        }
    }
    match role {
        Role::User => {
            let n = turn.images().count();
            if n > 1 {
                report.push(Rule::UserMultipleImages, Some(round), format!("{n} images"));
            }
        }
        Role::Assistant => {
            let mut seen_text = false;
            for seg in &turn.segments {
                match seg {
                    Segment::Text(_) => seen_text = true,
                    Segment::Image(img) if seen_text => {
                        report.push(Rule::AssistantImageAfterText, Some(round), img.id.clone())
                    }
                    Segment::Image(_) => {}
                }
            }
        }
    }
}

/// Structural checks that apply to any round, standalone or inside a dialogue.
pub fn validate_round(round: &Round, index: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_round_into(&mut report, round, index);
    report
}

fn check_round_into(report: &mut ValidationReport, round: &Round, index: usize) {
    check_turn(report, &round.user, Role::User, index);
    if let Some(asst) = &round.assistant {
        check_turn(report, asst, Role::Assistant, index);
        if asst.is_distractor != round.user.is_distractor {
            report.push(Rule::DistractorFlagMismatch, Some(index), "");
        }
    }
}

/// Checks every dialogue invariant; violations are returned as data.
pub fn validate_dialogue(d: &Dialogue) -> ValidationReport {
    let mut report = ValidationReport::default();
    let Some(last) = d.last_round_index() else {
        report.push(Rule::EmptyDialogue, None, "");
        return report;
    };

    let mut ids = HashSet::new();
    for (i, round) in d.rounds.iter().enumerate() {
        check_round_into(&mut report, round, i);
        if round.assistant.is_none() {
            if i == last {
                report.push(Rule::MustEndWithAssistant, Some(i), "");
            } else {
                report.push(Rule::RolesMustAlternate, Some(i), "missing assistant turn");
            }
        }
        let turns = std::iter::once(&round.user).chain(round.assistant.as_ref());
        for img in turns.flat_map(|t| t.images()) {
            if !ids.insert(img.id.as_str()) {
                report.push(Rule::DuplicateImageId, Some(i), img.id.clone());
            }
        }
    }

    check_dependency(&mut report, d, last);
    check_modalities(&mut report, d, last);
    report
}

fn check_dependency(report: &mut ValidationReport, d: &Dialogue, last: usize) {
    let sig = d.signature;
    let targets = &d.dep_target_rounds;
    if targets.is_empty() != (sig.dep() == DependencyModality::None) {
        report.push(
            Rule::TargetsVsDependency,
            None,
            format!("{} targets with dependency {}", targets.len(), sig.dep()),
        );
    }

    let mut in_range = true;
    for &t in targets {
        if t >= last {
            in_range = false;
            report.push(
                Rule::InvalidTarget,
                Some(t),
                format!("final round is {last}"),
            );
            continue;
        }
        let round = &d.rounds[t];
        if round.is_distractor() {
            report.push(Rule::DistractorTarget, Some(t), "");
        }
        if sig.dep().is_image() {
            let has_image = round.assistant.as_ref().is_some_and(Turn::has_image);
            if !has_image {
                report.push(
                    Rule::DependencyModalityMismatch,
                    Some(t),
                    "image dependency on a round without a generated image",
                );
            }
        } else if sig.dep().is_text() {
            let has_image =
                round.user.has_image() || round.assistant.as_ref().is_some_and(Turn::has_image);
            if has_image {
                report.push(
                    Rule::DependencyModalityMismatch,
                    Some(t),
                    "text dependency on a round with images",
                );
            }
        }
    }

    if sig.dep() != DependencyModality::None {
        let count_ok = if sig.dep().is_multiple() {
            targets.len() >= 2
        } else {
            targets.len() == 1
        };
        if !count_ok {
            report.push(
                Rule::DependencyCountMismatch,
                None,
                format!("{} targets for {}", targets.len(), sig.dep()),
            );
        }
    }

    if in_range {
        let measured = separation(targets, last);
        let stored = d.dep_depth_value.unwrap_or(0);
        if measured != stored {
            report.push(
                Rule::DepthMismatch,
                None,
                format!("targets give separation {measured}, dep_depth_value is {stored}"),
            );
        }
        if d.dep_depth_value == Some(0) {
            report.push(
                Rule::DepthMismatch,
                None,
                "dep_depth_value must be at least 1",
            );
        }
        let kind = DependencyDepth::from_separation(stored).kind();
        if kind != sig.depth() {
            report.push(
                Rule::DepthMismatch,
                None,
                format!(
                    "dep_depth_value {stored} is depth {kind}, signature says {}",
                    sig.depth()
                ),
            );
        }
    }
}

fn check_modalities(report: &mut ValidationReport, d: &Dialogue, last: usize) {
    let round = &d.rounds[last];
    if let Ok(input) = infer_input(&round.user) {
        if input != d.signature.input() {
            report.push(
                Rule::InputModalityMismatch,
                Some(last),
                format!("content is {input}, signature says {}", d.signature.input()),
            );
        }
    }
    if let Some(asst) = &round.assistant {
        match infer_output(asst) {
            Ok(output) if output == d.signature.output() => {}
            Ok(output) => report.push(
                Rule::OutputModalityMismatch,
                Some(last),
                format!(
                    "content is {output}, signature says {}",
                    d.signature.output()
                ),
            ),
            Err(_) => report.push(Rule::OutputModalityMismatch, Some(last), "no image output"),
        }
    }
}

/// Separation in rounds between the final round and the nearest target.
fn separation(targets: &[usize], last: usize) -> u32 {
    targets
        .iter()
        .map(|&t| last.saturating_sub(t) as u32)
        .min()
        .unwrap_or(0)
}

pub fn compute_dependency_depth(d: &Dialogue) -> Result<DependencyDepth, DialogueError> {
    let last = d.last_round_index().ok_or(DialogueError::Empty)?;
    if let Some(&target) = d.dep_target_rounds.iter().find(|&&t| t >= last) {
        return Err(DialogueError::InvalidTarget { target, last });
    }
    Ok(DependencyDepth::from_separation(separation(
        &d.dep_target_rounds,
        last,
    )))
}

fn infer_input(user: &Turn) -> Result<InputModality, DialogueError> {
    Ok(if user.has_image() {
        InputModality::TI
    } else {
        InputModality::T
    })
}

fn infer_output(asst: &Turn) -> Result<OutputModality, DialogueError> {
    match (asst.has_image(), asst.has_text()) {
        (true, true) => Ok(OutputModality::TI),
        (true, false) => Ok(OutputModality::I),
        (false, _) => Err(DialogueError::NoImageOutput),
    }
}

/// Derives the signature from content: modalities from the final round,
/// dependency from what the target rounds contain.
pub fn infer_signature(d: &Dialogue) -> Result<TaskSignature, DialogueError> {
    let final_round = d.final_round().ok_or(DialogueError::Empty)?;
    let asst = final_round
        .assistant
        .as_ref()
        .ok_or(DialogueError::MissingAssistant)?;
    let input = infer_input(&final_round.user)?;
    let output = infer_output(asst)?;
    let depth = compute_dependency_depth(d)?;

    let mut image_targets = 0;
    let mut text_targets = 0;
    for &t in &d.dep_target_rounds {
        let round = &d.rounds[t];
        let generated = round.assistant.as_ref().is_some_and(Turn::has_image);
        if generated {
            image_targets += 1;
        } else if round.user.has_image() {
            return Err(DialogueError::AmbiguousDependency(format!(
                "round {t} only holds a user upload"
            )));
        } else {
            text_targets += 1;
        }
    }
    let dep = match (text_targets, image_targets) {
        (0, 0) => DependencyModality::None,
        (1, 0) => DependencyModality::T1,
        (_, 0) => DependencyModality::TN,
        (0, 1) => DependencyModality::I1,
        (0, _) => DependencyModality::IN,
        _ => {
            return Err(DialogueError::AmbiguousDependency(format!(
                "{text_targets} text and {image_targets} image targets"
            )))
        }
    };
    let depth_kind: DepthKind = depth.kind();
    TaskSignature::new(input, output, dep, depth_kind).map_err(|e| {
        // Unreachable for in-range targets: empty targets give depth zero.
        DialogueError::AmbiguousDependency(e.to_string())
    })
}
