//! Independent single-turn insertion.
//!
//! Unrelated "distractor" rounds are spliced in right after the last round
//! the final request depends on, and the final request is rewritten so that
//! it names its referent explicitly. A depth-1 dialogue with `k` inserted
//! rounds comes out with depth `1 + k`.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{validate_round, Dialogue, ImageRef, Round, Segment, Stage, Turn};
use crate::ops::{OpContext, OpKind};
use crate::pipeline::{
    checked, collect, derive_seed, map_ordered, Outcome, Reject, StageOutput, SynthesisError,
};
use crate::taxonomy::{DependencyModality, DepthKind, InputModality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorCategory {
    T2i,
    ImageUnderstanding,
    TextChat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub category: DistractorCategory,
    pub round: Round,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistractorPool {
    entries: Vec<PoolEntry>,
}

impl DistractorPool {
    /// Builds a pool, rejecting entries that are not complete, valid rounds.
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self, SynthesisError> {
        for (i, e) in entries.iter().enumerate() {
            if e.round.assistant.is_none() {
                return Err(SynthesisError::InvalidRecord(format!(
                    "pool entry {i} has no assistant turn"
                )));
            }
            let report = validate_round(&e.round, 0);
            if !report.is_valid() {
                return Err(SynthesisError::InvalidRecord(format!(
                    "pool entry {i}: {}",
                    report.violations[0]
                )));
            }
        }
        Ok(DistractorPool { entries })
    }

    /// Turns a single-round dialogue (e.g. a `t_i_0_0` build) into an entry.
    pub fn entry_from_dialogue(d: &Dialogue, category: DistractorCategory) -> Option<PoolEntry> {
        match d.rounds.as_slice() {
            [round] => Some(PoolEntry {
                category,
                round: round.clone(),
            }),
            _ => None,
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InsertionPlan {
    pub k: usize,
    pub picks: Vec<(usize, DistractorCategory)>,
    pub insert_position: usize,
}

pub fn plan_insertion(
    d: &Dialogue,
    pool: &DistractorPool,
    k: usize,
    seed: u64,
) -> Result<InsertionPlan, SynthesisError> {
    if d.signature.depth() != DepthKind::One {
        return Err(SynthesisError::WrongDepth(d.signature));
    }
    if k == 0 {
        return Err(SynthesisError::InvalidDistractorCount);
    }
    if pool.len() < k {
        return Err(SynthesisError::PoolExhausted {
            need: k,
            have: pool.len(),
        });
    }
    let last_source = *d
        .dep_target_rounds
        .iter()
        .max()
        .ok_or(SynthesisError::WrongDepth(d.signature))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| (i, pool.entries[i].category))
        .collect();
    Ok(InsertionPlan {
        k,
        picks,
        insert_position: last_source + 1,
    })
}

/// The dependency-aware rewrite operation for a depth-1 signature.
pub fn rewrite_op(input: InputModality, dep: DependencyModality) -> Option<OpKind> {
    match (input, dep) {
        (InputModality::T, DependencyModality::I1) => Some(OpKind::Query2DepQ),
        (InputModality::T, DependencyModality::T1) => Some(OpKind::Caption2QaQDep),
        (InputModality::T, DependencyModality::IN) => Some(OpKind::DriveHsDep),
        (InputModality::TI, DependencyModality::I1) => Some(OpKind::DriveIHDep),
        _ => None,
    }
}

fn target_caption(d: &Dialogue, round: usize) -> Result<&str, SynthesisError> {
    d.rounds[round]
        .assistant
        .as_ref()
        .and_then(|t| t.images().find_map(ImageRef::caption_text))
        .ok_or_else(|| SynthesisError::MissingCaption(format!("{}: round {round} image", d.id)))
}

fn final_image_caption(d: &Dialogue) -> Result<&str, SynthesisError> {
    let last = d.rounds.len() - 1;
    target_caption(d, last)
}

fn distractor_round(entry: &PoolEntry, slot: usize, taken: &mut HashSet<String>) -> Round {
    let mut round = entry.round.clone();
    for turn in std::iter::once(&mut round.user).chain(round.assistant.as_mut()) {
        turn.is_distractor = true;
        turn.provenance.stage = Stage::Distractor;
        for seg in &mut turn.segments {
            if let Segment::Image(img) = seg {
                if taken.contains(&img.id) {
                    img.id = format!("{}#d{slot}", img.id);
                }
                taken.insert(img.id.clone());
            }
        }
    }
    round
}

pub fn apply_insertion(
    d: &Dialogue,
    plan: &InsertionPlan,
    pool: &DistractorPool,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    let mismatch = |msg: String| SynthesisError::PlanMismatch(msg);
    if d.signature.depth() != DepthKind::One {
        return Err(SynthesisError::WrongDepth(d.signature));
    }
    let last_source = d.dep_target_rounds.iter().max().copied();
    if last_source.map(|t| t + 1) != Some(plan.insert_position) {
        return Err(mismatch(format!(
            "insert position {} is not right after the last dependency round",
            plan.insert_position
        )));
    }
    if plan.k == 0 || plan.k != plan.picks.len() {
        return Err(mismatch(format!(
            "k = {} with {} picks",
            plan.k,
            plan.picks.len()
        )));
    }
    let last = d.rounds.len() - 1;
    if plan.insert_position > last {
        return Err(mismatch("insert position past the final round".into()));
    }
    let mut seen = HashSet::new();
    for &(idx, cat) in &plan.picks {
        let entry = pool
            .entries
            .get(idx)
            .ok_or_else(|| mismatch(format!("pool index {idx} out of range")))?;
        if entry.category != cat || !seen.insert(idx) {
            return Err(mismatch(format!("pick {idx} does not match the pool")));
        }
    }

    let op = rewrite_op(d.signature.input(), d.signature.dep())
        .ok_or(SynthesisError::UnsupportedSignature(d.signature))?;
    let original = d.rounds[last]
        .user
        .texts()
        .next()
        .unwrap_or_default()
        .to_string();
    let resp = match op {
        OpKind::Query2DepQ => {
            let caption = target_caption(d, d.dep_target_rounds[0])?;
            ops.call(
                op,
                [("query", original.as_str()), ("target_caption", caption)],
                seed,
            )?
        }
        OpKind::Caption2QaQDep => ops.call(op, [("caption", final_image_caption(d)?)], seed)?,
        OpKind::DriveHsDep => {
            let a = target_caption(d, d.dep_target_rounds[0])?;
            let b = target_caption(d, d.dep_target_rounds[1])?;
            ops.call(op, [("caption_a", a), ("caption_b", b)], seed)?
        }
        OpKind::DriveIHDep => {
            let c = target_caption(d, d.dep_target_rounds[0])?;
            ops.call(op, [("caption_history", c)], seed)?
        }
        _ => unreachable!("rewrite_op only yields dependency operations"),
    };

    let mut taken: HashSet<String> = d.image_ids().map(String::from).collect();
    let distractors: Vec<Round> = plan
        .picks
        .iter()
        .enumerate()
        .map(|(slot, &(idx, _))| distractor_round(&pool.entries[idx], slot, &mut taken))
        .collect();

    let mut out = d.clone();
    out.rounds
        .splice(plan.insert_position..plan.insert_position, distractors);
    let final_user: &mut Turn = &mut out.rounds.last_mut().expect("non-empty").user;
    match final_user.segments.iter_mut().find_map(|s| match s {
        Segment::Text(t) => Some(t),
        Segment::Image(_) => None,
    }) {
        Some(t) => *t = resp.field("query").to_string(),
        None => final_user
            .segments
            .insert(0, Segment::Text(resp.field("query").to_string())),
    }
    final_user.provenance.stage = Stage::B;
    final_user.provenance.op_kind = Some(op);
    final_user.provenance.original_query = Some(original);

    let old_depth = d.dep_depth_value.unwrap_or(1);
    out.dep_depth_value = Some(old_depth + plan.k as u32);
    out.signature = d.signature.with_depth(DepthKind::N)?;
    checked(out)
}

/// Inverse of [`apply_insertion`] for audits: drops distractor rounds and
/// restores the pre-rewrite final query and depth.
pub fn strip_distractors(d: &Dialogue) -> Dialogue {
    let removed = d.distractor_count();
    let mut out = d.clone();
    out.rounds.retain(|r| !r.is_distractor());
    if removed == 0 {
        return out;
    }
    if let Some(round) = out.rounds.last_mut() {
        let user = &mut round.user;
        if let Some(original) = user.provenance.original_query.take() {
            if let Some(Segment::Text(t)) = user.segments.iter_mut().find(|s| s.as_text().is_some())
            {
                *t = original;
            }
        }
    }
    out.dep_depth_value = d.dep_depth_value.map(|v| v - removed as u32);
    if let Ok(sig) = d.signature.with_depth(DepthKind::One) {
        out.signature = sig;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBConfig {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for StageBConfig {
    fn default() -> Self {
        StageBConfig { k_min: 1, k_max: 3 }
    }
}

fn run_one(
    d: &Dialogue,
    pool: &DistractorPool,
    cfg: StageBConfig,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &d.id, "stage_b/k"));
    let k = rng.gen_range(cfg.k_min..=cfg.k_max);
    let plan = plan_insertion(d, pool, k, derive_seed(seed, &d.id, "stage_b/picks"))?;
    apply_insertion(
        d,
        &plan,
        pool,
        ops,
        derive_seed(seed, &d.id, "stage_b/rewrite"),
    )
}

/// Distractor insertion over a corpus. Context-free dialogues pass through
/// and are listed as skipped.
pub fn run_stage_b(
    corpus: &[Dialogue],
    pool: &DistractorPool,
    cfg: StageBConfig,
    ops: &OpContext,
    seed: u64,
    concurrency: usize,
) -> Result<StageOutput, SynthesisError> {
    if cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(SynthesisError::InvalidDistractorCount);
    }
    let outcomes = map_ordered(corpus, concurrency, |d| {
        if d.signature.dep() == DependencyModality::None || d.signature.depth() == DepthKind::Zero {
            return Outcome::Skipped(d.clone());
        }
        match run_one(d, pool, cfg, ops, seed) {
            Ok(out) => Outcome::Done(out),
            Err(e) => Outcome::Failed(Reject::new(&d.id, &e)),
        }
    });
    Ok(collect(outcomes))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::dialogue::{ImageSource, Provenance};

    pub fn pool(n: usize) -> DistractorPool {
        let entries = (0..n)
            .map(|i| {
                let prov = || Provenance::new(Stage::Source, None);
                match i % 3 {
                    0 => PoolEntry {
                        category: DistractorCategory::T2i,
                        round: Round::new(
                            Turn::new(
                                vec![Segment::text(format!("Draw a lighthouse number {i}"))],
                                prov(),
                            ),
                            Turn::new(
                                vec![Segment::Image(ImageRef {
                                    id: format!("pool-{i}"),
                                    source: ImageSource::Generated,
                                    uri: format!("pool/{i}.png"),
                                    width: 256,
                                    height: 256,
                                    caption: Some(format!("lighthouse {i}")),
                                })],
                                prov(),
                            ),
                        ),
                    },
                    1 => PoolEntry {
                        category: DistractorCategory::ImageUnderstanding,
                        round: Round::new(
                            Turn::new(
                                vec![
                                    Segment::text("What is in this picture?"),
                                    Segment::Image(ImageRef {
                                        id: format!("pool-{i}"),
                                        source: ImageSource::Uploaded,
                                        uri: format!("pool/{i}.png"),
                                        width: 320,
                                        height: 240,
                                        caption: None,
                                    }),
                                ],
                                prov(),
                            ),
                            Turn::new(vec![Segment::text("A bowl of fruit on a table.")], prov()),
                        ),
                    },
                    _ => PoolEntry {
                        category: DistractorCategory::TextChat,
                        round: Round::new(
                            Turn::new(
                                vec![Segment::text(format!("Tell me fact {i} about tea."))],
                                prov(),
                            ),
                            Turn::new(
                                vec![Segment::text("Tea was first brewed in China.")],
                                prov(),
                            ),
                        ),
                    },
                }
            })
            .collect();
        DistractorPool::new(entries).unwrap()
    }
}
