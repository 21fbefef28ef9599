//! Random record and dialogue generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use dialogue_forge::dialogue::{Dialogue, ImageRef, ImageSource};
use dialogue_forge::jsonl::read_jsonl;
use dialogue_forge::ops::OpContext;
use dialogue_forge::stage_a::{
    self, Builder, EditRecord, RecordKind, SourceRecord, Subject, SubjectRecord, T2IRecord,
};
use dialogue_forge::stage_b::{self, DistractorPool, PoolEntry};
use dialogue_forge::stage_c;
use dialogue_forge::taxonomy::{DependencyModality, DepthKind};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn bundled_pool() -> DistractorPool {
    let entries: Vec<PoolEntry> =
        read_jsonl(&fixture("distractor_pool.jsonl")).expect("bundled pool");
    DistractorPool::new(entries).expect("bundled pool is valid")
}

const ADJECTIVES: &[&str] = &[
    "small", "bright", "rusty", "fluffy", "ancient", "striped", "glowing", "wet", "tiny", "giant",
];
const NOUNS: &[&str] = &[
    "cat", "lantern", "bicycle", "teapot", "owl", "sailboat", "castle", "cactus", "robot", "violin",
];
const PLACES: &[&str] = &[
    "on a wooden table",
    "in a misty forest",
    "under a street lamp",
    "on a sandy beach",
    "beside a river",
    "in a quiet library",
];
const EDITS: &[&str] = &[
    "Make it snowy",
    "Add a red hat",
    "Turn it into a sketch",
    "Make the sky purple",
    "Remove the background",
];

pub fn caption(rng: &mut impl Rng) -> String {
    format!(
        "A {} {} {}",
        ADJECTIVES.choose(rng).unwrap(),
        NOUNS.choose(rng).unwrap(),
        PLACES.choose(rng).unwrap()
    )
}

pub fn image(rng: &mut impl Rng, id: String, caption: Option<String>) -> ImageRef {
    ImageRef {
        uri: format!("images/{id}.png"),
        id,
        source: ImageSource::Dataset,
        width: rng.gen_range(32..=1024),
        height: rng.gen_range(32..=1024),
        caption,
    }
}

pub fn random_record(rng: &mut impl Rng, kind: RecordKind, id: &str) -> SourceRecord {
    match kind {
        RecordKind::T2I => {
            let c = caption(rng);
            let with_caption = rng.gen_bool(0.5).then(|| c.clone());
            SourceRecord::T2I(T2IRecord {
                id: id.into(),
                image: image(rng, format!("{id}-img"), with_caption),
                caption: c,
            })
        }
        RecordKind::Edit => {
            let src = caption(rng);
            let instruction = EDITS.choose(rng).unwrap().to_string();
            SourceRecord::Edit(EditRecord {
                id: id.into(),
                target_caption: format!("{src}, edited: {}", instruction.to_lowercase()),
                source_image: image(rng, format!("{id}-src"), None),
                target_image: image(rng, format!("{id}-tgt"), None),
                source_caption: src,
                instruction,
            })
        }
        RecordKind::Subject => {
            let subjects = (0..2)
                .map(|j| Subject {
                    caption: caption(rng),
                    image: image(rng, format!("{id}-s{j}"), None),
                })
                .collect();
            SourceRecord::Subject(SubjectRecord {
                id: id.into(),
                subjects,
                composed_image: image(rng, format!("{id}-c"), None),
                composed_caption: caption(rng),
            })
        }
    }
}

/// A dialogue as the pipeline could emit it: a random stage-a build,
/// sometimes given `1..=max_k` distractors, sometimes an interleaved answer.
pub fn random_pipeline_dialogue(
    rng: &mut impl Rng,
    i: usize,
    pool: &DistractorPool,
    ops: &OpContext,
    max_k: usize,
) -> Dialogue {
    let builder = *Builder::ALL.choose(rng).unwrap();
    let rec = random_record(rng, builder.record_kind(), &format!("r{i}"));
    let mut d = stage_a::build(builder, &rec, ops, rng.gen()).expect("stage a");
    let sig = d.signature;
    if sig.dep() != DependencyModality::None && sig.depth() == DepthKind::One && rng.gen_bool(0.6) {
        let k = rng.gen_range(1..=max_k);
        let plan = stage_b::plan_insertion(&d, pool, k, rng.gen()).expect("plan");
        d = stage_b::apply_insertion(&d, &plan, pool, ops, rng.gen()).expect("stage b");
    }
    if rng.gen_bool(0.6) {
        d = stage_c::interleave_output(&d, ops, rng.gen()).expect("stage c");
    }
    d
}
