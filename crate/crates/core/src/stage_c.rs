//! Interleaved output generation: the final request gains a question about
//! the requested image, and the final response answers it after the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dialogue::{Dialogue, ImageRef, Segment, Stage};
use crate::ops::{OpContext, OpKind};
use crate::pipeline::{
    checked, collect, derive_seed, map_ordered, Outcome, Reject, StageOutput, SynthesisError,
};
use crate::taxonomy::OutputModality;

pub fn interleave_output(
    d: &Dialogue,
    ops: &OpContext,
    seed: u64,
) -> Result<Dialogue, SynthesisError> {
    if d.signature.output() == OutputModality::TI {
        return Err(SynthesisError::AlreadyInterleaved);
    }
    let final_round = d
        .final_round()
        .ok_or(crate::dialogue::DialogueError::Empty)?;
    let asst = final_round
        .assistant
        .as_ref()
        .ok_or(crate::dialogue::DialogueError::MissingAssistant)?;
    let caption = asst
        .images()
        .last()
        .and_then(ImageRef::caption_text)
        .ok_or_else(|| SynthesisError::MissingCaption(format!("{}: final image", d.id)))?;

    let q = ops.call(OpKind::QFromCaption, [("caption", caption)], seed)?;
    let question = q.field("q").to_string();
    let a = ops.call(
        OpKind::AFromCaption,
        [("caption", caption), ("question", question.as_str())],
        seed.wrapping_add(1 << 32),
    )?;

    let mut out = d.clone();
    let round = out.final_round_mut().expect("checked above");
    round.user.segments.push(Segment::Text(question));
    round.user.provenance.stage = Stage::C;
    round.user.provenance.op_kind = Some(OpKind::QFromCaption);
    let asst = round.assistant.as_mut().expect("checked above");
    asst.segments.push(Segment::Text(a.field("a").to_string()));
    asst.provenance.stage = Stage::C;
    asst.provenance.op_kind = Some(OpKind::AFromCaption);
    out.signature = d.signature.with_output(OutputModality::TI);
    checked(out)
}

/// `true` when the seeded per-dialogue coin selects `id` for interleaving.
pub fn selected(id: &str, apply_fraction: f64, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id, "stage_c/coin"));
    rng.gen::<f64>() < apply_fraction
}

pub fn run_stage_c(
    corpus: &[Dialogue],
    ops: &OpContext,
    apply_fraction: f64,
    seed: u64,
    concurrency: usize,
) -> Result<StageOutput, SynthesisError> {
    if !(0.0..=1.0).contains(&apply_fraction) {
        return Err(SynthesisError::InvalidRecord(format!(
            "apply fraction {apply_fraction} outside [0, 1]"
        )));
    }
    let outcomes = map_ordered(corpus, concurrency, |d| {
        if d.signature.output() == OutputModality::TI || !selected(&d.id, apply_fraction, seed) {
            return Outcome::Skipped(d.clone());
        }
        match interleave_output(d, ops, derive_seed(seed, &d.id, "stage_c/qa")) {
            Ok(out) => Outcome::Done(out),
            Err(e) => Outcome::Failed(Reject::new(&d.id, &e)),
        }
    });
    Ok(collect(outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{infer_signature, validate_dialogue};
    use crate::ops::MockBackend;
    use crate::stage_a::{self, fixtures as rec};

    fn ops() -> OpContext<'static> {
        OpContext::new(&MockBackend)
    }

    #[test]
    fn text_to_image_becomes_interleaved() {
        let d = stage_a::build_t_i_0_0(&rec::retriever(), &ops(), 1).unwrap();
        let out = interleave_output(&d, &ops(), 3).unwrap();
        assert_eq!(out.signature.to_string(), "t_ti_0_0");
        assert_eq!(infer_signature(&out).unwrap(), out.signature);
        assert!(validate_dialogue(&out).is_valid());
        let asst = out.rounds[0].assistant.as_ref().unwrap();
        assert!(matches!(
            asst.segments.as_slice(),
            [Segment::Image(_), Segment::Text(_)]
        ));
        let user = &out.rounds[0].user;
        assert_eq!(user.segments.len(), 2);
        assert_eq!(
            user.segments[1].as_text(),
            Some("What is notable about A golden retriever is running on the grass?")
        );
        assert!(matches!(
            interleave_output(&out, &ops(), 3),
            Err(SynthesisError::AlreadyInterleaved)
        ));
    }

    #[test]
    fn edit_uses_target_caption() {
        let d = stage_a::build_t_i_i1_1(&rec::red_hat(), &ops(), 1).unwrap();
        let out = interleave_output(&d, &ops(), 3).unwrap();
        assert_eq!(out.rounds[0], d.rounds[0]);
        assert!(out.rounds[1]
            .user
            .joined_text()
            .contains("wearing a red hat"));
    }

    #[test]
    fn missing_caption() {
        let mut d = stage_a::build_t_i_0_0(&rec::retriever(), &ops(), 1).unwrap();
        if let Segment::Image(img) = &mut d.rounds[0].assistant.as_mut().unwrap().segments[0] {
            img.caption = None;
        }
        assert!(matches!(
            interleave_output(&d, &ops(), 0),
            Err(SynthesisError::MissingCaption(_))
        ));
    }

    fn corpus(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| {
                let mut r = rec::retriever();
                r.id = format!("t2i-{i}");
                stage_a::build_t_i_0_0(&r, &ops(), 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn fractions() {
        let c = corpus(20);
        let all = run_stage_c(&c, &ops(), 1.0, 9, 4).unwrap();
        assert!(all
            .dialogues
            .iter()
            .all(|d| d.signature.to_string() == "t_ti_0_0"));
        assert!(all.skipped.is_empty());

        let none = run_stage_c(&c, &ops(), 0.0, 9, 4).unwrap();
        assert_eq!(none.dialogues, c);

        let half = run_stage_c(&c, &ops(), 0.5, 9, 4).unwrap();
        let again = run_stage_c(&c, &ops(), 0.5, 9, 1).unwrap();
        assert_eq!(half, again);
        assert!(!half.skipped.is_empty() && half.skipped.len() < 20);

        assert!(run_stage_c(&c, &ops(), 1.5, 9, 1).is_err());
    }
}
