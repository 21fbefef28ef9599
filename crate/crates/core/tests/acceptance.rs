//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use dialogue_forge::dialogue::{
    compute_dependency_depth, infer_signature, validate_dialogue, Dialogue, Segment,
};
use dialogue_forge::ops::{invoke, CompletionParams, MockBackend, OpContext, OpKind, OpRequest};
use dialogue_forge::pack::{
    pack_greedy, sample_stream, SampleRef, SamplingConfig, DEFAULT_L_MAX, DEFAULT_L_MIN,
};
use dialogue_forge::stage_a::{self, Builder};
use dialogue_forge::stage_b::{apply_insertion, plan_insertion, strip_distractors};
use dialogue_forge::stage_c::interleave_output;
use dialogue_forge::stream::{
    build_mask, dialogue_skeleton, loss_summary, mask_oracle, parse_skeleton, serialize,
    validate_stream, BlockKind, StreamConfig,
};
use dialogue_forge::taxonomy::{
    enumerate_valid_signatures, format_signature, parse_signature, DepthKind, OutputModality,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const OPS: OpContext<'static> = OpContext {
    backend: &MockBackend,
    params: CompletionParams {
        max_length: 512,
        temperature: 0.7,
    },
    retries: 0,
};

const NAMED_SIGNATURES: [&str; 11] = [
    "t_i_0_0",
    "t_i_t1_1",
    "ti_i_0_0",
    "t_i_i1_1",
    "t_i_in_1",
    "ti_i_i1_1",
    "t_i_t1_n",
    "t_i_i1_n",
    "t_i_in_n",
    "ti_i_i1_n",
    "t_ti_0_0",
];

fn taxonomy_completeness() -> Outcome {
    let all = enumerate_valid_signatures();
    ensure!(all.len() == 36, "enumeration has {} signatures", all.len());
    for sig in &all {
        let s = format_signature(sig);
        let back = parse_signature(&s).map_err(|e| format!("{s}: {e}"))?;
        ensure!(back == *sig, "{s} does not round-trip");
    }
    for name in NAMED_SIGNATURES {
        let sig = parse_signature(name).map_err(|e| format!("{name}: {e}"))?;
        ensure!(all.contains(&sig), "{name} missing from the enumeration");
    }
    Ok(format!(
        "36 signatures, {} named ones present",
        NAMED_SIGNATURES.len()
    ))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..12);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..9);
            (0..len)
                .map(|_| rng.gen_range(b'a'..=b'z') as char)
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn atomic_op_coverage() -> Outcome {
    let names: BTreeSet<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
    let expected: BTreeSet<&str> = [
        "caption2query",
        "caption2QA_q",
        "drive_hs",
        "drive_i_h",
        "query2dep_q",
        "caption2QA_q_dep",
        "drive_hs_dep",
        "drive_i_h_dep",
        "Q_from_caption",
        "A_from_caption",
    ]
    .into();
    ensure!(
        OpKind::ALL.len() == 10 && names == expected,
        "registry is {names:?}"
    );
    let mut calls = 0;
    for kind in OpKind::ALL {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<String> = kind
                .required_inputs()
                .iter()
                .map(|_| random_text(&mut rng))
                .collect();
            let inputs = kind
                .required_inputs()
                .iter()
                .copied()
                .zip(values.iter().map(String::as_str));
            let req = OpRequest::new(kind, inputs, seed);
            let resp = invoke(&req, &MockBackend, &CompletionParams::default(), 0)
                .map_err(|e| format!("{kind} seed {seed}: {e}"))?;
            for (key, _) in kind.required_outputs() {
                ensure!(
                    !resp.field(key).is_empty(),
                    "{kind} seed {seed}: empty {key}"
                );
            }
            calls += 1;
        }
    }
    Ok(format!("{calls} mock calls parsed with all required keys"))
}

fn stage_a_builders() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut built = 0;
    for builder in Builder::ALL {
        for i in 0..500 {
            let rec = common::random_record(&mut rng, builder.record_kind(), &format!("rec-{i}"));
            let d = stage_a::build(builder, &rec, &OPS, rng.gen())
                .map_err(|e| format!("{builder} {i}: {e}"))?;
            let report = validate_dialogue(&d);
            ensure!(report.is_valid(), "{}: {:?}", d.id, report.violations);
            let inferred = infer_signature(&d).map_err(|e| format!("{}: {e}", d.id))?;
            ensure!(
                inferred == builder.signature() && d.signature == builder.signature(),
                "{}: declared {}, inferred {inferred}",
                d.id,
                d.signature
            );
            built += 1;
        }
    }
    Ok(format!("{built} dialogues across 6 builders, all valid"))
}

/// Everything except provenance, which records how a turn was made.
fn structure(d: &Dialogue) -> impl PartialEq + std::fmt::Debug {
    let rounds: Vec<_> = d
        .rounds
        .iter()
        .map(|r| {
            (
                r.user.segments.clone(),
                r.user.is_distractor,
                r.assistant
                    .as_ref()
                    .map(|a| (a.segments.clone(), a.is_distractor)),
            )
        })
        .collect();
    (
        d.id.clone(),
        d.signature,
        d.dep_target_rounds.clone(),
        d.dep_depth_value,
        rounds,
    )
}

fn stage_b_depth_law() -> Outcome {
    let pool = common::bundled_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dependent = [
        Builder::QaThenGenerate,
        Builder::SequentialEdit,
        Builder::SubjectPair,
        Builder::SubjectUpload,
    ];
    let mut checked = 0;
    for builder in dependent {
        for i in 0..10 {
            let rec = common::random_record(&mut rng, builder.record_kind(), &format!("b-{i}"));
            let input =
                stage_a::build(builder, &rec, &OPS, rng.gen()).map_err(|e| e.to_string())?;
            let sep = compute_dependency_depth(&input)
                .map_err(|e| e.to_string())?
                .value();
            for k in 1..=8usize {
                let plan =
                    plan_insertion(&input, &pool, k, rng.gen()).map_err(|e| e.to_string())?;
                let out = apply_insertion(&input, &plan, &pool, &OPS, rng.gen())
                    .map_err(|e| e.to_string())?;
                let want = sep + k as u32;
                ensure!(
                    out.dep_depth_value == Some(want),
                    "{} k={k}: stored {:?}, want {want}",
                    input.id,
                    out.dep_depth_value
                );
                let measured = compute_dependency_depth(&out)
                    .map_err(|e| e.to_string())?
                    .value();
                ensure!(
                    measured == want,
                    "{} k={k}: measured {measured}, want {want}",
                    input.id
                );
                ensure!(
                    out.signature.depth() == DepthKind::N,
                    "{} k={k}: depth kind not N",
                    input.id
                );
                let restored = strip_distractors(&out);
                ensure!(
                    structure(&restored) == structure(&input),
                    "{} k={k}: strip does not restore the input",
                    input.id
                );
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} insertions, k = 1..8, depth and restoration exact"
    ))
}

/// One dialogue of each image-output signature the pipeline produces.
fn image_output_dialogues(rng: &mut ChaCha8Rng) -> Result<Vec<Dialogue>, String> {
    let pool = common::bundled_pool();
    let mut out = Vec::new();
    for builder in Builder::ALL {
        let rec = common::random_record(rng, builder.record_kind(), &format!("c-{builder}"));
        let d = stage_a::build(builder, &rec, &OPS, rng.gen()).map_err(|e| e.to_string())?;
        if d.signature.depth() == DepthKind::One {
            let plan = plan_insertion(&d, &pool, 2, rng.gen()).map_err(|e| e.to_string())?;
            out.push(
                apply_insertion(&d, &plan, &pool, &OPS, rng.gen()).map_err(|e| e.to_string())?,
            );
        }
        out.push(d);
    }
    Ok(out)
}

fn stage_c_transform() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = image_output_dialogues(&mut rng)?;
    let mut seen = BTreeSet::new();
    for d in &inputs {
        ensure!(
            d.signature.output() == OutputModality::I,
            "{} is not image-output",
            d.signature
        );
        let out =
            interleave_output(d, &OPS, rng.gen()).map_err(|e| format!("{}: {e}", d.signature))?;
        ensure!(
            out.signature == d.signature.with_output(OutputModality::TI),
            "{} became {}",
            d.signature,
            out.signature
        );
        ensure!(
            infer_signature(&out).ok() == Some(out.signature),
            "{}: inferred signature differs",
            out.signature
        );
        ensure!(
            out.rounds.len() == d.rounds.len(),
            "{}: round count changed",
            d.signature
        );
        ensure!(
            out.rounds[..d.rounds.len() - 1] == d.rounds[..d.rounds.len() - 1],
            "{}: earlier rounds changed",
            d.signature
        );
        let last = out.final_round().unwrap().assistant.as_ref().unwrap();
        ensure!(
            matches!(
                last.segments.as_slice(),
                [Segment::Image(_), Segment::Text(_)]
            ),
            "{}: final assistant segments are not [IMAGE, TEXT]",
            d.signature
        );
        seen.insert(d.signature.to_string());
    }
    Ok(format!(
        "{} image-output signatures mapped I -> TI: {}",
        seen.len(),
        seen.into_iter().collect::<Vec<_>>().join(" ")
    ))
}

fn stream_grammar() -> Outcome {
    let pool = common::bundled_pool();
    let cfg = StreamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut positions = 0usize;
    for i in 0..1000 {
        let d = common::random_pipeline_dialogue(&mut rng, i, &pool, &OPS, 8);
        let s = serialize(&d, &cfg).map_err(|e| format!("{}: {e}", d.id))?;
        let v = validate_stream(&s);
        ensure!(v.is_empty(), "{}: {:?}", d.id, v);
        ensure!(
            parse_skeleton(&s).ok() == Some(dialogue_skeleton(&d)),
            "{}: skeleton differs",
            d.id
        );
        let l = loss_summary(&s);
        ensure!(
            l.total() == s.total_len,
            "{}: ce+mse+none = {} != {}",
            d.id,
            l.total(),
            s.total_len
        );
        positions += s.total_len;
    }
    Ok(format!(
        "1000 streams valid, {positions} positions partitioned"
    ))
}

fn small_stream_config(replay: bool) -> StreamConfig {
    StreamConfig {
        text_units: Arc::new(|t: &str| t.split_whitespace().count().clamp(1, 5)),
        vit_units: Arc::new(|w, h| ((w + h) % 7 + 1) as usize),
        vae_units: Arc::new(|w, h| ((w ^ h) % 5 + 2) as usize),
        max_image_units: 64,
        replay_clean_after_noised: replay,
    }
}

fn mask_oracle_equivalence() -> Outcome {
    let pool = common::bundled_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut streams, mut spot_blocks, mut attempts) = (0, 0, 0);
    while streams < 250 {
        attempts += 1;
        ensure!(attempts < 10_000, "could not generate enough short streams");
        let d = common::random_pipeline_dialogue(&mut rng, attempts, &pool, &OPS, 3);
        let s = serialize(&d, &small_stream_config(rng.gen())).map_err(|e| e.to_string())?;
        if s.total_len > 256 {
            continue;
        }
        let fast = build_mask(&s).map_err(|e| e.to_string())?;
        let slow = mask_oracle(&s).map_err(|e| e.to_string())?;
        ensure!(fast == slow, "{}: mask differs from the oracle", d.id);
        for b in s.blocks.iter().filter(|b| b.kind == BlockKind::VaeNoised) {
            for q in 0..s.total_len {
                for k in b.range() {
                    let inside = b.range().contains(&q);
                    ensure!(
                        fast.get(q, k) == inside,
                        "{}: noised block {:?} visibility wrong at ({q},{k})",
                        d.id,
                        b.range()
                    );
                }
            }
            spot_blocks += 1;
        }
        streams += 1;
    }
    Ok(format!("{streams} streams (len <= 256) equal to the oracle; {spot_blocks} noised blocks spot-checked"))
}

const MULTI_TURN: [&str; 8] = [
    "t_i_t1_1",
    "t_i_i1_1",
    "t_i_in_1",
    "ti_i_i1_1",
    "t_i_t1_n",
    "t_i_i1_n",
    "t_i_in_n",
    "ti_i_i1_n",
];

fn sampler_ratios() -> Outcome {
    let cfg = SamplingConfig::annealing_mix(MULTI_TURN);
    let corpora: BTreeMap<String, Vec<SampleRef>> = cfg
        .categories
        .keys()
        .map(|c| {
            let samples = (0..5)
                .map(|i| SampleRef {
                    id: format!("{c}-{i}"),
                    len: 100,
                })
                .collect();
            (c.clone(), samples)
        })
        .collect();
    let n = 100_000;
    let start = Instant::now();
    let draws = sample_stream(&cfg, &corpora, n, 7).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed.as_secs_f64() < 5.0, "sampling took {elapsed:?}");
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &draws {
        *counts.entry(d.category.as_str()).or_default() += 1;
    }
    let probs = cfg.probabilities();
    let (mut worst, mut chi2) = (0.0f64, 0.0);
    for (cat, p) in &probs {
        let observed = counts.get(cat.as_str()).copied().unwrap_or(0) as f64;
        worst = worst.max((observed / n as f64 - p).abs());
        let expected = p * n as f64;
        chi2 += (observed - expected).powi(2) / expected;
    }
    ensure!(worst <= 0.02, "largest frequency error {worst:.4}");
    let dist = ChiSquared::new((probs.len() - 1) as f64).map_err(|e| e.to_string())?;
    let p_value = 1.0 - dist.cdf(chi2);
    ensure!(p_value > 1e-3, "chi-square {chi2:.2} has p = {p_value:.2e}");
    Ok(format!(
        "edit {:.4} (expected {:.4}); max |error| {worst:.4}; chi2 {chi2:.2}, p {p_value:.3}; {elapsed:.2?}",
        counts["edit"] as f64 / n as f64,
        probs["edit"]
    ))
}

fn packer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Sorted next-fit leaves at most one underfull pack only when no sample
    // is longer than the gap between the two bounds.
    let max_len = DEFAULT_L_MAX - DEFAULT_L_MIN;
    let mut samples: Vec<(String, usize)> = (0..5000)
        .map(|i| (format!("s{i}"), rng.gen_range(256..=max_len)))
        .collect();
    let drawn: usize = samples.iter().map(|s| s.1).sum();
    let ids: BTreeSet<String> = samples.iter().map(|s| s.0.clone()).collect();

    let unsorted =
        pack_greedy(&samples, DEFAULT_L_MIN, DEFAULT_L_MAX).map_err(|e| e.to_string())?;
    samples.shuffle(&mut rng);
    samples.sort_by_key(|s| std::cmp::Reverse(s.1));
    let sorted = pack_greedy(&samples, DEFAULT_L_MIN, DEFAULT_L_MAX).map_err(|e| e.to_string())?;
    for packs in [&unsorted, &sorted] {
        ensure!(
            packs.iter().all(|p| p.total <= DEFAULT_L_MAX),
            "a pack exceeds L_max"
        );
        ensure!(
            packs.iter().map(|p| p.total).sum::<usize>() == drawn,
            "token total not conserved"
        );
        let packed: Vec<&String> = packs.iter().flat_map(|p| &p.sample_ids).collect();
        ensure!(packed.len() == ids.len(), "sample count not conserved");
        ensure!(
            packed.into_iter().cloned().collect::<BTreeSet<_>>() == ids,
            "sample ids not conserved"
        );
    }
    let underfull = sorted.iter().filter(|p| p.underfull).count();
    ensure!(
        underfull <= 1,
        "{underfull} underfull packs under descending sort"
    );
    Ok(format!(
        "5000 lengths in [256, {max_len}] -> {} packs, {underfull} underfull (sorted)",
        sorted.len()
    ))
}

fn dforge(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dforge"))
        .args(args)
        .current_dir(dir)
        .env_remove("DF_SEED")
        .env_remove("DF_BACKEND_URL")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "dforge {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

const E2E_OUTPUTS: [&str; 6] = [
    "dialogues.jsonl",
    "rejects.jsonl",
    "manifest.json",
    "streams/t_ti_i1_n.jsonl",
    "packs.jsonl",
    "stats.json",
];

fn e2e_run(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let io = |e: std::io::Error| e.to_string();
    std::fs::create_dir_all(dir.join("fixtures")).map_err(io)?;
    std::fs::create_dir_all(dir.join("streams")).map_err(io)?;
    for f in ["edit_records.jsonl", "distractor_pool.jsonl"] {
        std::fs::copy(common::fixture(f), dir.join("fixtures").join(f)).map_err(io)?;
    }
    std::fs::write(dir.join("weights.json"), r#"{"t_ti_i1_n": 1.0}"#).map_err(io)?;
    #[rustfmt::skip]
    dforge(dir, &[
        "synthesize", "--stages", "a,b,c", "--task", "t_i_i1_1",
        "--in", "fixtures/edit_records.jsonl", "--pool", "fixtures/distractor_pool.jsonl",
        "--backend", "mock", "--seed", "7",
        "--out", "dialogues.jsonl", "--rejects", "rejects.jsonl", "--manifest", "manifest.json",
    ])?;
    dforge(
        dir,
        &[
            "serialize",
            "--in",
            "dialogues.jsonl",
            "--out",
            "streams/t_ti_i1_n.jsonl",
        ],
    )?;
    #[rustfmt::skip]
    dforge(dir, &[
        "pack", "--config", "weights.json", "--in-dir", "streams", "--n", "2000", "--seed", "7",
        "--sort", "desc", "--out", "packs.jsonl", "--stats", "stats.json",
    ])?;
    E2E_OUTPUTS
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(io))
        .collect()
}

fn end_to_end_determinism() -> Outcome {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = e2e_run(first.path())?;
    let b = e2e_run(second.path())?;
    for (name, (x, y)) in E2E_OUTPUTS.iter().zip(a.iter().zip(&b)) {
        ensure!(x == y, "{name} differs between runs");
    }
    let dialogues: Vec<Dialogue> =
        dialogue_forge::jsonl::read_jsonl(&first.path().join("dialogues.jsonl"))
            .map_err(|e| e.to_string())?;
    ensure!(
        dialogues.len() == 20,
        "{} dialogues, want 20",
        dialogues.len()
    );
    ensure!(
        dialogues
            .iter()
            .all(|d| d.signature.to_string() == "t_ti_i1_n"),
        "not every dialogue is t_ti_i1_n"
    );
    dforge(first.path(), &["synthesize", "--replay", "manifest.json"])?;
    let bytes: usize = a.iter().map(Vec::len).sum();
    Ok(format!(
        "6 artifacts ({bytes} bytes) identical across runs; manifest replay matches"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("taxonomy completeness", taxonomy_completeness),
        ("atomic-op coverage", atomic_op_coverage),
        ("stage a builders", stage_a_builders),
        ("stage b depth law", stage_b_depth_law),
        ("stage c transform", stage_c_transform),
        ("stream grammar", stream_grammar),
        ("mask oracle equivalence", mask_oracle_equivalence),
        ("sampler ratios", sampler_ratios),
        ("packer", packer),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{ms} ms]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why} [{ms} ms]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
