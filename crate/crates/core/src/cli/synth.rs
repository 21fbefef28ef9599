use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dialogue_forge::dialogue::Dialogue;
use dialogue_forge::jsonl::{read_jsonl, write_jsonl};
use dialogue_forge::pipeline::{Reject, StageOutput};
use dialogue_forge::stage_a::{self, Builder, SourceRecord};
use dialogue_forge::stage_b::{self, DistractorPool, PoolEntry, StageBConfig};
use dialogue_forge::stage_c;
use dialogue_forge::taxonomy::TaskSignature;

use super::{require, Failure, Overrides, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    A,
    B,
    C,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Single stage to run.
    #[arg(long, value_enum, conflicts_with = "stages")]
    stage: Option<StageName>,
    /// Comma-separated stage chain, e.g. `a,b,c`.
    #[arg(long, value_enum, value_delimiter = ',')]
    stages: Vec<StageName>,
    /// Signature to build in stage a, e.g. `t_i_i1_1`.
    #[arg(long)]
    task: Option<String>,
    /// Source records (stage a first) or dialogues (stage b or c first).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Distractor pool, required when stage b runs.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where rejected records go; defaults to `<out>.rejects.jsonl`.
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Write a run manifest (inputs, config, output digests, counts).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON pipeline config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the run recorded in a manifest and check its output digests.
    #[arg(long, conflicts_with_all = ["stage", "stages", "task", "input", "pool", "out", "rejects", "config"])]
    replay: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Fully resolved description of a run; the manifest stores it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunSpec {
    stages: Vec<StageName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    input: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<PathBuf>,
    out: PathBuf,
    rejects: PathBuf,
    config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FileDigest {
    path: PathBuf,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StageCounts {
    stage: StageName,
    input: usize,
    output: usize,
    skipped: usize,
    rejected: usize,
    backend_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    run: RunSpec,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    stages: Vec<StageCounts>,
}

#[derive(Debug, Serialize)]
struct StageReject<'a> {
    stage: StageName,
    #[serde(flatten)]
    reject: &'a Reject,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

fn resolve(args: SynthArgs) -> Result<(RunSpec, Option<PathBuf>)> {
    let mut stages = match args.stage {
        Some(s) => vec![s],
        None => args.stages,
    };
    if stages.is_empty() {
        return Err(Failure::Config("pass --stage or --stages".into()).into());
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Config("stages must be distinct and in a, b, c order".into()).into());
    }
    stages.dedup();
    let input = require(args.input, "--in")?;
    let out = require(args.out, "--out")?;
    if stages[0] == StageName::A && args.task.is_none() {
        return Err(Failure::Config("stage a needs --task".into()).into());
    }
    if stages[0] != StageName::A && args.task.is_some() {
        return Err(Failure::Config("--task only applies to stage a".into()).into());
    }
    if stages.contains(&StageName::B) && args.pool.is_none() {
        return Err(Failure::Config("stage b needs --pool".into()).into());
    }
    let mut config = PipelineConfig::load(args.config.as_deref())?;
    args.overrides.apply(&mut config);
    config.check()?;
    let rejects = args.rejects.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".rejects.jsonl");
        p.into()
    });
    let spec = RunSpec {
        stages,
        task: args.task,
        input,
        pool: args.pool,
        out,
        rejects,
        config,
    };
    Ok((spec, args.manifest))
}

fn builder_for(task: &str) -> Result<Builder, Failure> {
    let sig: TaskSignature = task
        .parse()
        .map_err(|e| Failure::Config(format!("--task {task}: {e}")))?;
    Builder::for_signature(&sig)
        .ok_or_else(|| Failure::Config(format!("no stage-a builder produces {sig}")))
}

struct RunResult {
    dialogues: Vec<Dialogue>,
    rejects: Vec<(StageName, Reject)>,
    counts: Vec<StageCounts>,
}

fn execute(spec: &RunSpec) -> Result<RunResult> {
    let cfg = &spec.config;
    let backend = cfg.backend()?;
    let ops = cfg.ops(backend.as_ref());
    let builder = spec.task.as_deref().map(builder_for).transpose()?;
    let pool = match &spec.pool {
        Some(p) => {
            let entries: Vec<PoolEntry> = read_jsonl(p)?;
            Some(
                DistractorPool::new(entries)
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };

    let mut corpus: Vec<Dialogue> = Vec::new();
    let mut rejects = Vec::new();
    let mut counts = Vec::new();
    for (i, &stage) in spec.stages.iter().enumerate() {
        let (input, out): (usize, StageOutput) = match stage {
            StageName::A => {
                let records: Vec<SourceRecord> = read_jsonl(&spec.input)?;
                let builder = builder.expect("checked in resolve");
                let out = stage_a::run_stage_a(&records, builder, &ops, cfg.seed, cfg.concurrency);
                (records.len(), out)
            }
            StageName::B | StageName::C => {
                if i == 0 {
                    corpus = read_jsonl(&spec.input)?;
                }
                let out = if stage == StageName::B {
                    let b = StageBConfig {
                        k_min: cfg.k_min,
                        k_max: cfg.k_max,
                    };
                    let pool = pool.as_ref().expect("checked in resolve");
                    stage_b::run_stage_b(&corpus, pool, b, &ops, cfg.seed, cfg.concurrency)
                } else {
                    stage_c::run_stage_c(
                        &corpus,
                        &ops,
                        cfg.apply_fraction,
                        cfg.seed,
                        cfg.concurrency,
                    )
                }
                .map_err(|e| Failure::Config(e.to_string()))?;
                (corpus.len(), out)
            }
        };
        let c = StageCounts {
            stage,
            input,
            output: out.dialogues.len(),
            skipped: out.skipped.len(),
            rejected: out.rejects.len(),
            backend_failures: out.backend_failures(),
        };
        eprintln!(
            "stage {}: {} in, {} out, {} skipped, {} rejected",
            format!("{stage:?}").to_lowercase(),
            c.input,
            c.output,
            c.skipped,
            c.rejected
        );
        counts.push(c);
        rejects.extend(out.rejects.into_iter().map(|r| (stage, r)));
        corpus = out.dialogues;
    }
    Ok(RunResult {
        dialogues: corpus,
        rejects,
        counts,
    })
}

fn write_outputs(spec: &RunSpec, result: &RunResult) -> Result<()> {
    write_jsonl(&spec.out, &result.dialogues)?;
    let rejects: Vec<StageReject> = result
        .rejects
        .iter()
        .map(|(stage, reject)| StageReject {
            stage: *stage,
            reject,
        })
        .collect();
    write_jsonl(&spec.rejects, &rejects)?;
    Ok(())
}

fn input_digests(spec: &RunSpec) -> Result<Vec<FileDigest>> {
    std::iter::once(&spec.input)
        .chain(spec.pool.as_ref())
        .map(|p| digest(p))
        .collect()
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn backend_check(result: &RunResult) -> Result<()> {
    let failures: usize = result.counts.iter().map(|c| c.backend_failures).sum();
    if failures > 0 {
        return Err(Failure::Backend(format!(
            "{failures} record(s) failed on the completion backend"
        ))
        .into());
    }
    Ok(())
}

pub fn run(args: SynthArgs) -> Result<()> {
    if let Some(path) = args.replay.clone() {
        return replay(&path, args.manifest, &args.overrides);
    }
    let (spec, manifest_path) = resolve(args)?;
    let inputs = input_digests(&spec)?;
    let result = execute(&spec)?;
    write_outputs(&spec, &result)?;
    if let Some(path) = manifest_path {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: vec![digest(&spec.out)?, digest(&spec.rejects)?],
            stages: result.counts.clone(),
            run: spec,
        };
        write_manifest(&path, &manifest)?;
    }
    backend_check(&result)
}

fn replay(path: &Path, new_manifest: Option<PathBuf>, overrides: &Overrides) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let recorded: Manifest = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("invalid manifest {}: {e}", path.display())))?;
    let mut spec = recorded.run.clone();
    // Only the endpoint may change on replay; it does not affect content.
    if overrides.backend_url.is_some() {
        spec.config.backend_url = overrides.backend_url.clone();
    }
    spec.config.check()?;

    let inputs = input_digests(&spec)?;
    for (now, then) in inputs.iter().zip(&recorded.inputs) {
        if now.sha256 != then.sha256 {
            return Err(Failure::Config(format!(
                "input {} changed since the recorded run",
                now.path.display()
            ))
            .into());
        }
    }
    let result = execute(&spec)?;
    write_outputs(&spec, &result)?;
    let outputs = vec![digest(&spec.out)?, digest(&spec.rejects)?];
    if let Some(p) = new_manifest {
        let manifest = Manifest {
            inputs,
            outputs: outputs.clone(),
            stages: result.counts.clone(),
            run: spec.clone(),
            ..recorded.clone()
        };
        write_manifest(&p, &manifest)?;
    }
    backend_check(&result)?;
    for (now, then) in outputs.iter().zip(&recorded.outputs) {
        if now.sha256 != then.sha256 {
            return Err(Failure::Violations(format!(
                "replayed {} differs from the recorded digest",
                now.path.display()
            ))
            .into());
        }
    }
    eprintln!("replay matches {}", path.display());
    Ok(())
}
