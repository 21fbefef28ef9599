use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dialogue_forge::dialogue::{validate_dialogue, Dialogue};
use dialogue_forge::jsonl::{read_jsonl, write_jsonl};
use dialogue_forge::pack::{
    pack_corpus, PackParams, SampleRef, SamplingConfig, DEFAULT_L_MAX, DEFAULT_L_MIN,
};
use dialogue_forge::pipeline::map_ordered;
use dialogue_forge::stream::{build_mask, mask_runs, BlockVisibility};
use dialogue_forge::stream::{
    loss_summary, serialize as to_stream, validate_stream, LossSummary, StreamConfig, TokenStream,
};

use super::{require, Failure, PipelineConfig};

/// Dense export is for debugging small streams only.
const DENSE_MAX_LEN: usize = 4096;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_lines_or_stdout<T: Serialize>(path: Option<&Path>, items: &[T]) -> Result<()> {
    match path {
        Some(p) => Ok(write_jsonl(p, items)?),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(&dialogue_forge::jsonl::to_jsonl_bytes(items))?;
            Ok(())
        }
    }
}

fn stream_config(path: Option<&Path>) -> Result<StreamConfig> {
    Ok(PipelineConfig::load(path)?.stream.into())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Treat the input as token streams instead of dialogues.
    #[arg(long)]
    streams: bool,
    /// Write violations as JSONL here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Finding<V: Serialize> {
    id: String,
    violations: Vec<V>,
}

pub fn validate(args: ValidateArgs) -> Result<()> {
    let input = require(args.input, "--in")?;
    let (checked, bad) = if args.streams {
        let streams: Vec<TokenStream> = read_jsonl(&input)?;
        let findings: Vec<_> = streams
            .iter()
            .map(|s| Finding {
                id: s.dialogue_id.clone(),
                violations: validate_stream(s),
            })
            .filter(|f| !f.violations.is_empty())
            .collect();
        write_lines_or_stdout(args.report.as_deref(), &findings)?;
        (streams.len(), findings.len())
    } else {
        let dialogues: Vec<Dialogue> = read_jsonl(&input)?;
        let findings: Vec<_> = dialogues
            .iter()
            .map(|d| Finding {
                id: d.id.clone(),
                violations: validate_dialogue(d).violations,
            })
            .filter(|f| !f.violations.is_empty())
            .collect();
        write_lines_or_stdout(args.report.as_deref(), &findings)?;
        (dialogues.len(), findings.len())
    };
    eprintln!("{checked} checked, {bad} with violations");
    if bad > 0 {
        return Err(
            Failure::Violations(format!("{bad} of {checked} records have violations")).into(),
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SerializeArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON pipeline config; only its `stream` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
}

pub fn serialize(args: SerializeArgs) -> Result<()> {
    let input = require(args.input, "--in")?;
    let out = require(args.out, "--out")?;
    let cfg = stream_config(args.config.as_deref())?;
    let dialogues: Vec<Dialogue> = read_jsonl(&input)?;
    let streams = map_ordered(&dialogues, args.concurrency.max(1), |d| {
        to_stream(d, &cfg).with_context(|| format!("serializing {}", d.id))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_jsonl(&out, &streams)?;
    eprintln!("{} streams written", streams.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit full 0/1 rows instead of per-block intervals.
    #[arg(long)]
    dense: bool,
}

#[derive(Debug, Serialize)]
struct RunLengthMask<'a> {
    dialogue_id: &'a str,
    total_len: usize,
    blocks: Vec<BlockVisibility>,
}

#[derive(Debug, Serialize)]
struct DenseMask<'a> {
    dialogue_id: &'a str,
    total_len: usize,
    rows: Vec<String>,
}

pub fn mask(args: MaskArgs) -> Result<()> {
    let input = require(args.input, "--in")?;
    let streams: Vec<TokenStream> = read_jsonl(&input)?;
    if args.dense {
        let mut out = Vec::with_capacity(streams.len());
        for s in &streams {
            if s.total_len > DENSE_MAX_LEN {
                return Err(Failure::Config(format!(
                    "{} has {} positions; --dense is limited to {DENSE_MAX_LEN}",
                    s.dialogue_id, s.total_len
                ))
                .into());
            }
            let m = build_mask(s).with_context(|| s.dialogue_id.clone())?;
            out.push(DenseMask {
                dialogue_id: &s.dialogue_id,
                total_len: s.total_len,
                rows: m.to_rows(),
            });
        }
        write_lines_or_stdout(args.out.as_deref(), &out)
    } else {
        let out = streams
            .iter()
            .map(|s| {
                Ok(RunLengthMask {
                    dialogue_id: &s.dialogue_id,
                    total_len: s.total_len,
                    blocks: mask_runs(s).with_context(|| s.dialogue_id.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_lines_or_stdout(args.out.as_deref(), &out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SortOrder {
    /// Keep draw order.
    None,
    /// Longest samples first.
    Desc,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// JSON map from category to sampling weight.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `<category>.jsonl` stream files.
    #[arg(long)]
    in_dir: Option<PathBuf>,
    /// Number of draws.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_L_MIN)]
    l_min: usize,
    #[arg(long, default_value_t = DEFAULT_L_MAX)]
    l_max: usize,
    #[arg(long, env = "DF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SortOrder::None)]
    sort: SortOrder,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
}

/// The two fields of a stream record the packer needs.
#[derive(Debug, Deserialize)]
struct StreamLength {
    dialogue_id: String,
    total_len: usize,
}

fn load_corpora(dir: &Path) -> Result<BTreeMap<String, Vec<SampleRef>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
    paths.sort();
    let mut corpora = BTreeMap::new();
    for p in paths {
        let category = p
            .file_stem()
            .expect("has extension")
            .to_string_lossy()
            .into_owned();
        let rows: Vec<StreamLength> = read_jsonl(&p)?;
        let samples = rows
            .into_iter()
            .map(|r| SampleRef {
                id: r.dialogue_id,
                len: r.total_len,
            })
            .collect();
        corpora.insert(category, samples);
    }
    Ok(corpora)
}

pub fn pack(args: PackArgs) -> Result<()> {
    let config = require(args.config, "--config")?;
    let dir = require(args.in_dir, "--in-dir")?;
    let out = require(args.out, "--out")?;
    let text = std::fs::read_to_string(&config)
        .with_context(|| format!("reading {}", config.display()))?;
    let weights: SamplingConfig = serde_json::from_str(&text).map_err(|e| {
        Failure::Config(format!("invalid sampling config {}: {e}", config.display()))
    })?;
    weights
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    if args.l_min > args.l_max || args.l_max == 0 {
        return Err(Failure::Config(format!(
            "need 0 < l-min <= l-max, got {}..{}",
            args.l_min, args.l_max
        ))
        .into());
    }
    let corpora = load_corpora(&dir)?;
    let params = PackParams {
        n_draws: args.n,
        l_min: args.l_min,
        l_max: args.l_max,
        seed: args.seed,
        sort_desc: args.sort == SortOrder::Desc,
    };
    let (packs, stats) =
        pack_corpus(&weights, &corpora, params).map_err(|e| Failure::Config(e.to_string()))?;
    write_jsonl(&out, &packs)?;
    if let Some(p) = args.stats {
        write_json(&p, &stats)?;
    }
    eprintln!(
        "{} packs, mean fill {:.4}, {} underfull",
        stats.packs, stats.mean_fill, stats.underfull
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// JSON pipeline config; its `stream` section sizes the loss regions.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub signatures: BTreeMap<String, usize>,
    /// Dependency depth (in rounds) to dialogue count.
    pub depth_histogram: BTreeMap<u32, usize>,
    /// Distractor rounds per dialogue to dialogue count.
    pub distractor_histogram: BTreeMap<usize, usize>,
    pub distractor_rounds: usize,
    pub loss: LossSummary,
}

pub fn corpus_stats(dialogues: &[Dialogue], cfg: &StreamConfig) -> Result<CorpusStats> {
    let mut st = CorpusStats {
        dialogues: dialogues.len(),
        ..Default::default()
    };
    for d in dialogues {
        *st.signatures.entry(d.signature.to_string()).or_default() += 1;
        if let Some(n) = d.dep_depth_value {
            *st.depth_histogram.entry(n).or_default() += 1;
        }
        let k = d.distractor_count();
        *st.distractor_histogram.entry(k).or_default() += 1;
        st.distractor_rounds += k;
        let s = to_stream(d, cfg).with_context(|| format!("serializing {}", d.id))?;
        st.loss += loss_summary(&s);
    }
    Ok(st)
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let input = require(args.input, "--in")?;
    let cfg = stream_config(args.config.as_deref())?;
    let dialogues: Vec<Dialogue> = read_jsonl(&input)?;
    let st = corpus_stats(&dialogues, &cfg)?;
    match args.out {
        Some(p) => write_json(&p, &st),
        None => {
            let mut text = serde_json::to_string_pretty(&st).expect("serializable");
            text.push('\n');
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
