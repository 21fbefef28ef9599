//! Weighted category sampling and packing of serialized samples into
//! bounded-length training sequences.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PackError {
    #[error("category {0:?} has positive weight but no samples")]
    EmptyCategory(String),
    #[error("all sampling weights are zero")]
    AllZeroWeights,
    #[error("weight for {category:?} must be finite and non-negative, got {weight}")]
    InvalidWeight { category: String, weight: f64 },
    #[error("sample {id} has {len} tokens, more than the pack limit {max}")]
    SampleTooLong { id: String, len: usize, max: usize },
    #[error("pack bounds inverted: min {min} > max {max}")]
    InvalidBounds { min: usize, max: usize },
}

/// Default pack window: 61·1024 to 64·1024 tokens.
pub const DEFAULT_L_MIN: usize = 61 * 1024;
pub const DEFAULT_L_MAX: usize = 64 * 1024;

/// Relative category weights; normalized when sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SamplingConfig {
    pub categories: BTreeMap<String, f64>,
}

impl SamplingConfig {
    pub fn new<'a>(weights: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        SamplingConfig {
            categories: weights
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    /// The annealing mixture: understanding 0.25, text-only 0.15,
    /// text-to-image 0.5, editing 1.0, and 0.1 for each multi-turn task.
    pub fn annealing_mix<'a>(multi_turn_tasks: impl IntoIterator<Item = &'a str>) -> Self {
        let mut cfg = SamplingConfig::new([
            ("understanding", 0.25),
            ("text_only", 0.15),
            ("t2i", 0.5),
            ("edit", 1.0),
        ]);
        for task in multi_turn_tasks {
            cfg.categories.insert(task.to_string(), 0.1);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), PackError> {
        for (category, &weight) in &self.categories {
            if !weight.is_finite() || weight < 0.0 {
                return Err(PackError::InvalidWeight {
                    category: category.clone(),
                    weight,
                });
            }
        }
        if !self.categories.values().any(|&w| w > 0.0) {
            return Err(PackError::AllZeroWeights);
        }
        Ok(())
    }

    /// Category probabilities after normalization.
    pub fn probabilities(&self) -> BTreeMap<String, f64> {
        let total: f64 = self.categories.values().sum();
        self.categories
            .iter()
            .map(|(k, &w)| (k.clone(), if total > 0.0 { w / total } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub category: String,
    pub sample_id: String,
    pub len: usize,
}

/// `n` draws with replacement: a category by weight, then a sample
/// uniformly within it.
pub fn sample_stream(
    cfg: &SamplingConfig,
    corpora: &BTreeMap<String, Vec<SampleRef>>,
    n: usize,
    seed: u64,
) -> Result<Vec<Draw>, PackError> {
    cfg.validate()?;
    let active: Vec<(&String, f64)> = cfg
        .categories
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(k, &w)| (k, w))
        .collect();
    let mut pools = Vec::with_capacity(active.len());
    for (cat, _) in &active {
        match corpora.get(*cat) {
            Some(samples) if !samples.is_empty() => pools.push(samples),
            _ => return Err(PackError::EmptyCategory((*cat).clone())),
        }
    }
    let index = WeightedIndex::new(active.iter().map(|(_, w)| *w))
        .map_err(|_| PackError::AllZeroWeights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..n)
        .map(|_| {
            let c = index.sample(&mut rng);
            let pool = pools[c];
            let s = &pool[rng.gen_range(0..pool.len())];
            Draw {
                category: active[c].0.clone(),
                sample_id: s.id.clone(),
                len: s.len,
            }
        })
        .collect();
    Ok(draws)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pack {
    pub pack_id: String,
    pub sample_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub total: usize,
    pub underfull: bool,
}

/// Packs samples in the given order: each goes into the open pack if it
/// still fits under `l_max`, otherwise the open pack is closed and a new one
/// started. Packs that close below `l_min` are kept and flagged.
pub fn pack_greedy(
    samples: &[(String, usize)],
    l_min: usize,
    l_max: usize,
) -> Result<Vec<Pack>, PackError> {
    if l_min > l_max {
        return Err(PackError::InvalidBounds {
            min: l_min,
            max: l_max,
        });
    }
    if let Some((id, len)) = samples.iter().find(|(_, len)| *len > l_max) {
        return Err(PackError::SampleTooLong {
            id: id.clone(),
            len: *len,
            max: l_max,
        });
    }
    let mut packs: Vec<Pack> = Vec::new();
    let mut open: Option<Pack> = None;
    let close = |p: Pack, packs: &mut Vec<Pack>| {
        let underfull = p.total < l_min;
        packs.push(Pack { underfull, ..p });
    };
    for (id, len) in samples {
        if let Some(p) = &open {
            if p.total + len > l_max {
                close(open.take().expect("open"), &mut packs);
            }
        }
        let p = open.get_or_insert_with(|| Pack {
            pack_id: String::new(),
            sample_ids: Vec::new(),
            lengths: Vec::new(),
            total: 0,
            underfull: false,
        });
        p.sample_ids.push(id.clone());
        p.lengths.push(*len);
        p.total += len;
    }
    if let Some(p) = open {
        close(p, &mut packs);
    }
    for (i, p) in packs.iter_mut().enumerate() {
        p.pack_id = format!("pack-{i:06}");
    }
    Ok(packs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackStats {
    pub packs: usize,
    pub samples: usize,
    pub tokens: usize,
    pub mean_fill: f64,
    pub underfull: usize,
    pub category_token_share: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackParams {
    pub n_draws: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub seed: u64,
    pub sort_desc: bool,
}

/// Draws, optionally sorts longest-first, packs, and summarizes.
pub fn pack_corpus(
    cfg: &SamplingConfig,
    corpora: &BTreeMap<String, Vec<SampleRef>>,
    params: PackParams,
) -> Result<(Vec<Pack>, PackStats), PackError> {
    let mut draws = sample_stream(cfg, corpora, params.n_draws, params.seed)?;
    if params.sort_desc {
        draws.sort_by_key(|d| std::cmp::Reverse(d.len));
    }
    let items: Vec<(String, usize)> = draws.iter().map(|d| (d.sample_id.clone(), d.len)).collect();
    let packs = pack_greedy(&items, params.l_min, params.l_max)?;

    let tokens: usize = packs.iter().map(|p| p.total).sum();
    let mut share: BTreeMap<String, f64> = BTreeMap::new();
    for d in &draws {
        *share.entry(d.category.clone()).or_default() += d.len as f64;
    }
    if tokens > 0 {
        share.values_mut().for_each(|v| *v /= tokens as f64);
    }
    let mean_fill = if packs.is_empty() {
        0.0
    } else {
        packs
            .iter()
            .map(|p| p.total as f64 / params.l_max as f64)
            .sum::<f64>()
            / packs.len() as f64
    };
    let stats = PackStats {
        packs: packs.len(),
        samples: draws.len(),
        tokens,
        mean_fill,
        underfull: packs.iter().filter(|p| p.underfull).count(),
        category_token_share: share,
    };
    Ok((packs, stats))
}
