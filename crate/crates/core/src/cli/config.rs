use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dialogue_forge::ops::{
    CompletionBackend, CompletionParams, MockBackend, OpContext, RemoteBackend,
};
use dialogue_forge::stream::StreamSettings;

use super::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

/// Everything a synthesis run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_url: Option<String>,
    pub seed: u64,
    pub concurrency: usize,
    pub retries: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub apply_fraction: f64,
    pub stream: StreamSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let params = CompletionParams::default();
        PipelineConfig {
            backend: BackendKind::Mock,
            backend_url: None,
            seed: 0,
            concurrency: 8,
            retries: 2,
            max_tokens: params.max_length,
            temperature: params.temperature,
            k_min: 1,
            k_max: 3,
            apply_fraction: 1.0,
            stream: StreamSettings::default(),
        }
    }
}

pub const MAX_CONCURRENCY: usize = 256;

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), Failure> {
        let bad = |msg: String| Err(Failure::Config(msg));
        if self.backend == BackendKind::Remote
            && self.backend_url.as_deref().is_none_or(str::is_empty)
        {
            return bad("the remote backend needs --backend-url or DF_BACKEND_URL".into());
        }
        if !(1..=MAX_CONCURRENCY).contains(&self.concurrency) {
            return bad(format!("concurrency must be in 1..={MAX_CONCURRENCY}"));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!(
                "need 1 <= k-min <= k-max, got {}..{}",
                self.k_min, self.k_max
            ));
        }
        if !(0.0..=1.0).contains(&self.apply_fraction) {
            return bad(format!(
                "apply-fraction {} outside [0, 1]",
                self.apply_fraction
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            ));
        }
        if self.max_tokens == 0 {
            return bad("max-tokens must be positive".into());
        }
        Ok(())
    }

    pub fn backend(&self) -> Result<Box<dyn CompletionBackend>> {
        Ok(match self.backend {
            BackendKind::Mock => Box::new(MockBackend),
            BackendKind::Remote => {
                let url = self.backend_url.clone().unwrap_or_default();
                Box::new(RemoteBackend::new(url).context("building remote backend")?)
            }
        })
    }

    pub fn ops<'a>(&self, backend: &'a dyn CompletionBackend) -> OpContext<'a> {
        OpContext {
            backend,
            params: CompletionParams {
                max_length: self.max_tokens,
                temperature: self.temperature,
            },
            retries: self.retries,
        }
    }
}

/// Flags that override config-file values. Unset flags leave the file (or
/// the default) in place.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Root seed for every derived random choice.
    #[arg(long, env = "DF_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Completion endpoint for the remote backend.
    #[arg(long, env = "DF_BACKEND_URL")]
    pub backend_url: Option<String>,
    /// Records processed (and backend requests in flight) at once.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Extra attempts per atomic operation after a failure.
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Fewest distractor rounds inserted per dialogue.
    #[arg(long)]
    pub k_min: Option<usize>,
    /// Most distractor rounds inserted per dialogue.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Share of eligible dialogues given an interleaved answer.
    #[arg(long)]
    pub apply_fraction: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.backend, &self.backend);
        if self.backend_url.is_some() {
            cfg.backend_url = self.backend_url.clone();
        }
        set(&mut cfg.concurrency, &self.concurrency);
        set(&mut cfg.retries, &self.retries);
        set(&mut cfg.max_tokens, &self.max_tokens);
        set(&mut cfg.temperature, &self.temperature);
        set(&mut cfg.k_min, &self.k_min);
        set(&mut cfg.k_max, &self.k_max);
        set(&mut cfg.apply_fraction, &self.apply_fraction);
    }
}
