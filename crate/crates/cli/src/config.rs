//! Run configuration: one JSON file with corpus / model / train / bench
//! sections, plus OPENMAP_* environment overrides.
//!
//! Override names use double underscores between path segments, e.g.
//! `OPENMAP_TRAIN__EPOCHS=2` sets `train.epochs` and `OPENMAP_RUN_DIR=...`
//! sets the top-level `run_dir`. Values are parsed as JSON when possible,
//! otherwise taken as strings.

use anyhow::{bail, Context, Result};
use brainage_core::corpus::CorpusConfig;
use brainage_core::model::ModelConfig;
use brainage_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Token counts to sweep.
    pub sizes: Vec<usize>,
    /// Timed repetitions per point (median is reported).
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![256, 512, 1024, 2048, 4096],
            reps: 3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        apply_env_overrides(&mut value)?;
        let mut config: RunConfig =
            serde_json::from_value(value).context("config does not match the expected schema")?;
        if let Some(seed) = seed_override {
            config.corpus.seed = seed;
            config.model.seed = seed;
            config.train.seed = seed;
            config.bench.seed = seed;
        }
        Ok(config)
    }

    /// Validate every section up front, listing all violations at once.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.corpus.validate() {
            out.push(format!("corpus: {e}"));
        }
        if let Err(e) = self.model.validate() {
            out.push(format!("model: {e}"));
        }
        if let Err(e) = self.train.validate() {
            out.push(format!("train: {e}"));
        }
        if self.bench.sizes.is_empty() {
            out.push("bench: sizes must be non-empty".into());
        }
        if self.bench.reps == 0 {
            out.push("bench: reps must be >= 1".into());
        }
        if self.model.chunk != self.corpus.chunk {
            out.push(format!(
                "model.chunk {:?} must match corpus.chunk {:?}",
                self.model.chunk, self.corpus.chunk
            ));
        }
        if self.model.regions != self.corpus.regions {
            out.push(format!(
                "model.regions {} must match corpus.regions {}",
                self.model.regions, self.corpus.regions
            ));
        }
        out
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.run_dir.join("corpus")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("best")
    }
}

fn apply_env_overrides(value: &mut serde_json::Value) -> Result<()> {
    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with("OPENMAP_"))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path = key.trim_start_matches("OPENMAP_");
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        let parsed: serde_json::Value = serde_json::from_str(&raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            bail!("malformed override name {key}");
        }
        set_path(value, &key, &segments, parsed)?;
    }
    Ok(())
}

fn set_path(
    node: &mut serde_json::Value,
    key: &str,
    segments: &[String],
    parsed: serde_json::Value,
) -> Result<()> {
    let obj = node
        .as_object_mut()
        .with_context(|| format!("override {key}: path crosses a non-object"))?;
    match segments {
        [last] => {
            obj.insert(last.clone(), parsed);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = obj
                .entry(head.clone())
                .or_insert_with(|| serde_json::json!({}));
            set_path(child, key, rest, parsed)
        }
        [] => unreachable!("checked non-empty"),
    }
}

/// A ready-to-run desk-scale configuration.
pub fn desk_config(run_dir: &Path) -> RunConfig {
    RunConfig {
        run_dir: run_dir.to_path_buf(),
        corpus: CorpusConfig::desk(),
        model: ModelConfig::desk(),
        train: TrainConfig::desk(),
        bench: BenchConfig::default(),
    }
}
