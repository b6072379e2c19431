//! One TOML document configures every pipeline stage.
//!
//! A [`RunConfig`] gathers the per-stage configuration structs from the core
//! crate under named sections plus a global `seed`. Every section and every
//! key is optional; omitted parts fall back to their documented defaults.
//! Unknown sections or keys are rejected so typos cannot silently revert a
//! setting to its default.
//!
//! Individual keys can be overridden from the command line with
//! `--set section.key=value`, applied in order after the file is read. The
//! fully resolved configuration is embedded into every artifact a command
//! writes, so each file records exactly how it was produced.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cptrack_core::detector::{DetectorConfig, GenConfig};
use cptrack_core::follow::FollowConfig;
use cptrack_core::loss::LossConfig;
use cptrack_core::model::ModelConfig;
use cptrack_core::seed::SearchWindow;
use cptrack_core::train::{AssemblyConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Resolved configuration for a whole pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for the run; all stage-level randomness derives from it.
    pub seed: u64,
    /// Detector geometry.
    pub detector: DetectorConfig,
    /// Event generation: track counts and fake-hit contamination.
    pub gen: GenConfig,
    /// Seed-search admissibility window.
    pub search: SearchWindow,
    /// Network architecture.
    pub model: ModelConfig,
    /// Joint loss weights.
    pub loss: LossConfig,
    /// Optimizer and schedule.
    pub train: TrainConfig,
    /// Dataset assembly: event count, ghost caps, eval mix ratio.
    pub assembly: AssemblyConfig,
    /// Track-following thresholds.
    pub follow: FollowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            detector: DetectorConfig::default(),
            gen: GenConfig::default(),
            search: SearchWindow::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            assembly: AssemblyConfig::default(),
            follow: FollowConfig::default(),
        }
    }
}

impl RunConfig {
    /// Builds the effective configuration from an optional TOML file, a list
    /// of `key=value` overrides, and an optional seed override (strongest).
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                text.parse::<toml::Value>()
                    .with_context(|| format!("parsing config file {}", p.display()))?
            }
            None => toml::Value::Table(toml::value::Table::new()),
        };
        for spec in sets {
            apply_set(&mut doc, spec).with_context(|| format!("applying --set {spec}"))?;
        }
        if let Some(s) = seed {
            doc.as_table_mut()
                .context("config root must be a table")?
                .insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let cfg: RunConfig = doc.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Runs every section's own validation. Model dimensions are checked
    /// later, when a model is actually built from the config.
    pub fn validate(&self) -> Result<()> {
        self.detector.validate().context("detector")?;
        self.gen.validate().context("gen")?;
        self.search.validate().context("search")?;
        self.loss.validate().context("loss")?;
        self.train.validate().context("train")?;
        self.assembly.validate().context("assembly")?;
        self.follow.validate().context("follow")?;
        Ok(())
    }
}

/// Applies one `dotted.path=value` override onto a TOML document, creating
/// intermediate tables as needed. The value is parsed as TOML; anything that
/// does not parse (e.g. a bare word) is taken as a string.
fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .context("expected key=value, e.g. train.epochs=5")?;
    let path = path.trim();
    if path.is_empty() {
        bail!("empty key");
    }
    let value = parse_value(raw.trim());

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    let (last, init) = segments.split_last().expect("split yields at least one");
    for seg in init {
        if seg.is_empty() {
            bail!("empty path segment in {path:?}");
        }
        let table = node
            .as_table_mut()
            .with_context(|| format!("{seg} is not a table"))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::value::Table::new()));
    }
    if last.is_empty() {
        bail!("empty path segment in {path:?}");
    }
    node.as_table_mut()
        .with_context(|| format!("{last} cannot be set on a non-table"))?
        .insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("key v was just inserted"),
        _ => toml::Value::String(raw.to_string()),
    }
}
