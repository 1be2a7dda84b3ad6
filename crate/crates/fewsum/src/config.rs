//! Resolved run configuration and run manifests.
//!
//! A [`RunConfig`] is the single source of truth for a pipeline invocation:
//! it merges model, optimizer, tuning and harness settings with the data
//! declaration and the master seed. Every artifact embeds a copy, and every
//! command writes a [`Manifest`] that suffices to re-run it bit-identically.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{DecodeStrategy, ModelConfig};
use crate::train::OptimizerConfig;
use crate::tune::{InitStrategy, TuneConfig};

/// One task's data source: generated synthetic corpus or user JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Jsonl {
        task_id: String,
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

impl TaskSource {
    pub fn task_id(&self) -> &str {
        match self {
            TaskSource::Synthetic { spec } => &spec.task_id,
            TaskSource::Jsonl { task_id, .. } => task_id,
        }
    }
}

/// Declaration of one task in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(flatten)]
    pub source: TaskSource,
    /// Balanced contribution to the pre-training mixture.
    #[serde(default)]
    pub target_size: Option<usize>,
    /// Held-out tasks are excluded from pre-training and benchmarked in
    /// phase 2 instead.
    #[serde(default = "is_false")]
    pub held_out: bool,
}

fn is_false() -> bool {
    false
}

/// Per-k tuning budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KSetting {
    pub k: usize,
    pub steps: u64,
}

fn default_num_sets() -> usize {
    5
}
fn default_max_gen_len() -> usize {
    16
}
fn default_decode() -> DecodeStrategy {
    DecodeStrategy::Greedy
}

/// Benchmark sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub k_settings: Vec<KSetting>,
    #[serde(default = "default_num_sets")]
    pub num_sets: usize,
    pub strategies: Vec<InitStrategy>,
    #[serde(default = "default_decode")]
    pub decode: DecodeStrategy,
    #[serde(default = "default_max_gen_len")]
    pub max_gen_len: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            k_settings: vec![KSetting { k: 10, steps: 80 }, KSetting { k: 100, steps: 160 }],
            num_sets: 5,
            strategies: vec![
                InitStrategy::Random,
                InitStrategy::Universal,
            ],
            decode: DecodeStrategy::Greedy,
            max_gen_len: 16,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k_settings.is_empty() {
            return Err(Error::Validation(vec!["bench needs at least one k".into()]));
        }
        if self.num_sets == 0 {
            return Err(Error::Validation(vec!["num_sets must be >= 1".into()]));
        }
        if self.strategies.is_empty() {
            return Err(Error::Validation(vec![
                "bench needs at least one init strategy".into(),
            ]));
        }
        if self.max_gen_len == 0 {
            return Err(Error::Validation(vec!["max_gen_len must be >= 1".into()]));
        }
        Ok(())
    }
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub tune: TuneConfig,
    #[serde(default)]
    pub bench: BenchSettings,
    pub tasks: Vec<TaskConfig>,
    /// Extra tokens reserved in the vocabulary at pre-training time.
    #[serde(default)]
    pub extra_vocab: Vec<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.tune.validate()?;
        self.bench.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.source.task_id().to_string()) {
                return Err(Error::Validation(vec![format!(
                    "duplicate task id {}",
                    t.source.task_id()
                )]));
            }
        }
        if !self.tasks.iter().any(|t| !t.held_out) {
            return Err(Error::Validation(vec![
                "at least one task must be available for pre-training".into(),
            ]));
        }
        Ok(())
    }

    pub fn pretrain_tasks(&self) -> impl Iterator<Item = &TaskConfig> {
        self.tasks.iter().filter(|t| !t.held_out)
    }

    pub fn held_out_tasks(&self) -> impl Iterator<Item = &TaskConfig> {
        self.tasks.iter().filter(|t| t.held_out)
    }
}

/// Record of one command invocation: everything needed to reproduce its
/// outputs, plus the hashes those outputs had.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub run_config: RunConfig,
    /// Input artifact hashes, keyed by role (e.g. "backbone", "bank").
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    /// Paths the inputs were read from, so a replay can find them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub input_paths: BTreeMap<String, String>,
    /// Command-specific arguments (task, k, set index, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, String>,
    /// Output artifact hashes keyed by file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock time of the original run; replays preserve it so replayed
    /// artifacts stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, run_config: RunConfig) -> Self {
        Manifest {
            command: command.into(),
            run_config,
            inputs: BTreeMap::new(),
            input_paths: BTreeMap::new(),
            args: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timestamp: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = RunConfig {
            seed: 7,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            tune: TuneConfig::default(),
            bench: BenchSettings::default(),
            tasks: vec![TaskConfig {
                source: TaskSource::Synthetic {
                    spec: SyntheticSpec {
                        task_id: "copy".into(),
                        kind: crate::bench::SyntheticKind::Copy,
                        vocab_seed: 1,
                        train_size: 10,
                        test_size: 4,
                    },
                },
                target_size: Some(10),
                held_out: false,
            }],
            extra_vocab: vec![],
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        back.validate().unwrap();
    }

    #[test]
    fn all_held_out_is_rejected() {
        let cfg = RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            tune: TuneConfig::default(),
            bench: BenchSettings::default(),
            tasks: vec![TaskConfig {
                source: TaskSource::Synthetic {
                    spec: SyntheticSpec {
                        task_id: "x".into(),
                        kind: crate::bench::SyntheticKind::Copy,
                        vocab_seed: 0,
                        train_size: 5,
                        test_size: 2,
                    },
                },
                target_size: None,
                held_out: true,
            }],
            extra_vocab: vec![],
        };
        assert!(cfg.validate().is_err());
    }
}
