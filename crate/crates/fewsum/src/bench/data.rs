//! Datasets, few-shot sets, and JSONL ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One (document, summary) pair; multi-reference tasks carry several
/// summaries, query-focused tasks carry a query that is concatenated ahead
/// of the document at model-input time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub document: String,
    pub summaries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl Example {
    fn validate(&self) -> Result<()> {
        if self.document.trim().is_empty() {
            return Err(Error::data(format!("example {}: empty document", self.id)));
        }
        if self.summaries.is_empty() || self.summaries.iter().all(|s| s.trim().is_empty()) {
            return Err(Error::data(format!(
                "example {}: needs at least one non-empty summary",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Test,
}

/// One split of one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub task_id: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(task_id: impl Into<String>, split: Split, examples: Vec<Example>) -> Result<Self> {
        let ds = Dataset {
            task_id: task_id.into(),
            split,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for ex in &self.examples {
            ex.validate()?;
            if !seen.insert(&ex.id) {
                return Err(Error::data(format!(
                    "dataset {}: duplicate example id {}",
                    self.task_id, ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.id.clone()).collect()
    }
}

/// Train pool plus disjoint test split for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub train_pool: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn validate(&self) -> Result<()> {
        self.train_pool.validate()?;
        self.test.validate()?;
        if self.train_pool.task_id != self.test.task_id {
            return Err(Error::data("train_pool and test belong to different tasks"));
        }
        let train_ids = self.train_pool.ids();
        for ex in &self.test.examples {
            if train_ids.contains(&ex.id) {
                return Err(Error::data(format!(
                    "task {}: id {} appears in both splits",
                    self.train_pool.task_id, ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.train_pool.task_id
    }
}

/// On-disk record shape for line-delimited data files. `summary` accepts a
/// single string or a list of reference summaries.
#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    document: String,
    summary: SummaryField,
    #[serde(default)]
    query: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SummaryField {
    One(String),
    Many(Vec<String>),
}

/// Loads a line-delimited dataset file. Malformed lines are reported with
/// their 1-based line number; duplicate ids are rejected by name.
pub fn load_jsonl(path: &Path, task_id: &str, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!(
                "{} line {}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let summaries = match rec.summary {
            SummaryField::One(s) => vec![s],
            SummaryField::Many(v) => v,
        };
        examples.push(Example {
            id: rec.id,
            document: rec.document,
            summaries,
            query: rec.query,
        });
    }
    Dataset::new(task_id, split, examples)
}

/// One sampled k-shot training set with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotSet {
    pub task_id: String,
    pub k: usize,
    pub set_index: usize,
    /// Sub-seed this set was drawn with; recorded for standalone reruns.
    pub seed: u64,
    pub example_ids: Vec<String>,
}

impl FewShotSet {
    pub fn validate_against(&self, pool: &Dataset) -> Result<()> {
        if self.example_ids.len() != self.k {
            return Err(Error::contract(format!(
                "few-shot set has {} ids, expected k={}",
                self.example_ids.len(),
                self.k
            )));
        }
        let pool_ids = pool.ids();
        let mut seen = BTreeSet::new();
        for id in &self.example_ids {
            if !pool_ids.contains(id) {
                return Err(Error::data(format!("shot id {id} not in train pool")));
            }
            if !seen.insert(id) {
                return Err(Error::data(format!("shot id {id} repeated within a set")));
            }
        }
        Ok(())
    }

    /// Resolves the sampled ids back to examples, in sampled order.
    pub fn resolve<'a>(&self, pool: &'a Dataset) -> Result<Vec<&'a Example>> {
        self.example_ids
            .iter()
            .map(|id| {
                pool.examples
                    .iter()
                    .find(|e| &e.id == id)
                    .ok_or_else(|| Error::data(format!("shot id {id} not in train pool")))
            })
            .collect()
    }
}

/// Samples `num_sets` independent k-shot sets without replacement from the
/// train pool. Each set uses the sub-seed `derive(master, task, k, index)`,
/// so any one set can be regenerated without the others. Overlap between
/// sets is permitted.
pub fn sample_shot_sets(
    dataset: &Dataset,
    k: usize,
    num_sets: usize,
    master_seed: u64,
) -> Result<Vec<FewShotSet>> {
    if k == 0 {
        return Err(Error::contract("k must be >= 1"));
    }
    if dataset.len() < k {
        return Err(Error::data(format!(
            "train pool of {} has fewer than k={k} examples",
            dataset.len()
        )));
    }
    let mut sets = Vec::with_capacity(num_sets);
    for set_index in 0..num_sets {
        let parts = [
            "shots",
            dataset.task_id.as_str(),
            &k.to_string(),
            &set_index.to_string(),
        ];
        let seed = seed::derive_seed(master_seed, &parts);
        let mut rng = seed::derive_rng(master_seed, &parts);
        let mut ids: Vec<String> = dataset.examples.iter().map(|e| e.id.clone()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(k);
        sets.push(FewShotSet {
            task_id: dataset.task_id.clone(),
            k,
            set_index,
            seed,
            example_ids: ids,
        });
    }
    Ok(sets)
}
