//! Deterministic synthetic summarization tasks.
//!
//! Documents are drawn from a shared word inventory with a per-task
//! frequency skew, so distinct tasks form distinct "domains" while staying
//! mutually intelligible — which is what makes cross-task transfer
//! measurable at desk scale. Marker words occasionally appear as noise in
//! every task, so a model can later be prefix-tuned toward a *new* marker
//! without vocabulary surgery.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::data::{Dataset, Example, Split, TaskData};

/// Shared content-word inventory.
const WORDS: [&str; 40] = [
    "arbol", "brimo", "calda", "dovan", "elric", "fandu", "gorse", "hilta", "ivory", "jumar",
    "kelpa", "lomir", "munda", "nerov", "ostin", "parel", "quova", "rilta", "sovan", "tulme",
    "umbra", "velda", "wirth", "xenti", "yolva", "zemir", "aldor", "bruna", "cindo", "dralt",
    "evoni", "frask", "gilda", "horvu", "istel", "jolva", "krems", "lunde", "morva", "nulta",
];

/// Marker words; any synthetic document may contain them as noise, and the
/// keyword task treats exactly one of them as its extraction trigger.
pub const MARKERS: [&str; 8] = ["mk0", "mk1", "mk2", "mk3", "mk4", "mk5", "mk6", "mk7"];

/// Sentence delimiter used by lead-k documents.
pub const SENTENCE_END: &str = "fin";

/// Every token a synthetic task can emit. Reserving this as `extra_vocab`
/// at pre-training time keeps held-out domains free of unknown-token holes.
pub fn token_inventory() -> Vec<String> {
    WORDS
        .iter()
        .chain(MARKERS.iter())
        .chain(std::iter::once(&SENTENCE_END))
        .map(|s| s.to_string())
        .collect()
}

const MARKER_NOISE_PROB: f64 = 0.08;

/// What the target summary is, as a function of the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Summary = the first `sentences` sentences of the document.
    Lead { sentences: usize },
    /// Summary = the `span` words following `marker`.
    Keyword { marker: String, span: usize },
    /// Summary = the whole (short) document.
    Copy,
}

/// Recipe for one deterministic synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task_id: String,
    pub kind: SyntheticKind,
    /// Seeds both the domain's word-frequency skew and example sampling.
    pub vocab_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.task_id.trim().is_empty() {
            return Err(Error::contract("synthetic task needs a non-empty id"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::contract("synthetic sizes must be >= 1"));
        }
        match &self.kind {
            SyntheticKind::Lead { sentences } if *sentences == 0 => {
                Err(Error::contract("lead task needs sentences >= 1"))
            }
            SyntheticKind::Keyword { marker, span } => {
                if *span == 0 {
                    return Err(Error::contract("keyword task needs span >= 1"));
                }
                if !MARKERS.contains(&marker.as_str()) {
                    return Err(Error::contract(format!(
                        "keyword marker {marker} is not in the marker inventory"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

struct DomainSampler {
    perm: Vec<usize>,
    weights: WeightedIndex<f64>,
}

impl DomainSampler {
    fn new(vocab_seed: u64) -> Self {
        let mut rng = seed::derive_rng(vocab_seed, &["domain"]);
        let mut perm: Vec<usize> = (0..WORDS.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        // zipf-like skew over the permuted inventory
        let weights =
            WeightedIndex::new((0..WORDS.len()).map(|r| 1.0 / (r as f64 + 1.5))).unwrap();
        DomainSampler { perm, weights }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> &'static str {
        if rng.gen::<f64>() < MARKER_NOISE_PROB {
            MARKERS[rng.gen_range(0..MARKERS.len())]
        } else {
            WORDS[self.perm[self.weights.sample(rng)]]
        }
    }

    /// Like `word`, but never yields `banned`; keyword documents must
    /// contain their trigger marker exactly once.
    fn word_avoiding(&self, rng: &mut ChaCha8Rng, banned: &str) -> &'static str {
        loop {
            let w = self.word(rng);
            if w != banned {
                return w;
            }
        }
    }

    fn content_word(&self, rng: &mut ChaCha8Rng) -> &'static str {
        WORDS[self.perm[self.weights.sample(rng)]]
    }
}

fn build_example(
    spec: &SyntheticSpec,
    sampler: &DomainSampler,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Example {
    match &spec.kind {
        SyntheticKind::Lead { sentences } => {
            let n_sent = rng.gen_range(sentences + 1..sentences + 3);
            let mut doc_tokens: Vec<&str> = Vec::new();
            let mut summary_tokens: Vec<&str> = Vec::new();
            for s in 0..n_sent {
                let len = rng.gen_range(3..6);
                for _ in 0..len {
                    let w = sampler.word(rng);
                    doc_tokens.push(w);
                    if s < *sentences {
                        summary_tokens.push(w);
                    }
                }
                doc_tokens.push(SENTENCE_END);
            }
            Example {
                id,
                document: doc_tokens.join(" "),
                summaries: vec![summary_tokens.join(" ")],
                query: None,
            }
        }
        SyntheticKind::Keyword { marker, span } => {
            let lead = rng.gen_range(2..6);
            let tail = rng.gen_range(0..3);
            let mut doc_tokens: Vec<String> = Vec::new();
            for _ in 0..lead {
                doc_tokens.push(sampler.word_avoiding(rng, marker).to_string());
            }
            doc_tokens.push(marker.clone());
            let mut summary_tokens = Vec::new();
            for _ in 0..*span {
                let w = sampler.content_word(rng);
                doc_tokens.push(w.to_string());
                summary_tokens.push(w);
            }
            for _ in 0..tail {
                doc_tokens.push(sampler.content_word(rng).to_string());
            }
            Example {
                id,
                document: doc_tokens.join(" "),
                summaries: vec![summary_tokens.join(" ")],
                query: None,
            }
        }
        SyntheticKind::Copy => {
            let len = rng.gen_range(3..7);
            let tokens: Vec<&str> = (0..len).map(|_| sampler.word(rng)).collect();
            let text = tokens.join(" ");
            Example {
                id,
                document: text.clone(),
                summaries: vec![text],
                query: None,
            }
        }
    }
}

/// Generates the task's train pool and test split. Same spec, same corpus.
pub fn make_synthetic_task(spec: &SyntheticSpec) -> Result<TaskData> {
    spec.validate()?;
    let sampler = DomainSampler::new(spec.vocab_seed);
    let gen_split = |split: Split, size: usize, tag: &str| -> Result<Dataset> {
        let mut rng = seed::derive_rng(spec.vocab_seed, &["examples", &spec.task_id, tag]);
        let examples = (0..size)
            .map(|i| {
                build_example(
                    spec,
                    &sampler,
                    &mut rng,
                    format!("{}-{tag}-{i}", spec.task_id),
                )
            })
            .collect();
        Dataset::new(spec.task_id.clone(), split, examples)
    };
    let data = TaskData {
        train_pool: gen_split(Split::TrainPool, spec.train_size, "train")?,
        test: gen_split(Split::Test, spec.test_size, "test")?,
    };
    data.validate()?;
    Ok(data)
}
