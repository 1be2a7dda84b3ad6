//! Phase-1 multi-task pre-training.
//!
//! Pipeline per run: balance the task mixture to its target sizes, group the
//! shuffled corpus into task-homogeneous batches, and for every step
//! dispatch the batch to its task prefix (or, with `universal_prob`, to the
//! universal prefix), compute the token-level negative log-likelihood,
//! back-propagate, and apply the asymmetric-decay update. Everything is
//! keyed off one master seed and the whole loop is exactly resumable.

mod optimizer;
#[cfg(test)]
mod tests;

pub use optimizer::{MomentMap, OptSlot, OptimizerConfig, OptimizerKind};

pub(crate) use optimizer::update_tensor;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{
    build_model, insert_params, insert_prefix, Dropout, ModelConfig, ParameterStore, PrefixBank,
    PrefixId, PrefixParams,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{Vocab, EOS, SEP};

/// Reserved name; task ids must not collide with the universal prefix.
pub const UNIVERSAL_NAME: &str = "UNIVERSAL";

/// One pre-training task: its train pool and the balanced size it should
/// contribute to the mixed corpus.
#[derive(Debug, Clone)]
pub struct TaskEntry {
    pub task_id: String,
    pub dataset: Dataset,
    pub target_size: usize,
}

/// The set of pre-training tasks plus vocabulary extras.
#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    entries: Vec<TaskEntry>,
    /// Extra tokens reserved in the vocabulary (e.g. markers of tasks that
    /// only appear later, at few-shot time).
    pub extra_vocab: Vec<String>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, task_id: impl Into<String>, dataset: Dataset, target_size: usize) {
        self.entries.push(TaskEntry {
            task_id: task_id.into(),
            dataset,
            target_size,
        });
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.entries.iter().any(|e| e.task_id == task_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::contract("registry needs at least one task"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.task_id == UNIVERSAL_NAME {
                return Err(Error::contract(format!(
                    "task id {UNIVERSAL_NAME} is reserved"
                )));
            }
            if !seen.insert(&e.task_id) {
                return Err(Error::contract(format!("duplicate task id {}", e.task_id)));
            }
            if e.target_size == 0 {
                return Err(Error::contract(format!(
                    "task {} has target size 0",
                    e.task_id
                )));
            }
            if e.dataset.is_empty() {
                return Err(Error::data(format!("task {} has an empty dataset", e.task_id)));
            }
        }
        Ok(())
    }

    /// Vocabulary over every registered corpus plus the extras.
    pub fn build_vocab(&self) -> Vocab {
        let mut texts: Vec<&str> = Vec::new();
        for e in &self.entries {
            for ex in &e.dataset.examples {
                texts.push(&ex.document);
                for s in &ex.summaries {
                    texts.push(s);
                }
                if let Some(q) = &ex.query {
                    texts.push(q);
                }
            }
        }
        Vocab::from_corpus(texts, &self.extra_vocab)
    }
}

/// Token-level form of an example: source ids (query-prefixed when present)
/// and target ids ending in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: String,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Encodes one example for the model. A query is concatenated ahead of the
/// document with a separator token; the first reference summary is the
/// training target.
pub fn encode_example(vocab: &Vocab, ex: &Example) -> EncodedExample {
    let mut src = Vec::new();
    if let Some(q) = &ex.query {
        src.extend(vocab.encode(q));
        src.push(SEP);
    }
    src.extend(vocab.encode(&ex.document));
    let mut tgt = vocab.encode(&ex.summaries[0]);
    tgt.push(EOS);
    EncodedExample {
        id: ex.id.clone(),
        src,
        tgt,
    }
}

/// Index of one corpus item: (task index, example index).
type CorpusItem = (usize, usize);

/// Balances every task to exactly its target size.
///
/// Down-sampling draws a seeded subset without replacement; up-sampling
/// repeats the whole corpus `floor(target/n)` times and fills the remainder
/// with a seeded without-replacement draw, so per-example multiplicity is
/// either `floor(target/n)` or `floor(target/n)+1`. The combined corpus is
/// then shuffled by the same seed.
pub fn balance_datasets(registry: &TaskRegistry, master_seed: u64) -> Result<Vec<CorpusItem>> {
    registry.validate()?;
    let mut corpus: Vec<CorpusItem> = Vec::new();
    for (ti, entry) in registry.entries().iter().enumerate() {
        let n = entry.dataset.len();
        let target = entry.target_size;
        let mut rng = seed::derive_rng(master_seed, &["balance", &entry.task_id]);
        let full_copies = target / n;
        let remainder = target % n;
        for _ in 0..full_copies {
            corpus.extend((0..n).map(|ei| (ti, ei)));
        }
        if remainder > 0 {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            corpus.extend(idx.into_iter().take(remainder).map(|ei| (ti, ei)));
        }
    }
    let mut rng = seed::derive_rng(master_seed, &["balance", "order"]);
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// One task-homogeneous training batch (indices into the task's pool).
#[derive(Debug, Clone)]
pub struct Batch {
    pub task_index: usize,
    pub example_indices: Vec<usize>,
}

/// Groups the balanced corpus into task-homogeneous batches and shuffles the
/// batch order. Trailing short batches are kept.
pub fn build_batches(
    corpus: &[CorpusItem],
    n_tasks: usize,
    batch_size: usize,
    master_seed: u64,
) -> Vec<Batch> {
    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); n_tasks];
    for &(ti, ei) in corpus {
        per_task[ti].push(ei);
    }
    let mut batches = Vec::new();
    for (ti, stream) in per_task.into_iter().enumerate() {
        for chunk in stream.chunks(batch_size) {
            batches.push(Batch {
                task_index: ti,
                example_indices: chunk.to_vec(),
            });
        }
    }
    let mut rng = seed::derive_rng(master_seed, &["batch-order"]);
    batches.shuffle(&mut rng);
    batches
}

/// Draws the prefix for one batch of `task_id`: the universal prefix with
/// probability `universal_prob`, the task's own prefix otherwise. Consumes
/// exactly one RNG draw either way, so downstream streams stay aligned
/// regardless of the outcome.
pub fn select_prefix(
    registry: &TaskRegistry,
    task_id: &str,
    universal_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PrefixId> {
    if !registry.contains(task_id) {
        return Err(Error::UnknownTask(task_id.to_string()));
    }
    let u: f64 = rng.gen();
    Ok(if u < universal_prob {
        PrefixId::Universal
    } else {
        PrefixId::task(task_id)
    })
}

/// Builds the batch loss on an existing tape: token-weighted mean NLL over
/// the batch (sum of per-example NLL sums divided by total target tokens).
pub fn batch_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &crate::model::ParamVars,
    prefix: Option<&crate::model::PrefixVars>,
    cfg: &ModelConfig,
    batch: &[&EncodedExample],
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut n_tokens = 0usize;
    for ex in batch {
        let src = crate::model::truncate(&ex.src, cfg.max_src_len, "source");
        let tgt = crate::model::truncate(&ex.tgt, cfg.max_tgt_len, "target");
        let logits = crate::model::forward_graph(g, vars, prefix, cfg, src, tgt, dropout)?;
        let nll = g.cross_entropy(logits, tgt, None, false)?;
        n_tokens += tgt.len();
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, S::from_real(1.0 / n_tokens as f64)))
}

/// Mean token-level negative log-likelihood of a single-task batch, with no
/// gradients recorded. This is the training objective in both phases.
pub fn task_loss<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    batch: &[&EncodedExample],
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = insert_params(&mut g, params, false);
    let pvars = insert_prefix(&mut g, prefix, false);
    let loss = batch_loss_graph(
        &mut g,
        &vars,
        Some(&pvars),
        params.config(),
        batch,
        &mut None,
    )?;
    Ok(g.detach(loss))
}

/// Convenience scalar wrapper around [`task_loss`] over a whole example set.
pub fn eval_loss<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    examples: &[EncodedExample],
) -> Result<f64> {
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    Ok(task_loss(params, prefix, &refs)?.data()[0].to_real())
}

/// Gradients of one backward pass, keyed by parameter path (backbone) and
/// block path (prefix).
pub struct GradSet<S: Scalar> {
    pub backbone: BTreeMap<String, Vec<S>>,
    pub prefix: BTreeMap<String, Vec<S>>,
    pub prefix_id: PrefixId,
}

/// Serializable RNG position, part of the exact-resume contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Mutable training state: step counter, parameters, prefix bank, optimizer
/// moments, and the RNG. Serialized whole for exact resumption.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub step: u64,
    pub backbone: ParameterStore<S>,
    pub bank: PrefixBank<S>,
    pub backbone_moments: MomentMap<S>,
    /// Prefix moments keyed by prefix id, then block path.
    pub prefix_moments: BTreeMap<String, MomentMap<S>>,
    pub rng: ChaCha8Rng,
}

/// One line of the training-curve log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub task_id: String,
    pub prefix_id: String,
    pub loss: f64,
    pub lr: f64,
}

/// Applies one asymmetric-decay update: backbone tensors with
/// `(learning_rate, weight_decay)`, the dispatched prefix's blocks with
/// `(prefix_learning_rate, prefix_weight_decay)`. Every trainable parameter
/// must have a gradient in `grads`.
pub fn asymmetric_decay_step<S: Scalar>(
    state: &mut TrainState<S>,
    grads: &GradSet<S>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let factor = cfg.lr_factor(state.step);
    let lr = cfg.learning_rate * factor;
    let lr_p = cfg.prefix_learning_rate * factor;

    let paths: Vec<String> = state.backbone.paths().cloned().collect();
    for path in &paths {
        let grad = grads
            .backbone
            .get(path)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter {path}")))?;
        let tensor = state.backbone.get_mut(path)?;
        optimizer::update_tensor(
            path,
            tensor,
            grad,
            &mut state.backbone_moments,
            lr,
            cfg.weight_decay,
            cfg.kind,
        )?;
    }

    let prefix_key = grads.prefix_id.to_string();
    let moments = state.prefix_moments.entry(prefix_key).or_default();
    let prefix = state.bank.get_mut(&grads.prefix_id)?;
    for (path, tensor) in prefix.named_blocks_mut() {
        let grad = grads
            .prefix
            .get(&path)
            .ok_or_else(|| Error::contract(format!("missing gradient for prefix block {path}")))?;
        optimizer::update_tensor(
            &path,
            tensor,
            grad,
            moments,
            lr_p,
            cfg.prefix_weight_decay,
            cfg.kind,
        )?;
    }
    state.step += 1;
    Ok(())
}

/// Encoded per-task training pools.
pub struct EncodedCorpus {
    pub tasks: Vec<(String, Vec<EncodedExample>)>,
}

impl EncodedCorpus {
    pub fn build(registry: &TaskRegistry, vocab: &Vocab) -> Self {
        let tasks = registry
            .entries()
            .iter()
            .map(|e| {
                (
                    e.task_id.clone(),
                    e.dataset
                        .examples
                        .iter()
                        .map(|ex| encode_example(vocab, ex))
                        .collect(),
                )
            })
            .collect();
        EncodedCorpus { tasks }
    }
}

fn one_training_step<S: Scalar>(
    state: &mut TrainState<S>,
    registry: &TaskRegistry,
    corpus: &EncodedCorpus,
    batch: &Batch,
    opt_cfg: &OptimizerConfig,
) -> Result<TrainLogRecord> {
    let (task_id, pool) = &corpus.tasks[batch.task_index];
    let prefix_id = select_prefix(registry, task_id, opt_cfg.universal_prob, &mut state.rng)?;
    let examples: Vec<&EncodedExample> =
        batch.example_indices.iter().map(|&i| &pool[i]).collect();

    let model_cfg = state.backbone.config().clone();
    let mut g = Graph::new();
    let vars = insert_params(&mut g, &state.backbone, true);
    let prefix = state.bank.get(&prefix_id)?;
    let pvars = insert_prefix(&mut g, prefix, true);
    let mut dropout = if model_cfg.dropout_rate > 0.0 {
        Some(Dropout {
            rate: model_cfg.dropout_rate,
            rng: &mut state.rng,
        })
    } else {
        None
    };
    let loss = batch_loss_graph(&mut g, &vars, Some(&pvars), &model_cfg, &examples, &mut dropout)?;
    drop(dropout);

    let loss_value = g.scalar_value(loss)?.to_real();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            task: task_id.clone(),
            batch_ids: examples.iter().map(|e| e.id.clone()).collect(),
        });
    }
    g.backward(loss)?;

    let mut grads = GradSet {
        backbone: BTreeMap::new(),
        prefix: BTreeMap::new(),
        prefix_id: prefix_id.clone(),
    };
    for (name, var) in vars.iter() {
        let grad = g
            .grad(*var)
            .ok_or_else(|| Error::contract(format!("no gradient flowed to {name}")))?;
        grads.backbone.insert(name.clone(), grad.to_vec());
    }
    let groups = [
        ("enc", &pvars.enc),
        ("dec_self", &pvars.dec_self),
        ("dec_cross", &pvars.dec_cross),
    ];
    for (group, blocks) in groups {
        for (i, (k, v)) in blocks.iter().enumerate() {
            for (tag, var) in [("k", k), ("v", v)] {
                let grad = g.grad(*var).map(<[S]>::to_vec).unwrap_or_else(|| {
                    vec![S::zero(); g.value(*var).len()]
                });
                grads.prefix.insert(format!("{group}.l{i}.{tag}"), grad);
            }
        }
    }

    let lr = opt_cfg.learning_rate * opt_cfg.lr_factor(state.step);
    let record = TrainLogRecord {
        step: state.step,
        task_id: task_id.clone(),
        prefix_id: prefix_id.to_string(),
        loss: loss_value,
        lr,
    };
    asymmetric_decay_step(state, &grads, opt_cfg)?;
    Ok(record)
}

/// Runs `state` forward to `until_step`, appending log records.
pub fn run_steps<S: Scalar>(
    state: &mut TrainState<S>,
    registry: &TaskRegistry,
    corpus: &EncodedCorpus,
    batches: &[Batch],
    opt_cfg: &OptimizerConfig,
    until_step: u64,
    log: &mut Vec<TrainLogRecord>,
) -> Result<()> {
    while state.step < until_step {
        let batch = &batches[(state.step as usize) % batches.len()];
        let record = one_training_step(state, registry, corpus, batch, opt_cfg)?;
        log.push(record);
    }
    Ok(())
}

/// Everything pre-training derives from (registry, configs, seed); kept so
/// resumed runs rebuild the identical corpus and batch order.
pub struct PretrainPlan {
    pub vocab: Vocab,
    pub corpus: EncodedCorpus,
    pub batches: Vec<Batch>,
}

pub fn plan_pretrain(
    registry: &TaskRegistry,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<PretrainPlan> {
    registry.validate()?;
    opt_cfg.validate()?;
    let vocab = registry.build_vocab();
    let corpus_items = balance_datasets(registry, seed)?;
    let corpus = EncodedCorpus::build(registry, &vocab);
    let batches = build_batches(
        &corpus_items,
        registry.entries().len(),
        opt_cfg.batch_size,
        seed,
    );
    Ok(PretrainPlan {
        vocab,
        corpus,
        batches,
    })
}

/// Fresh state at step 0: seeded backbone, one prefix per task, and the
/// universal prefix.
pub fn init_state<S: Scalar>(
    registry: &TaskRegistry,
    model_cfg: &ModelConfig,
    vocab: Vocab,
    seed: u64,
) -> Result<TrainState<S>> {
    let backbone = build_model(model_cfg, vocab, seed::derive_seed(seed, &["backbone"]))?;
    let cfg = backbone.config().clone();
    let mut bank = PrefixBank::new();
    for entry in registry.entries() {
        let mut rng = seed::derive_rng(seed, &["prefix", &entry.task_id]);
        bank.insert(PrefixParams::init_random(
            &cfg,
            PrefixId::task(&entry.task_id),
            &mut rng,
        ));
    }
    let mut rng = seed::derive_rng(seed, &["prefix", UNIVERSAL_NAME]);
    bank.insert(PrefixParams::init_random(&cfg, PrefixId::Universal, &mut rng));
    Ok(TrainState {
        step: 0,
        backbone,
        bank,
        backbone_moments: MomentMap::new(),
        prefix_moments: BTreeMap::new(),
        rng: seed::derive_rng(seed, &["train-stream"]),
    })
}

/// Full phase-1 run: balance, batch, dispatch, optimize for
/// `opt_cfg.total_steps`. Returns the final state and the training log.
pub fn pretrain<S: Scalar>(
    registry: &TaskRegistry,
    model_cfg: &ModelConfig,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(TrainState<S>, Vec<TrainLogRecord>)> {
    model_cfg.validate()?;
    let plan = plan_pretrain(registry, opt_cfg, seed)?;
    let mut state = init_state(registry, model_cfg, plan.vocab.clone(), seed)?;
    let mut log = Vec::new();
    run_steps(
        &mut state,
        registry,
        &plan.corpus,
        &plan.batches,
        opt_cfg,
        opt_cfg.total_steps,
        &mut log,
    )?;
    Ok((state, log))
}

/// Continues an interrupted run to `opt_cfg.total_steps`. The caller passes
/// the same registry, config and seed; the resumed trajectory is
/// bit-identical to an uninterrupted one.
pub fn resume<S: Scalar>(
    state: &mut TrainState<S>,
    registry: &TaskRegistry,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<TrainLogRecord>> {
    let plan = plan_pretrain(registry, opt_cfg, seed)?;
    let mut log = Vec::new();
    run_steps(
        state,
        registry,
        &plan.corpus,
        &plan.batches,
        opt_cfg,
        opt_cfg.total_steps,
        &mut log,
    )?;
    Ok(log)
}
