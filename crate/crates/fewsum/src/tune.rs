//! Phase-2 few-shot prefix-tuning.
//!
//! The backbone is frozen — its tensors enter every tape as constants, so no
//! gradient can reach them — and only the new task's prefix parameters are
//! optimized, with the prefix-side decay `d_p`. The loss is the same
//! token-level NLL the multi-task trainer minimizes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, FewShotSet};
use crate::error::{Error, Result};
use crate::model::{
    insert_params, insert_prefix, Dropout, ParameterStore, PrefixBank, PrefixId, PrefixParams,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Graph;
use crate::train::{
    batch_loss_graph, encode_example, EncodedExample, MomentMap, OptimizerConfig, OptimizerKind,
};

/// Where the new task's prefix starts from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Seeded normal draw at the pre-training prefix scale.
    Random,
    /// Deep copy of a pre-training task's prefix.
    FromTask { task_id: String },
    /// Deep copy of the universal prefix.
    Universal,
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitStrategy::Random => write!(f, "random"),
            InitStrategy::FromTask { task_id } => write!(f, "from_task({task_id})"),
            InitStrategy::Universal => write!(f, "universal"),
        }
    }
}

fn default_batch() -> usize {
    8
}

/// Few-shot tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// Number of labeled examples (shots).
    pub k: usize,
    /// Fixed optimization budget; there is no dev set or early stopping.
    pub steps: u64,
    /// Prefix learning rate α_p.
    pub learning_rate: f64,
    /// Prefix weight decay d_p.
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitStrategy,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            k: 10,
            steps: 80,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
            init: InitStrategy::Universal,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.k == 0 {
            errs.push("k must be >= 1".to_string());
        }
        if self.steps == 0 {
            errs.push("steps must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            errs.push(format!("weight_decay ({}) must lie in [0, 1)", self.weight_decay));
        }
        if self.learning_rate <= 0.0 {
            errs.push("learning_rate must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Materializes the starting prefix for a new task. Copies are deep:
/// mutating the result never touches the bank.
pub fn init_prefix<S: Scalar>(
    strategy: &InitStrategy,
    bank: &PrefixBank<S>,
    model_cfg: &crate::model::ModelConfig,
    new_task: &str,
    seed: u64,
) -> Result<PrefixParams<S>> {
    let owner = PrefixId::task(new_task);
    match strategy {
        InitStrategy::Random => {
            let mut rng = seed::derive_rng(seed, &["init-random", new_task]);
            Ok(PrefixParams::init_random(model_cfg, owner, &mut rng))
        }
        InitStrategy::FromTask { task_id } => {
            let src = bank.get(&PrefixId::task(task_id))?;
            Ok(src.copied_for(owner))
        }
        InitStrategy::Universal => {
            let src = bank.get(&PrefixId::Universal)?;
            Ok(src.copied_for(owner))
        }
    }
}

/// Result of one tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome<S: Scalar> {
    pub prefix: PrefixParams<S>,
    /// Batch loss recorded at every step, before the update.
    pub loss_curve: Vec<f64>,
}

/// Tunes `init` on the k shots while the backbone stays frozen.
///
/// The returned prefix is the only thing that changed; callers can assert
/// this with [`verify_frozen`] over backbone snapshots.
pub fn prefix_tune<S: Scalar>(
    backbone: &ParameterStore<S>,
    init: PrefixParams<S>,
    shots: &FewShotSet,
    pool: &Dataset,
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    cfg.validate()?;
    if shots.k != cfg.k {
        return Err(Error::contract(format!(
            "shot set has k={}, config says k={}",
            shots.k, cfg.k
        )));
    }
    shots.validate_against(pool)?;
    init.validate_for(backbone.config())?;

    let vocab = backbone.vocab();
    let examples: Vec<EncodedExample> = shots
        .resolve(pool)?
        .into_iter()
        .map(|ex| encode_example(vocab, ex))
        .collect();
    tune_on_examples(backbone, init, &examples, cfg)
}

/// Core tuning loop over already-encoded examples.
pub fn tune_on_examples<S: Scalar>(
    backbone: &ParameterStore<S>,
    init: PrefixParams<S>,
    examples: &[EncodedExample],
    cfg: &TuneConfig,
) -> Result<TuneOutcome<S>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("cannot tune on an empty shot set"));
    }
    let model_cfg = backbone.config().clone();
    let batch_size = cfg.batch_size.min(examples.len());
    let owner = init.owner.to_string();

    // schedule shaped like pre-training: ~10% linear warmup, linear decay
    let sched = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        prefix_learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        prefix_weight_decay: cfg.weight_decay,
        warmup_steps: cfg.steps / 10,
        total_steps: cfg.steps,
        batch_size,
        universal_prob: 0.0,
        kind: OptimizerKind::Adaptive,
    };

    let mut order_rng = seed::derive_rng(cfg.seed, &["tune-order", &owner]);
    let mut dropout_rng = seed::derive_rng(cfg.seed, &["tune-dropout", &owner]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = examples.len(); // forces a shuffle on first use

    let mut prefix = init;
    let mut moments = MomentMap::new();
    let mut curve = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch: Vec<&EncodedExample> =
            order[cursor..cursor + batch_size].iter().map(|&i| &examples[i]).collect();
        cursor += batch_size;

        let mut g = Graph::new();
        let vars = insert_params(&mut g, backbone, false); // frozen
        let pvars = insert_prefix(&mut g, &prefix, true);
        let mut dropout = if model_cfg.dropout_rate > 0.0 {
            Some(Dropout {
                rate: model_cfg.dropout_rate,
                rng: &mut dropout_rng,
            })
        } else {
            None
        };
        let loss = batch_loss_graph(&mut g, &vars, Some(&pvars), &model_cfg, &batch, &mut dropout)?;
        drop(dropout);

        let loss_value = g.scalar_value(loss)?.to_real();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: owner.clone(),
                batch_ids: batch.iter().map(|e| e.id.clone()).collect(),
            });
        }
        curve.push(loss_value);
        g.backward(loss)?;

        let lr = cfg.learning_rate * sched.lr_factor(step);
        let groups = [
            ("enc", &pvars.enc),
            ("dec_self", &pvars.dec_self),
            ("dec_cross", &pvars.dec_cross),
        ];
        let mut grads = std::collections::BTreeMap::new();
        for (group, blocks) in groups {
            for (i, (k, v)) in blocks.iter().enumerate() {
                for (tag, var) in [("k", k), ("v", v)] {
                    let grad = g
                        .grad(*var)
                        .map(<[S]>::to_vec)
                        .unwrap_or_else(|| vec![S::zero(); g.value(*var).len()]);
                    grads.insert(format!("{group}.l{i}.{tag}"), grad);
                }
            }
        }
        for (path, tensor) in prefix.named_blocks_mut() {
            let grad = grads
                .get(&path)
                .ok_or_else(|| Error::contract(format!("missing gradient for {path}")))?;
            crate::train::update_tensor(
                &path,
                tensor,
                grad,
                &mut moments,
                lr,
                cfg.weight_decay,
                OptimizerKind::Adaptive,
            )?;
        }
    }

    Ok(TuneOutcome {
        prefix,
        loss_curve: curve,
    })
}

/// True iff every parameter of `before` and `after` is bit-identical.
/// Key-set mismatches are an error, not `false`.
pub fn verify_frozen<S: Scalar>(
    before: &ParameterStore<S>,
    after: &ParameterStore<S>,
) -> Result<bool> {
    let a: Vec<&String> = before.paths().collect();
    let b: Vec<&String> = after.paths().collect();
    if a != b {
        return Err(Error::contract(
            "parameter key sets differ; stores are not comparable",
        ));
    }
    for (name, t) in before.iter() {
        if !t.bit_eq(after.get(name)?) {
            return Ok(false);
        }
    }
    Ok(true)
}
