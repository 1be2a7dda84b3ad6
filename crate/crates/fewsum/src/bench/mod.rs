//! Few-shot benchmark protocol: data ingestion, seeded k-shot sampling,
//! synthetic desk-scale tasks, and end-to-end sweep orchestration.

mod data;
mod report;
mod synthetic;

pub use data::{load_jsonl, sample_shot_sets, Dataset, Example, FewShotSet, Split, TaskData};
pub use report::{AggregateRow, CellKey, CellResult, CellStatus, RunReport};
pub use synthetic::{make_synthetic_task, token_inventory, SyntheticKind, SyntheticSpec, MARKERS, SENTENCE_END};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{BenchSettings, Manifest};
use crate::error::Result;
use crate::model::{generate, ParameterStore, PrefixBank};
use crate::rouge::{aggregate, mean_rouge, score_multi, RougeScore};
use crate::scalar::Scalar;
use crate::seed;
use crate::train::{encode_example, eval_loss, EncodedExample};
use crate::tune::{init_prefix, prefix_tune, InitStrategy, TuneConfig};

struct CellPlan<'a> {
    key: CellKey,
    seed: u64,
    strategy: &'a InitStrategy,
    steps: u64,
    shots: &'a FewShotSet,
    task: &'a TaskData,
    test_encoded: &'a [EncodedExample],
}

fn run_cell<S: Scalar>(
    backbone: &ParameterStore<S>,
    bank: &PrefixBank<S>,
    settings: &BenchSettings,
    tune_base: &TuneConfig,
    plan: &CellPlan<'_>,
) -> Result<(RougeScore, f64)> {
    let cfg = backbone.config();
    let tune_cfg = TuneConfig {
        k: plan.key.k,
        steps: plan.steps,
        learning_rate: tune_base.learning_rate,
        weight_decay: tune_base.weight_decay,
        batch_size: tune_base.batch_size,
        seed: plan.seed,
        init: plan.strategy.clone(),
    };
    let init = init_prefix(plan.strategy, bank, cfg, &plan.key.task, plan.seed)?;
    let outcome = prefix_tune(backbone, init, plan.shots, &plan.task.train_pool, &tune_cfg)?;

    let vocab = backbone.vocab();
    let mut per_example = Vec::with_capacity(plan.task.test.examples.len());
    for (ex, enc) in plan.task.test.examples.iter().zip(plan.test_encoded) {
        let ids = generate(
            backbone,
            &outcome.prefix,
            &enc.src,
            settings.decode,
            settings.max_gen_len,
        )?;
        let text = vocab.decode(&ids);
        per_example.push(score_multi(&ex.summaries, &text)?);
    }
    let rouge = mean_rouge(&per_example);
    let loss = eval_loss(backbone, &outcome.prefix, plan.test_encoded)?;
    Ok((rouge, loss))
}

/// Runs the full (task × k × strategy × set) sweep.
///
/// Cells are independent and execute in parallel; results are keyed and
/// sorted, so completion order never affects the report bytes. A failing
/// cell is recorded as failed and the sweep continues. The report is
/// soundness-checked (aggregate recomputation + test-leakage audit) before
/// being returned.
pub fn run_benchmark<S: Scalar>(
    backbone: &ParameterStore<S>,
    bank: &PrefixBank<S>,
    tasks: &[TaskData],
    settings: &BenchSettings,
    tune_base: &TuneConfig,
    manifest: Manifest,
    master_seed: u64,
) -> Result<RunReport> {
    settings.validate()?;
    for t in tasks {
        t.validate()?;
    }

    // shot sets are shared across strategies of one (task, k)
    let mut shot_sets: BTreeMap<(String, usize), Vec<FewShotSet>> = BTreeMap::new();
    for task in tasks {
        for ks in &settings.k_settings {
            let sets = sample_shot_sets(&task.train_pool, ks.k, settings.num_sets, master_seed)?;
            shot_sets.insert((task.task_id().to_string(), ks.k), sets);
        }
    }
    let test_encoded: BTreeMap<String, Vec<EncodedExample>> = tasks
        .iter()
        .map(|t| {
            (
                t.task_id().to_string(),
                t.test
                    .examples
                    .iter()
                    .map(|e| encode_example(backbone.vocab(), e))
                    .collect(),
            )
        })
        .collect();

    let mut plans: Vec<CellPlan<'_>> = Vec::new();
    for task in tasks {
        for ks in &settings.k_settings {
            let sets = &shot_sets[&(task.task_id().to_string(), ks.k)];
            for strategy in &settings.strategies {
                for (set_index, shots) in sets.iter().enumerate() {
                    let key = CellKey {
                        task: task.task_id().to_string(),
                        k: ks.k,
                        strategy: strategy.to_string(),
                        set_index,
                    };
                    let seed = seed::derive_seed(
                        master_seed,
                        &[
                            "cell",
                            &key.task,
                            &key.k.to_string(),
                            &key.strategy,
                            &key.set_index.to_string(),
                        ],
                    );
                    plans.push(CellPlan {
                        key,
                        seed,
                        strategy,
                        steps: ks.steps,
                        shots,
                        task,
                        test_encoded: &test_encoded[task.task_id()],
                    });
                }
            }
        }
    }

    let mut cells: Vec<CellResult> = plans
        .par_iter()
        .map(|plan| {
            let (status, rouge, loss) =
                match run_cell(backbone, bank, settings, tune_base, plan) {
                    Ok((rouge, loss)) => (CellStatus::Ok, Some(rouge), Some(loss)),
                    Err(e) => (
                        CellStatus::Failed {
                            reason: e.to_string(),
                        },
                        None,
                        None,
                    ),
                };
            CellResult {
                key: plan.key.clone(),
                seed: plan.seed,
                status,
                rouge,
                eval_loss: loss,
                shot_ids: plan.shots.example_ids.clone(),
            }
        })
        .collect();
    cells.sort_by(|a, b| a.key.cmp(&b.key));

    let mut aggregates = Vec::new();
    for task in tasks {
        for ks in &settings.k_settings {
            for strategy in &settings.strategies {
                let per_set: Vec<RougeScore> = cells
                    .iter()
                    .filter(|c| {
                        c.key.task == task.task_id()
                            && c.key.k == ks.k
                            && c.key.strategy == strategy.to_string()
                            && matches!(c.status, CellStatus::Ok)
                    })
                    .filter_map(|c| c.rouge)
                    .collect();
                if !per_set.is_empty() {
                    aggregates.push(AggregateRow {
                        task: task.task_id().to_string(),
                        k: ks.k,
                        strategy: strategy.to_string(),
                        aggregate: aggregate(&per_set)?,
                    });
                }
            }
        }
    }

    let test_ids = tasks
        .iter()
        .map(|t| {
            (
                t.task_id().to_string(),
                t.test.examples.iter().map(|e| e.id.clone()).collect(),
            )
        })
        .collect();

    let report = RunReport {
        manifest,
        test_ids,
        cells,
        aggregates,
    };
    report.verify_soundness(1e-12)?;
    Ok(report)
}
