//! Benchmark run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Manifest;
use crate::error::{Error, Result};
use crate::rouge::{aggregate, Aggregate, RougeScore};

/// Coordinates of one benchmark cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub task: String,
    pub k: usize,
    pub strategy: String,
    pub set_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed { reason: String },
}

/// One tuned-and-scored cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    /// Sub-seed of this cell, sufficient to re-run it alone.
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeScore>,
    /// Teacher-forced mean NLL on the task's test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    /// Ids tuned on, recorded for the test-leakage audit.
    pub shot_ids: Vec<String>,
}

/// Mean/std across the few-shot sets of one (task, k, strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub k: usize,
    pub strategy: String,
    pub aggregate: Aggregate,
}

/// Full sweep output. Serialization is deterministic: cells and aggregates
/// are sorted by key and the embedded manifest carries no timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest: Manifest,
    /// Test-split ids per task, for standalone leakage audits.
    pub test_ids: BTreeMap<String, Vec<String>>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<AggregateRow>,
}

impl RunReport {
    /// Recomputes every aggregate from the stored per-set scores and checks
    /// it matches to `tol`; verifies no tuning id appears in any test split.
    pub fn verify_soundness(&self, tol: f64) -> Result<()> {
        for row in &self.aggregates {
            let per_set: Vec<RougeScore> = self
                .cells
                .iter()
                .filter(|c| {
                    c.key.task == row.task
                        && c.key.k == row.k
                        && c.key.strategy == row.strategy
                        && matches!(c.status, CellStatus::Ok)
                })
                .filter_map(|c| c.rouge)
                .collect();
            let fresh = aggregate(&per_set)?;
            let close = |a: f64, b: f64| (a - b).abs() <= tol;
            let pairs = [
                (fresh.r1_f1.mean, row.aggregate.r1_f1.mean),
                (fresh.r2_f1.mean, row.aggregate.r2_f1.mean),
                (fresh.rl_f1.mean, row.aggregate.rl_f1.mean),
            ];
            if !pairs.iter().all(|(a, b)| close(*a, *b)) {
                return Err(Error::contract(format!(
                    "aggregate for {}/{}/{} does not recompute from per-set scores",
                    row.task, row.k, row.strategy
                )));
            }
            let stds = [
                (fresh.r1_f1.std, row.aggregate.r1_f1.std),
                (fresh.r2_f1.std, row.aggregate.r2_f1.std),
                (fresh.rl_f1.std, row.aggregate.rl_f1.std),
            ];
            for (a, b) in stds {
                match (a, b) {
                    (Some(x), Some(y)) if close(x, y) => {}
                    (None, None) => {}
                    _ => {
                        return Err(Error::contract(format!(
                            "aggregate std for {}/{}/{} does not recompute",
                            row.task, row.k, row.strategy
                        )))
                    }
                }
            }
        }
        for cell in &self.cells {
            if let Some(test) = self.test_ids.get(&cell.key.task) {
                for id in &cell.shot_ids {
                    if test.contains(id) {
                        return Err(Error::contract(format!(
                            "test id {id} leaked into tuning batches of {:?}",
                            cell.key
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean-score table shaped like a per-task comparison of strategies.
    pub fn render_mean_table(&self) -> String {
        self.render(|a| {
            format!(
                "{:>6.3} {:>6.3} {:>6.3}",
                a.r1_f1.mean, a.r2_f1.mean, a.rl_f1.mean
            )
        }, "mean R1/R2/RL F1")
    }

    /// Standard-deviation table across the few-shot sets.
    pub fn render_std_table(&self) -> String {
        self.render(|a| {
            let f = |s: Option<f64>| s.map_or("   n/a".to_string(), |v| format!("{v:>6.3}"));
            format!(
                "{} {} {}",
                f(a.r1_f1.std),
                f(a.r2_f1.std),
                f(a.rl_f1.std)
            )
        }, "std of R1/R2/RL F1 over sets")
    }

    fn render(&self, cell: impl Fn(&Aggregate) -> String, title: &str) -> String {
        let mut out = format!("{title}\n");
        out.push_str(&format!(
            "{:<16} {:>5} {:<22} {}\n",
            "task", "k", "init", "scores"
        ));
        for row in &self.aggregates {
            out.push_str(&format!(
                "{:<16} {:>5} {:<22} {}\n",
                row.task,
                row.k,
                row.strategy,
                cell(&row.aggregate)
            ));
        }
        out
    }
}
