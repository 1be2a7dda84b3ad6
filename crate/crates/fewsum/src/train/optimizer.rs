//! Asymmetric-decay parameter updates.
//!
//! Backbone and prefix parameters use separate learning rates and separate
//! decoupled weight-decay factors. Two modes:
//!
//! * `plain-sgd` applies `θ ← (1−d)·θ − lr·g` verbatim — the exact update
//!   equations, kept literal so they can be tested against closed form;
//! * `adaptive` replaces the gradient by an Adam direction with bias
//!   correction and applies the decoupled decay multiplicatively, scaled by
//!   the scheduled rate (`θ ← (1−lr·d)·θ − lr·adam(g)`), which is what the
//!   long pre-training runs use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    Adaptive,
}

fn default_universal_prob() -> f64 {
    0.15
}
fn default_kind() -> OptimizerKind {
    OptimizerKind::Adaptive
}

/// Pre-training optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Backbone learning rate α.
    pub learning_rate: f64,
    /// Prefix learning rate α_p.
    pub prefix_learning_rate: f64,
    /// Backbone weight decay d_l.
    pub weight_decay: f64,
    /// Prefix weight decay d_p (lower than d_l by default, so prefixes stay
    /// free to specialize while the backbone is pushed toward generality).
    pub prefix_weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Probability that a training batch is coupled with the universal
    /// prefix instead of its task's own prefix.
    #[serde(default = "default_universal_prob")]
    pub universal_prob: f64,
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-3,
            prefix_learning_rate: 3e-3,
            weight_decay: 0.05,
            prefix_weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 2_000,
            batch_size: 4,
            universal_prob: 0.15,
            kind: OptimizerKind::Adaptive,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.weight_decay) {
            errs.push(format!("weight_decay ({}) must lie in [0, 1)", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.prefix_weight_decay) {
            errs.push(format!(
                "prefix_weight_decay ({}) must lie in [0, 1)",
                self.prefix_weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.universal_prob) {
            errs.push(format!(
                "universal_prob ({}) must lie in [0, 1]",
                self.universal_prob
            ));
        }
        if self.warmup_steps > self.total_steps {
            errs.push(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.total_steps == 0 {
            errs.push("total_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.learning_rate <= 0.0 || self.prefix_learning_rate <= 0.0 {
            errs.push("learning rates must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Scheduled learning-rate multiplier at `step` (0-based): linear warmup
    /// to 1, then linear decay toward 0 at `total_steps`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else if self.total_steps <= self.warmup_steps {
            1.0
        } else {
            (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// Per-parameter Adam accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSlot<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

impl<S: Scalar> OptSlot<S> {
    fn new(len: usize) -> Self {
        OptSlot {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }
}

pub type MomentMap<S> = BTreeMap<String, OptSlot<S>>;

/// Updates one named tensor in place.
///
/// `lr` is the already-scheduled rate; `decay` is the family's decoupled
/// weight-decay value.
pub(crate) fn update_tensor<S: Scalar>(
    name: &str,
    tensor: &mut Tensor<S>,
    grad: &[S],
    moments: &mut MomentMap<S>,
    lr: f64,
    decay: f64,
    kind: OptimizerKind,
) -> Result<()> {
    if grad.len() != tensor.numel() {
        return Err(Error::contract(format!(
            "gradient for {name} has {} elements, parameter has {}",
            grad.len(),
            tensor.numel()
        )));
    }
    let data = tensor.data_mut();
    match kind {
        OptimizerKind::PlainSgd => {
            let keep = S::from_real(1.0 - decay);
            let step = S::from_real(lr);
            for (p, &g) in data.iter_mut().zip(grad) {
                *p = keep * *p - step * g;
            }
        }
        OptimizerKind::Adaptive => {
            let slot = moments
                .entry(name.to_string())
                .or_insert_with(|| OptSlot::new(grad.len()));
            if slot.m.len() != grad.len() {
                return Err(Error::contract(format!(
                    "optimizer slot for {name} has stale shape"
                )));
            }
            slot.t += 1;
            let b1 = S::from_real(BETA1);
            let b2 = S::from_real(BETA2);
            let one = S::one();
            let bc1 = S::from_real(1.0 - BETA1.powi(slot.t as i32));
            let bc2 = S::from_real(1.0 - BETA2.powi(slot.t as i32));
            let eps = S::from_real(ADAM_EPS);
            let keep = S::from_real(1.0 - lr * decay);
            let step = S::from_real(lr);
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] = keep * data[i] - step * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
