//! Autoregressive generation: greedy and beam search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{BOS, EOS};

use super::{
    check_token_range, decode_states, encode, insert_params, insert_prefix, project_logits,
    truncate, ParameterStore, PrefixParams,
};

/// How [`generate`] picks tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    /// Per-step argmax; ties break toward the lowest token id.
    Greedy,
    /// Beam search returning the best completed hypothesis under
    /// length-normalized log-probability (exponent 1.0).
    Beam { width: usize },
}

/// Generates a token sequence for `src_tokens`, stopping at end-of-sequence
/// or after `max_len` tokens. The returned ids exclude BOS/EOS.
pub fn generate<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    src_tokens: &[usize],
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<usize>> {
    let cfg = params.config();
    if src_tokens.is_empty() {
        return Err(Error::contract("cannot generate from an empty source"));
    }
    if max_len == 0 || max_len > cfg.max_tgt_len {
        return Err(Error::contract(format!(
            "max_len {max_len} must lie in [1, {}]",
            cfg.max_tgt_len
        )));
    }
    check_token_range(src_tokens, cfg.vocab_size)?;
    prefix.validate_for(cfg)?;

    // Encode once; each decode step replays only the decoder.
    let src = truncate(src_tokens, cfg.max_src_len, "source");
    let memory = {
        let mut g = Graph::new();
        let vars = insert_params(&mut g, params, false);
        let pvars = insert_prefix(&mut g, prefix, false);
        let mem = encode(&mut g, &vars, Some(&pvars), cfg, src, &mut None)?;
        g.detach(mem)
    };

    match strategy {
        DecodeStrategy::Greedy => greedy(params, prefix, &memory, max_len),
        DecodeStrategy::Beam { width } => {
            if width == 0 {
                return Err(Error::contract("beam width must be >= 1"));
            }
            beam(params, prefix, &memory, max_len, width)
        }
    }
}

/// Log-softmax of the last decoder position for one hypothesis.
fn step_logprobs<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    memory: &Tensor<S>,
    dec_input: &[usize],
) -> Result<Vec<f64>> {
    let cfg = params.config();
    let mut g = Graph::new();
    let vars = insert_params(&mut g, params, false);
    let pvars = insert_prefix(&mut g, prefix, false);
    let mem: Var = g.constant(memory.clone());
    let states = decode_states(&mut g, &vars, Some(&pvars), cfg, mem, dec_input, &mut None)?;
    let last = g.gather_rows(states, &[dec_input.len() - 1])?;
    let logits = project_logits(&mut g, &vars, last)?;
    let row: Vec<f64> = g.value(logits).iter().map(|v| v.to_real()).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(row.into_iter().map(|v| v - lse).collect())
}

fn argmax_lowest_id(logprobs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logprobs.iter().enumerate() {
        if v > logprobs[best] {
            best = i;
        }
    }
    best
}

fn greedy<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    memory: &Tensor<S>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut dec_input = vec![BOS];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let lp = step_logprobs(params, prefix, memory, &dec_input)?;
        let next = argmax_lowest_id(&lp);
        if next == EOS {
            break;
        }
        out.push(next);
        dec_input.push(next);
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis {
    /// Generated ids (no BOS, no EOS).
    tokens: Vec<usize>,
    /// Cumulative log-probability including the EOS step when finished.
    logp: f64,
    finished: bool,
}

impl Hypothesis {
    /// Length-normalized score with exponent 1.0; EOS counts as a step.
    fn score(&self) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        self.logp / (len.max(1) as f64)
    }
}

fn beam<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    memory: &Tensor<S>,
    max_len: usize,
    width: usize,
) -> Result<Vec<usize>> {
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut dec_input = Vec::with_capacity(hyp.tokens.len() + 1);
            dec_input.push(BOS);
            dec_input.extend_from_slice(&hyp.tokens);
            let lp = step_logprobs(params, prefix, memory, &dec_input)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut next = hyp.clone();
                next.logp += l;
                if tok == EOS {
                    next.finished = true;
                } else {
                    next.tokens.push(tok);
                }
                candidates.push(next);
            }
        }
        // highest logp first; equal scores prefer the lexicographically
        // smaller token sequence so decoding is fully deterministic
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        // keep the top `width` candidates overall; EOS ones retire from the
        // beam, so width=1 reproduces greedy decoding exactly
        live = Vec::with_capacity(width);
        for c in candidates.into_iter().take(width) {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }

    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .max_by(|a, b| {
            a.score()
                .partial_cmp(&b.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::state("beam search produced no hypotheses"))?;
    Ok(best.tokens.clone())
}
