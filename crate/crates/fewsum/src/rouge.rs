//! ROUGE-1/2/L precision, recall and F1, plus mean/std aggregation.
//!
//! Scoring is self-contained: lowercase non-alphanumeric tokenization,
//! clipped n-gram multiset overlap, and whole-text LCS for ROUGE-L. An
//! empty hypothesis or reference yields all-zero scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision / recall / F1 triple for a single ROUGE variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    pub const ZERO: PrfScore = PrfScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrfScore {
            precision,
            recall,
            f1,
        }
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L for one (reference, hypothesis) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: PrfScore,
    pub r2: PrfScore,
    pub rl: PrfScore,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        r1: PrfScore::ZERO,
        r2: PrfScore::ZERO,
        rl: PrfScore::ZERO,
    };
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize_norm(text: &str) -> Vec<String> {
    tokenize_norm_with(text, false)
}

/// [`tokenize_norm`] with an optional light stemming pass.
pub fn tokenize_norm_with(text: &str, stem: bool) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if stem { light_stem(t) } else { t.to_string() })
        .collect()
}

/// Small suffix stripper (sses/ies/s, ing, ed). Not a full stemmer; off by
/// default and excluded from all shipped scoring paths.
fn light_stem(token: &str) -> String {
    let t = token;
    if let Some(stripped) = t.strip_suffix("sses") {
        return format!("{stripped}ss");
    }
    if let Some(stripped) = t.strip_suffix("ies") {
        return format!("{stripped}i");
    }
    if t.ends_with("ss") {
        return t.to_string();
    }
    if t.len() > 5 {
        if let Some(stripped) = t.strip_suffix("ing") {
            return stripped.to_string();
        }
    }
    if t.len() > 4 {
        if let Some(stripped) = t.strip_suffix("ed") {
            return stripped.to_string();
        }
    }
    if t.len() > 3 {
        if let Some(stripped) = t.strip_suffix('s') {
            return stripped.to_string();
        }
    }
    t.to_string()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap on pre-tokenized inputs.
pub fn rouge_n_tokens(reference: &[String], hypothesis: &[String], n: usize) -> PrfScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let ref_total = reference.len().saturating_sub(n - 1);
    let hyp_total = hypothesis.len().saturating_sub(n - 1);
    if ref_total == 0 || hyp_total == 0 {
        return PrfScore::ZERO;
    }
    let ref_counts = ngram_counts(reference, n);
    let hyp_counts = ngram_counts(hypothesis, n);
    let mut overlap = 0usize;
    for (gram, &hc) in &hyp_counts {
        if let Some(&rc) = ref_counts.get(gram) {
            overlap += hc.min(rc);
        }
    }
    PrfScore::new(
        overlap as f64 / hyp_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

/// ROUGE-N on raw text.
pub fn rouge_n(reference: &str, hypothesis: &str, n: usize) -> PrfScore {
    rouge_n_tokens(&tokenize_norm(reference), &tokenize_norm(hypothesis), n)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // rolling single-row DP
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence overlap on pre-tokenized inputs; the LCS runs
/// over the whole texts (no sentence splitting).
pub fn rouge_l_tokens(reference: &[String], hypothesis: &[String]) -> PrfScore {
    if reference.is_empty() || hypothesis.is_empty() {
        return PrfScore::ZERO;
    }
    let l = lcs_len(reference, hypothesis) as f64;
    PrfScore::new(l / hypothesis.len() as f64, l / reference.len() as f64)
}

/// ROUGE-L on raw text.
pub fn rouge_l(reference: &str, hypothesis: &str) -> PrfScore {
    rouge_l_tokens(&tokenize_norm(reference), &tokenize_norm(hypothesis))
}

/// All three variants for one pair.
pub fn score_pair(reference: &str, hypothesis: &str) -> RougeScore {
    let r = tokenize_norm(reference);
    let h = tokenize_norm(hypothesis);
    RougeScore {
        r1: rouge_n_tokens(&r, &h, 1),
        r2: rouge_n_tokens(&r, &h, 2),
        rl: rouge_l_tokens(&r, &h),
    }
}

/// Multi-reference scoring: every component is the arithmetic mean of the
/// per-reference scores.
pub fn score_multi(references: &[String], hypothesis: &str) -> Result<RougeScore> {
    if references.is_empty() {
        return Err(Error::contract("multi-reference scoring needs >= 1 reference"));
    }
    let scores: Vec<RougeScore> = references
        .iter()
        .map(|r| score_pair(r, hypothesis))
        .collect();
    Ok(mean_rouge(&scores))
}

/// Component-wise arithmetic mean of several scores.
pub fn mean_rouge(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len() as f64;
    let sum = |f: &dyn Fn(&RougeScore) -> PrfScore| {
        let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
        for s in scores {
            let c = f(s);
            p += c.precision;
            r += c.recall;
            f1 += c.f1;
        }
        PrfScore {
            precision: p / n,
            recall: r / n,
            f1: f1 / n,
        }
    };
    RougeScore {
        r1: sum(&|s| s.r1),
        r2: sum(&|s| s.r2),
        rl: sum(&|s| s.rl),
    }
}

/// Mean and sample (n−1) standard deviation; std is absent for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

/// Scalar mean/std over a non-empty slice.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::contract("cannot aggregate zero scores"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() >= 2 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        Some((ss / (n - 1.0)).sqrt())
    } else {
        None
    };
    Ok(MeanStd { mean, std })
}

/// Per-set scores with their F1 mean/std per ROUGE variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_set: Vec<RougeScore>,
    pub r1_f1: MeanStd,
    pub r2_f1: MeanStd,
    pub rl_f1: MeanStd,
}

/// Aggregates one score per few-shot set into mean and sample std.
pub fn aggregate(per_set: &[RougeScore]) -> Result<Aggregate> {
    if per_set.is_empty() {
        return Err(Error::contract("cannot aggregate zero scores"));
    }
    let collect = |f: &dyn Fn(&RougeScore) -> f64| -> Vec<f64> { per_set.iter().map(f).collect() };
    Ok(Aggregate {
        per_set: per_set.to_vec(),
        r1_f1: mean_std(&collect(&|s| s.r1.f1))?,
        r2_f1: mean_std(&collect(&|s| s.r2.f1))?,
        rl_f1: mean_std(&collect(&|s| s.rl.f1))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toks(s: &str) -> Vec<String> {
        tokenize_norm(s)
    }

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(toks("The cat, sat!"), vec!["the", "cat", "sat"]);
        assert_eq!(toks(""), Vec::<String>::new());
        assert_eq!(toks("A  b\tc"), vec!["a", "b", "c"]);
    }

    #[test]
    fn stemming_flag_merges_inflections() {
        assert_eq!(tokenize_norm_with("cats running", true), vec!["cat", "runn"]);
        // default is off
        assert_eq!(tokenize_norm("cats"), vec!["cats"]);
    }

    #[test]
    fn identical_texts_score_one() {
        let s = score_pair("the cat sat", "the cat sat");
        assert_eq!(s.r1.f1, 1.0);
        assert_eq!(s.r2.f1, 1.0);
        assert_eq!(s.rl.f1, 1.0);
    }

    #[test]
    fn hand_counted_cat_pair() {
        let r1 = rouge_n("the cat sat", "the cat", 1);
        assert_relative_eq!(r1.precision, 1.0);
        assert_relative_eq!(r1.recall, 2.0 / 3.0);
        assert_relative_eq!(r1.f1, 0.8);

        let r2 = rouge_n("the cat sat", "the cat", 2);
        assert_relative_eq!(r2.precision, 1.0);
        assert_relative_eq!(r2.recall, 0.5);
        assert_relative_eq!(r2.f1, 2.0 / 3.0);

        let rl = rouge_l("the cat sat", "the cat");
        assert_relative_eq!(rl.f1, 0.8);
    }

    #[test]
    fn reversal_keeps_single_common_token() {
        let rl = rouge_l("a b c", "c b a");
        assert_relative_eq!(rl.precision, 1.0 / 3.0);
        assert_relative_eq!(rl.recall, 1.0 / 3.0);
        assert_relative_eq!(rl.f1, 1.0 / 3.0);
    }

    #[test]
    fn disjoint_vocab_scores_zero() {
        let s = score_pair("aa bb", "cc dd");
        assert_eq!(s.r1, PrfScore::ZERO);
        assert_eq!(s.rl, PrfScore::ZERO);
    }

    #[test]
    fn empty_side_convention() {
        assert_eq!(rouge_n("", "the cat", 1), PrfScore::ZERO);
        assert_eq!(rouge_n("the cat", "", 1), PrfScore::ZERO);
        assert_eq!(rouge_l("", ""), PrfScore::ZERO);
    }

    #[test]
    fn aggregate_matches_definition() {
        let m = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_relative_eq!(m.mean, 3.0);
        assert_relative_eq!(m.std.unwrap(), 2.5f64.sqrt(), epsilon = 1e-15);

        let equal = vec![RougeScore::ZERO; 5];
        let agg = aggregate(&equal).unwrap();
        assert_eq!(agg.r1_f1.std, Some(0.0));

        assert!(aggregate(&[]).is_err());
        let one = aggregate(&[RougeScore::ZERO]).unwrap();
        assert_eq!(one.r1_f1.std, None);
    }

    #[test]
    fn multi_reference_averages_components() {
        // one ref identical (f1=1), one disjoint (f1=0) -> mean 0.5; the
        // DialogSum-style [0.5, 1.0] -> 0.75 case via explicit construction
        let refs = vec!["x y".to_string(), "p q".to_string()];
        let s = score_multi(&refs, "x y").unwrap();
        assert_relative_eq!(s.r1.f1, 0.5);

        let half = PrfScore {
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
        };
        let full = PrfScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
        let m = mean_rouge(&[
            RougeScore {
                r1: half,
                r2: half,
                rl: half,
            },
            RougeScore {
                r1: full,
                r2: full,
                rl: full,
            },
        ]);
        assert_relative_eq!(m.r1.f1, 0.75);
    }

    // ---- independent oracles --------------------------------------------

    /// O(|ref|·|hyp|) pairwise n-gram matching with used-flags; no hashing.
    fn overlap_oracle(reference: &[String], hypothesis: &[String], n: usize) -> usize {
        if reference.len() < n || hypothesis.len() < n {
            return 0;
        }
        let refs: Vec<&[String]> = reference.windows(n).collect();
        let hyps: Vec<&[String]> = hypothesis.windows(n).collect();
        let mut used = vec![false; refs.len()];
        let mut overlap = 0;
        for h in &hyps {
            for (i, r) in refs.iter().enumerate() {
                if !used[i] && r == h {
                    used[i] = true;
                    overlap += 1;
                    break;
                }
            }
        }
        overlap
    }

    /// Full-matrix LCS, written independently of the rolling-row version.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                dp[i][j] = if a[i - 1] == b[j - 1] {
                    dp[i - 1][j - 1] + 1
                } else {
                    dp[i - 1][j].max(dp[i][j - 1])
                };
            }
        }
        dp[a.len()][b.len()]
    }

    use proptest::prelude::*;

    fn token_lists() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
        let list = prop::collection::vec(word.prop_map(str::to_string), 0..12);
        (list.clone(), list)
    }

    proptest! {
        #[test]
        fn rouge_n_agrees_with_brute_force((r, h) in token_lists(), n in 1usize..4) {
            let fast = rouge_n_tokens(&r, &h, n);
            let overlap = overlap_oracle(&r, &h, n);
            let (rt, ht) = (r.len().saturating_sub(n - 1), h.len().saturating_sub(n - 1));
            if rt == 0 || ht == 0 {
                prop_assert_eq!(fast, PrfScore::ZERO);
            } else {
                prop_assert_eq!(fast.precision, overlap as f64 / ht as f64);
                prop_assert_eq!(fast.recall, overlap as f64 / rt as f64);
            }
        }

        #[test]
        fn rouge_l_agrees_with_full_matrix_lcs((r, h) in token_lists()) {
            let fast = rouge_l_tokens(&r, &h);
            let l = lcs_oracle(&r, &h);
            if r.is_empty() || h.is_empty() {
                prop_assert_eq!(fast, PrfScore::ZERO);
            } else {
                prop_assert_eq!(fast.precision, l as f64 / h.len() as f64);
                prop_assert_eq!(fast.recall, l as f64 / r.len() as f64);
            }
        }

        #[test]
        fn lcs_never_decreases_under_shared_suffix((r, h) in token_lists()) {
            let before = lcs_len(&r, &h);
            let mut r2 = r.clone();
            let mut h2 = h.clone();
            r2.push("zz".to_string());
            h2.push("zz".to_string());
            prop_assert!(lcs_len(&r2, &h2) >= before);
            prop_assert_eq!(lcs_len(&r2, &h2), lcs_oracle(&r2, &h2));
        }

        #[test]
        fn self_similarity_is_one(r in prop::collection::vec(
            prop::sample::select(vec!["a", "b", "c"]).prop_map(str::to_string), 1..10)) {
            prop_assert_eq!(rouge_l_tokens(&r, &r).f1, 1.0);
            prop_assert_eq!(rouge_n_tokens(&r, &r, 1).f1, 1.0);
        }

        #[test]
        fn f1_is_one_iff_ngram_multisets_match((r, h) in token_lists()) {
            let s = rouge_n_tokens(&r, &h, 1);
            let mut rs = r.clone();
            let mut hs = h.clone();
            rs.sort();
            hs.sort();
            if !r.is_empty() && rs == hs {
                prop_assert_eq!(s.f1, 1.0);
            } else if s.f1 == 1.0 {
                prop_assert_eq!(rs, hs);
            }
        }
    }
}
