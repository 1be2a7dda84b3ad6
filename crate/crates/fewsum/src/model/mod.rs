//! Prefix-equipped encoder-decoder transformer.
//!
//! Every attention layer accepts extra key/value rows ("prefix" vectors)
//! that sit in front of the real keys and values: encoder self-attention
//! takes the encoder prefix block of its layer, decoder layers take
//! separate blocks for self- and cross-attention. With a prefix length of
//! zero the model degrades to a plain transformer.

mod decode;
mod hash;

pub use decode::{generate, DecodeStrategy};
pub use hash::ContentHash;

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{Vocab, BOS};

/// Initialization scale for embeddings and prefix blocks. Few-shot random
/// prefix initialization reuses the same constant, so "random init" results
/// are comparable with prefixes trained from this scale.
pub const PREFIX_INIT_STD: f64 = 0.1;
const EMBED_INIT_STD: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

fn default_dropout() -> f64 {
    0.0
}
fn default_seed() -> u64 {
    0
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Prefix length m; 0 disables prefixes entirely.
    pub prefix_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0, // filled from the vocabulary at build time
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_src_len: 128,
            max_tgt_len: 32,
            prefix_len: 16,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks every structural constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be >= 1".to_string());
        }
        if self.n_heads == 0 {
            errs.push("n_heads must be >= 1".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            errs.push("layer counts must be >= 1".to_string());
        }
        if self.d_ff == 0 {
            errs.push("d_ff must be >= 1".to_string());
        }
        if self.max_src_len == 0 || self.max_tgt_len == 0 {
            errs.push("max_src_len and max_tgt_len must be >= 1".to_string());
        }
        // vocab_size 0 means "derive from the vocabulary at build time"
        if self.vocab_size != 0 && self.vocab_size < crate::vocab::SEP + 1 {
            errs.push(format!(
                "vocab_size ({}) smaller than the reserved specials",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            errs.push(format!(
                "dropout_rate ({}) must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Identity of a prefix in the bank: one per pre-training task, plus the
/// shared universal prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrefixId {
    Universal,
    Task(String),
}

impl PrefixId {
    pub fn task(name: impl Into<String>) -> Self {
        PrefixId::Task(name.into())
    }
}

impl fmt::Display for PrefixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrefixId::Universal => write!(f, "UNIVERSAL"),
            PrefixId::Task(t) => write!(f, "{t}"),
        }
    }
}

/// One layer's prefix rows: keys and values, each `[m × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBlock<S: Scalar> {
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

/// Full prefix parameter set for one owner (task or universal).
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixParams<S: Scalar> {
    pub owner: PrefixId,
    pub enc: Vec<PrefixBlock<S>>,
    pub dec_self: Vec<PrefixBlock<S>>,
    pub dec_cross: Vec<PrefixBlock<S>>,
}

impl<S: Scalar> PrefixParams<S> {
    /// Seeded normal initialization at [`PREFIX_INIT_STD`] scale.
    pub fn init_random(cfg: &ModelConfig, owner: PrefixId, rng: &mut ChaCha8Rng) -> Self {
        let block = |rng: &mut ChaCha8Rng| PrefixBlock {
            k: normal_tensor(rng, vec![cfg.prefix_len, cfg.d_model], PREFIX_INIT_STD),
            v: normal_tensor(rng, vec![cfg.prefix_len, cfg.d_model], PREFIX_INIT_STD),
        };
        PrefixParams {
            owner,
            enc: (0..cfg.n_enc_layers).map(|_| block(rng)).collect(),
            dec_self: (0..cfg.n_dec_layers).map(|_| block(rng)).collect(),
            dec_cross: (0..cfg.n_dec_layers).map(|_| block(rng)).collect(),
        }
    }

    /// All-zero prefix of the configured shape (used in neutrality tests).
    pub fn zeros(cfg: &ModelConfig, owner: PrefixId) -> Self {
        let block = || PrefixBlock {
            k: Tensor::zeros(vec![cfg.prefix_len, cfg.d_model]),
            v: Tensor::zeros(vec![cfg.prefix_len, cfg.d_model]),
        };
        PrefixParams {
            owner,
            enc: (0..cfg.n_enc_layers).map(|_| block()).collect(),
            dec_self: (0..cfg.n_dec_layers).map(|_| block()).collect(),
            dec_cross: (0..cfg.n_dec_layers).map(|_| block()).collect(),
        }
    }

    /// Deep copy under a new owner; mutating the copy never touches `self`.
    pub fn copied_for(&self, owner: PrefixId) -> Self {
        let mut c = self.clone();
        c.owner = owner;
        c
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        let want = [cfg.prefix_len, cfg.d_model];
        let groups = [
            (&self.enc, cfg.n_enc_layers, "enc"),
            (&self.dec_self, cfg.n_dec_layers, "dec_self"),
            (&self.dec_cross, cfg.n_dec_layers, "dec_cross"),
        ];
        for (blocks, n, name) in groups {
            if blocks.len() != n {
                return Err(Error::contract(format!(
                    "prefix group {name} has {} layers, model wants {n}",
                    blocks.len()
                )));
            }
            for b in blocks.iter() {
                if b.k.shape() != want || b.v.shape() != want {
                    return Err(Error::Dimension {
                        op: "prefix block",
                        lhs: b.k.shape().to_vec(),
                        rhs: want.to_vec(),
                    });
                }
                if !b.k.is_finite() || !b.v.is_finite() {
                    return Err(Error::contract(format!(
                        "prefix group {name} contains non-finite values"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable (path, tensor) view over all blocks, for optimizers and I/O.
    pub fn named_blocks(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            out.push((format!("enc.l{i}.k"), &b.k));
            out.push((format!("enc.l{i}.v"), &b.v));
        }
        for (i, b) in self.dec_self.iter().enumerate() {
            out.push((format!("dec_self.l{i}.k"), &b.k));
            out.push((format!("dec_self.l{i}.v"), &b.v));
        }
        for (i, b) in self.dec_cross.iter().enumerate() {
            out.push((format!("dec_cross.l{i}.k"), &b.k));
            out.push((format!("dec_cross.l{i}.v"), &b.v));
        }
        out
    }

    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc.l{i}.k"), &mut b.k));
            out.push((format!("enc.l{i}.v"), &mut b.v));
        }
        for (i, b) in self.dec_self.iter_mut().enumerate() {
            out.push((format!("dec_self.l{i}.k"), &mut b.k));
            out.push((format!("dec_self.l{i}.v"), &mut b.v));
        }
        for (i, b) in self.dec_cross.iter_mut().enumerate() {
            out.push((format!("dec_cross.l{i}.k"), &mut b.k));
            out.push((format!("dec_cross.l{i}.v"), &mut b.v));
        }
        out
    }

    pub fn content_hash(&self) -> ContentHash {
        let mut buf = Vec::new();
        for (name, t) in self.named_blocks() {
            buf.extend_from_slice(name.as_bytes());
            t.write_bytes(&mut buf);
        }
        ContentHash::digest(&buf)
    }
}

/// Named map of prefix parameter sets. Lookups of absent ids fail loudly.
#[derive(Debug, Clone, Default)]
pub struct PrefixBank<S: Scalar> {
    entries: BTreeMap<PrefixId, PrefixParams<S>>,
}

impl<S: Scalar> PrefixBank<S> {
    pub fn new() -> Self {
        PrefixBank {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, prefix: PrefixParams<S>) {
        self.entries.insert(prefix.owner.clone(), prefix);
    }

    pub fn get(&self, id: &PrefixId) -> Result<&PrefixParams<S>> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &PrefixId) -> Result<&mut PrefixParams<S>> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn contains(&self, id: &PrefixId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &PrefixId> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PrefixId, &PrefixParams<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn content_hash(&self) -> ContentHash {
        let mut buf = Vec::new();
        for (id, p) in &self.entries {
            buf.extend_from_slice(id.to_string().as_bytes());
            buf.extend_from_slice(&p.content_hash().0);
        }
        ContentHash::digest(&buf)
    }
}

/// Backbone parameters: a closed, named set of tensors plus the config and
/// vocabulary that define the model.
#[derive(Debug, Clone)]
pub struct ParameterStore<S: Scalar> {
    config: ModelConfig,
    vocab: Vocab,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<S>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Index(format!("no parameter named {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Index(format!("no parameter named {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over every parameter's shape and raw element bytes, visited
    /// in sorted path order. Changes iff some parameter byte changes.
    pub fn content_hash(&self) -> ContentHash {
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            t.write_bytes(&mut buf);
        }
        ContentHash::digest(&buf)
    }

    /// Rebuilds a store from checkpoint pieces, re-checking the key set.
    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        params: BTreeMap<String, Tensor<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected: ParameterStore<S> = build_model(&config, vocab.clone(), 0)?;
        let want: Vec<&String> = expected.params.keys().collect();
        let got: Vec<&String> = params.keys().collect();
        if want != got {
            return Err(Error::Checkpoint(
                "parameter key set does not match the configured architecture".into(),
            ));
        }
        for (name, t) in &params {
            if t.shape() != expected.params[name].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.params[name].shape()
                )));
            }
        }
        Ok(ParameterStore {
            config,
            vocab,
            params,
        })
    }
}

fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_real(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data constructed together")
}

/// Builds a freshly initialized backbone. Two calls with the same config,
/// vocabulary and seed produce bit-identical parameter stores.
pub fn build_model<S: Scalar>(
    config: &ModelConfig,
    vocab: Vocab,
    seed: u64,
) -> Result<ParameterStore<S>> {
    let mut config = config.clone();
    if config.vocab_size == 0 {
        config.vocab_size = vocab.len();
    }
    config.validate()?;
    if config.vocab_size != vocab.len() {
        return Err(Error::Validation(vec![format!(
            "vocab_size ({}) does not match the vocabulary ({} tokens)",
            config.vocab_size,
            vocab.len()
        )]));
    }

    let mut rng = crate::seed::derive_rng(seed, &["model-init"]);
    let d = config.d_model;
    let dff = config.d_ff;
    let w_std = 1.0 / (d as f64).sqrt();
    let mut params = BTreeMap::new();

    let put = |params: &mut BTreeMap<String, Tensor<S>>, name: String, t: Tensor<S>| {
        params.insert(name, t.with_grad(true));
    };

    put(
        &mut params,
        "embed.tok".into(),
        normal_tensor(&mut rng, vec![config.vocab_size, d], EMBED_INIT_STD),
    );

    let attn_block = |params: &mut BTreeMap<String, Tensor<S>>,
                          rng: &mut ChaCha8Rng,
                          base: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(
                format!("{base}.{w}"),
                normal_tensor::<S>(rng, vec![d, d], w_std).with_grad(true),
            );
        }
        for b in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{base}.{b}"), Tensor::zeros(vec![d]).with_grad(true));
        }
    };
    let ln_block = |params: &mut BTreeMap<String, Tensor<S>>, base: &str| {
        params.insert(
            format!("{base}.gamma"),
            Tensor::from_vec(vec![d], vec![S::one(); d])
                .unwrap()
                .with_grad(true),
        );
        params.insert(format!("{base}.beta"), Tensor::zeros(vec![d]).with_grad(true));
    };
    let ff_block = |params: &mut BTreeMap<String, Tensor<S>>,
                        rng: &mut ChaCha8Rng,
                        base: &str| {
        params.insert(
            format!("{base}.w1"),
            normal_tensor::<S>(rng, vec![d, dff], w_std).with_grad(true),
        );
        params.insert(format!("{base}.b1"), Tensor::zeros(vec![dff]).with_grad(true));
        params.insert(
            format!("{base}.w2"),
            normal_tensor::<S>(rng, vec![dff, d], 1.0 / (dff as f64).sqrt()).with_grad(true),
        );
        params.insert(format!("{base}.b2"), Tensor::zeros(vec![d]).with_grad(true));
    };

    for i in 0..config.n_enc_layers {
        ln_block(&mut params, &format!("enc.l{i}.ln1"));
        attn_block(&mut params, &mut rng, &format!("enc.l{i}.attn"));
        ln_block(&mut params, &format!("enc.l{i}.ln2"));
        ff_block(&mut params, &mut rng, &format!("enc.l{i}.ff"));
    }
    ln_block(&mut params, "enc.ln_out");
    for i in 0..config.n_dec_layers {
        ln_block(&mut params, &format!("dec.l{i}.ln1"));
        attn_block(&mut params, &mut rng, &format!("dec.l{i}.self_attn"));
        ln_block(&mut params, &format!("dec.l{i}.ln2"));
        attn_block(&mut params, &mut rng, &format!("dec.l{i}.cross_attn"));
        ln_block(&mut params, &format!("dec.l{i}.ln3"));
        ff_block(&mut params, &mut rng, &format!("dec.l{i}.ff"));
    }
    ln_block(&mut params, "dec.ln_out");

    Ok(ParameterStore {
        config,
        vocab,
        params,
    })
}

// ---- graph assembly ---------------------------------------------------------

/// Backbone parameters inserted on a tape, keyed by path.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Var {
        self.map[path]
    }

    /// Re-points a parameter path at a different leaf (gradient checks swap
    /// one tensor at a time this way).
    pub fn set(&mut self, path: &str, var: Var) {
        self.map.insert(path.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Prefix blocks inserted on a tape, `(k, v)` per layer.
pub struct PrefixVars {
    pub enc: Vec<(Var, Var)>,
    pub dec_self: Vec<(Var, Var)>,
    pub dec_cross: Vec<(Var, Var)>,
}

/// Inserts every backbone parameter as a leaf. `trainable` decides whether
/// backward produces gradients; frozen-backbone runs insert with `false`.
pub fn insert_params<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    trainable: bool,
) -> ParamVars {
    let mut map = BTreeMap::new();
    for (name, t) in store.iter() {
        map.insert(name.clone(), g.leaf(t.clone().with_grad(trainable)));
    }
    ParamVars { map }
}

pub fn insert_prefix<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &PrefixParams<S>,
    trainable: bool,
) -> PrefixVars {
    let ins = |g: &mut Graph<S>, b: &PrefixBlock<S>| {
        (
            g.leaf(b.k.clone().with_grad(trainable)),
            g.leaf(b.v.clone().with_grad(trainable)),
        )
    };
    PrefixVars {
        enc: prefix.enc.iter().map(|b| ins(g, b)).collect(),
        dec_self: prefix.dec_self.iter().map(|b| ins(g, b)).collect(),
        dec_cross: prefix.dec_cross.iter().map(|b| ins(g, b)).collect(),
    }
}

/// Output of one attention call: the context rows and the post-softmax
/// weight matrix `[n × (m + n')]`.
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Scaled dot-product attention over `[prefix_k; k]` and `[prefix_v; v]`.
///
/// Causal masking applies only to the non-prefix positions: every query row
/// may attend to all `m` prefix rows, while key column `j >= m` is visible
/// to query `i` only when `j - m <= i`. Scale is `1/sqrt(q.cols)`.
pub fn attend<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    causal: bool,
) -> Result<Attention> {
    let (k_full, v_full, m) = match prefix {
        Some((pk, pv)) => {
            let kf = g.concat_rows(pk, k)?;
            let vf = g.concat_rows(pv, v)?;
            (kf, vf, g.shape(pk)[0])
        }
        None => (k, v, 0),
    };
    let dh = g.shape(q)[1];
    let n = g.shape(q)[0];
    let total = g.shape(k_full)[0];
    let kt = g.transpose(k_full)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, S::from_real(1.0 / (dh as f64).sqrt()));
    if causal {
        let mut mask = vec![S::zero(); n * total];
        for i in 0..n {
            for j in m..total {
                if j - m > i {
                    mask[i * total + j] = S::from_real(MASKED);
                }
            }
        }
        let mask = g.constant(Tensor::from_vec(vec![n, total], mask)?);
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax_rows(scores)?;
    let output = g.matmul(weights, v_full)?;
    Ok(Attention { output, weights })
}

/// Tensor-level wrapper over [`attend`] for direct use and tests: plain data
/// in, attention output out. Prefix tensors may have zero rows.
pub fn attention_with_prefix<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    prefix_k: &Tensor<S>,
    prefix_v: &Tensor<S>,
    causal: bool,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let vv = g.constant(v.clone());
    let prefix = if prefix_k.rows() > 0 {
        Some((g.constant(prefix_k.clone()), g.constant(prefix_v.clone())))
    } else {
        if prefix_v.rows() != 0 {
            return Err(Error::Dimension {
                op: "attention_with_prefix",
                lhs: prefix_k.shape().to_vec(),
                rhs: prefix_v.shape().to_vec(),
            });
        }
        None
    };
    let att = attend(&mut g, qv, kv, vv, prefix, causal)?;
    Ok(g.detach(att.output))
}

/// Per-step dropout context; absent in inference mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn apply_dropout<S: Scalar>(g: &mut Graph<S>, x: Var, ctx: &mut Option<Dropout>) -> Result<Var> {
    let Some(d) = ctx.as_mut() else {
        return Ok(x);
    };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.rate;
    let inv = S::from_real(1.0 / keep);
    let numel = g.value(x).len();
    let mask_data: Vec<S> = (0..numel)
        .map(|_| {
            let u: f64 = rand::Rng::gen(d.rng);
            if u < keep {
                inv
            } else {
                S::zero()
            }
        })
        .collect();
    let mask = g.constant(Tensor::from_vec(g.shape(x).to_vec(), mask_data)?);
    g.mul(x, mask)
}

fn sinusoidal_rows<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(S::from_real(v));
        }
    }
    Tensor::from_vec(vec![len, d], data).expect("shape/data constructed together")
}

struct AttnPaths {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

fn attn_paths(vars: &ParamVars, base: &str) -> AttnPaths {
    AttnPaths {
        wq: vars.get(&format!("{base}.wq")),
        bq: vars.get(&format!("{base}.bq")),
        wk: vars.get(&format!("{base}.wk")),
        bk: vars.get(&format!("{base}.bk")),
        wv: vars.get(&format!("{base}.wv")),
        bv: vars.get(&format!("{base}.bv")),
        wo: vars.get(&format!("{base}.wo")),
        bo: vars.get(&format!("{base}.bo")),
    }
}

/// Multi-head attention: project, split heads, attend each head against the
/// same full-width prefix block (sliced per head), reassemble, project out.
fn multi_head<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    w: &AttnPaths,
    q_in: Var,
    kv_in: Var,
    prefix: Option<(Var, Var)>,
    causal: bool,
) -> Result<Var> {
    let q = g.matmul(q_in, w.wq)?;
    let q = g.add_row(q, w.bq)?;
    let k = g.matmul(kv_in, w.wk)?;
    let k = g.add_row(k, w.bk)?;
    let v = g.matmul(kv_in, w.wv)?;
    let v = g.add_row(v, w.bv)?;

    let dh = cfg.head_dim();
    let mut merged: Option<Var> = None;
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let ph = match prefix {
            Some((pk, pv)) => Some((g.slice_cols(pk, h * dh, dh)?, g.slice_cols(pv, h * dh, dh)?)),
            None => None,
        };
        let att = attend(g, qh, kh, vh, ph, causal)?;
        merged = Some(match merged {
            None => att.output,
            Some(acc) => g.concat_cols(acc, att.output)?,
        });
    }
    let concat = merged.expect("n_heads >= 1");
    let out = g.matmul(concat, w.wo)?;
    g.add_row(out, w.bo)
}

fn layer_norm<S: Scalar>(g: &mut Graph<S>, vars: &ParamVars, base: &str, x: Var) -> Result<Var> {
    g.layer_norm_rows(
        x,
        vars.get(&format!("{base}.gamma")),
        vars.get(&format!("{base}.beta")),
        S::from_real(LN_EPS),
    )
}

fn feed_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ParamVars,
    base: &str,
    x: Var,
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    let h = g.matmul(x, vars.get(&format!("{base}.w1")))?;
    let h = g.add_row(h, vars.get(&format!("{base}.b1")))?;
    let h = g.relu(h);
    let h = apply_dropout(g, h, dropout)?;
    let h = g.matmul(h, vars.get(&format!("{base}.w2")))?;
    g.add_row(h, vars.get(&format!("{base}.b2")))
}

fn embed_sequence<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<Var> {
    let e = g.gather_rows(vars.get("embed.tok"), ids)?;
    let e = g.scale(e, S::from_real((cfg.d_model as f64).sqrt()));
    let pe = g.constant(sinusoidal_rows(ids.len(), cfg.d_model));
    g.add(e, pe)
}

/// Encoder stack; prefix rows feed each layer's self-attention. Returns the
/// normalized memory `[n_src × d_model]`.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ParamVars,
    prefix: Option<&PrefixVars>,
    cfg: &ModelConfig,
    src_ids: &[usize],
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    if src_ids.is_empty() {
        return Err(Error::contract("empty source sequence"));
    }
    let mut x = embed_sequence(g, vars, cfg, src_ids)?;
    for i in 0..cfg.n_enc_layers {
        let h = layer_norm(g, vars, &format!("enc.l{i}.ln1"), x)?;
        let p = prefix.map(|pv| pv.enc[i]);
        let w = attn_paths(vars, &format!("enc.l{i}.attn"));
        let a = multi_head(g, cfg, &w, h, h, p, false)?;
        let a = apply_dropout(g, a, dropout)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, vars, &format!("enc.l{i}.ln2"), x)?;
        let f = feed_forward(g, vars, &format!("enc.l{i}.ff"), h, dropout)?;
        x = g.add(x, f)?;
    }
    layer_norm(g, vars, "enc.ln_out", x)
}

/// Decoder stack over teacher-forced input ids. Self-attention is causal;
/// cross-attention reads `memory`. Returns final states `[t × d_model]`.
pub fn decode_states<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ParamVars,
    prefix: Option<&PrefixVars>,
    cfg: &ModelConfig,
    memory: Var,
    dec_input_ids: &[usize],
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    if dec_input_ids.is_empty() {
        return Err(Error::contract("empty decoder input"));
    }
    let mut y = embed_sequence(g, vars, cfg, dec_input_ids)?;
    for i in 0..cfg.n_dec_layers {
        let h = layer_norm(g, vars, &format!("dec.l{i}.ln1"), y)?;
        let p = prefix.map(|pv| pv.dec_self[i]);
        let w = attn_paths(vars, &format!("dec.l{i}.self_attn"));
        let a = multi_head(g, cfg, &w, h, h, p, true)?;
        let a = apply_dropout(g, a, dropout)?;
        y = g.add(y, a)?;

        let h = layer_norm(g, vars, &format!("dec.l{i}.ln2"), y)?;
        let p = prefix.map(|pv| pv.dec_cross[i]);
        let w = attn_paths(vars, &format!("dec.l{i}.cross_attn"));
        let a = multi_head(g, cfg, &w, h, memory, p, false)?;
        let a = apply_dropout(g, a, dropout)?;
        y = g.add(y, a)?;

        let h = layer_norm(g, vars, &format!("dec.l{i}.ln3"), y)?;
        let f = feed_forward(g, vars, &format!("dec.l{i}.ff"), h, dropout)?;
        y = g.add(y, f)?;
    }
    layer_norm(g, vars, "dec.ln_out", y)
}

/// Projects decoder states onto the vocabulary via the tied embedding.
pub fn project_logits<S: Scalar>(g: &mut Graph<S>, vars: &ParamVars, states: Var) -> Result<Var> {
    let et = g.transpose(vars.get("embed.tok"))?;
    g.matmul(states, et)
}

/// Truncates to the configured maximum, logging whenever tokens are lost.
pub fn truncate<'a>(ids: &'a [usize], max: usize, what: &str) -> &'a [usize] {
    if ids.len() > max {
        log::warn!(
            "{what} sequence of {} tokens truncated to {max}",
            ids.len()
        );
        &ids[..max]
    } else {
        ids
    }
}

/// Teacher-forced logits for every position of `tgt_ids` given `src_ids`,
/// assembled on the provided tape (so gradients can flow to any leaves the
/// caller marked trainable).
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ParamVars,
    prefix: Option<&PrefixVars>,
    cfg: &ModelConfig,
    src_ids: &[usize],
    tgt_ids: &[usize],
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    let src = truncate(src_ids, cfg.max_src_len, "source");
    let tgt = truncate(tgt_ids, cfg.max_tgt_len, "target");
    if tgt.is_empty() {
        return Err(Error::contract("empty target sequence"));
    }
    let memory = encode(g, vars, prefix, cfg, src, dropout)?;
    let mut dec_input = Vec::with_capacity(tgt.len());
    dec_input.push(BOS);
    dec_input.extend_from_slice(&tgt[..tgt.len() - 1]);
    let states = decode_states(g, vars, prefix, cfg, memory, &dec_input, dropout)?;
    project_logits(g, vars, states)
}

/// Inference-mode forward: plain tensors in, teacher-forced logits out.
pub fn forward<S: Scalar>(
    params: &ParameterStore<S>,
    prefix: &PrefixParams<S>,
    src_tokens: &[usize],
    tgt_tokens: &[usize],
) -> Result<Tensor<S>> {
    prefix.validate_for(params.config())?;
    check_token_range(src_tokens, params.config().vocab_size)?;
    check_token_range(tgt_tokens, params.config().vocab_size)?;
    let mut g = Graph::new();
    let vars = insert_params(&mut g, params, false);
    let pvars = insert_prefix(&mut g, prefix, false);
    let logits = forward_graph(
        &mut g,
        &vars,
        Some(&pvars),
        params.config(),
        src_tokens,
        tgt_tokens,
        &mut None,
    )?;
    Ok(g.detach(logits))
}

pub(crate) fn check_token_range(ids: &[usize], vocab_size: usize) -> Result<()> {
    for &id in ids {
        if id >= vocab_size {
            return Err(Error::Index(format!(
                "token id {id} out of vocab {vocab_size}"
            )));
        }
    }
    Ok(())
}
