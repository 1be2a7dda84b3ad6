//! Self-describing checkpoint containers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FEWSUMCK" | version u32 | endian u16 (0x00ff) | kind u8 | scalar u8
//! header_len u64 | header JSON | data_len u64 | raw tensor data | sha256
//! ```
//!
//! The header indexes every tensor by name, shape and offset; the trailing
//! digest covers all preceding bytes, so truncation or corruption is caught
//! before any payload is trusted. Round-trips are bit-exact. Files are
//! written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{
    ContentHash, ModelConfig, ParameterStore, PrefixBank, PrefixBlock, PrefixId, PrefixParams,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{MomentMap, OptSlot, RngState, TrainState};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"FEWSUMCK";
const VERSION: u32 = 1;
const ENDIAN_MARK: u16 = 0x00ff;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Backbone = 1,
    Bank = 2,
    Prefix = 3,
    TrainState = 4,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Kind::Backbone),
            2 => Ok(Kind::Bank),
            3 => Ok(Kind::Prefix),
            4 => Ok(Kind::TrainState),
            other => Err(Error::Checkpoint(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
    /// Content hash of the carried parameters, re-verified on load.
    content_hash: ContentHash,
    /// For prefix containers: the backbone these prefixes belong to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backbone_hash: Option<ContentHash>,
    /// Prefix owners, in tensor-name order `owner/block.path`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    owners: Vec<String>,
    /// Training step and RNG position for train-state containers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rng: Option<RngState>,
    /// Adam step counters per moment slot, keyed like the moment tensors.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    moment_steps: BTreeMap<String, u64>,
    /// Resolved run configuration embedded for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<RunConfig>,
}

struct Writer<S: Scalar> {
    tensors: Vec<TensorEntry>,
    data: Vec<u8>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Writer<S> {
    fn new() -> Self {
        Writer {
            tensors: Vec::new(),
            data: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, name: String, t: &Tensor<S>) {
        let offset = self.data.len() as u64;
        for v in t.data() {
            v.write_le(&mut self.data);
        }
        self.tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            count: t.numel() as u64,
        });
    }
}

fn write_container<S: Scalar>(path: &Path, kind: Kind, header: &Header, data: &[u8]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(32 + header_json.len() + data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
    buf.push(kind as u8);
    buf.push(S::TAG);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    buf.extend_from_slice(data);
    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);

    atomic_write(path, &buf)
}

/// Write-temp-then-rename, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp: PathBuf = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Container<S: Scalar> {
    header: Header,
    data: Vec<u8>,
    _marker: std::marker::PhantomData<S>,
}

fn read_container<S: Scalar>(path: &Path, want: Kind) -> Result<Container<S>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 8 + 4 + 2 + 1 + 1 + 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint container",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version} (supported: {VERSION})"
        )));
    }
    let endian = u16::from_le_bytes(bytes[12..14].try_into().unwrap());
    if endian != ENDIAN_MARK {
        return Err(Error::Checkpoint("endianness marker mismatch".into()));
    }
    if bytes.len() < 32 + 24 {
        return Err(Error::Checkpoint("container truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect: [u8; 32] = Sha256::digest(body).into();
    if digest != expect {
        return Err(Error::Checkpoint(
            "container digest mismatch (truncated or corrupted file)".into(),
        ));
    }
    let kind = Kind::from_u8(body[14])?;
    if kind != want {
        return Err(Error::Checkpoint(format!(
            "container holds kind {:?}, expected {:?}",
            kind, want
        )));
    }
    let scalar_tag = body[15];
    if scalar_tag != S::TAG {
        return Err(Error::Checkpoint(format!(
            "container scalar width {scalar_tag} does not match requested width {}",
            S::TAG
        )));
    }
    let mut at = 16usize;
    let header_len = u64::from_le_bytes(body[at..at + 8].try_into().unwrap()) as usize;
    at += 8;
    if at + header_len + 8 > body.len() {
        return Err(Error::Checkpoint("container truncated in header".into()));
    }
    let header: Header = serde_json::from_slice(&body[at..at + header_len])?;
    at += header_len;
    let data_len = u64::from_le_bytes(body[at..at + 8].try_into().unwrap()) as usize;
    at += 8;
    if at + data_len != body.len() {
        return Err(Error::Checkpoint("container truncated in data".into()));
    }
    Ok(Container {
        header,
        data: body[at..].to_vec(),
        _marker: std::marker::PhantomData,
    })
}

impl<S: Scalar> Container<S> {
    fn tensor(&self, entry: &TensorEntry) -> Result<Tensor<S>> {
        let start = entry.offset as usize;
        let len = entry.count as usize * S::WIDTH;
        let end = start + len;
        if end > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns the data section",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.count as usize);
        for chunk in self.data[start..end].chunks_exact(S::WIDTH) {
            data.push(S::read_le(chunk));
        }
        Tensor::from_vec(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))
    }

    fn tensor_map(&self) -> Result<BTreeMap<String, Tensor<S>>> {
        let mut map = BTreeMap::new();
        for entry in &self.header.tensors {
            map.insert(entry.name.clone(), self.tensor(entry)?);
        }
        Ok(map)
    }
}

// ---- backbone ----------------------------------------------------------------

pub fn save_backbone<S: Scalar>(
    path: &Path,
    store: &ParameterStore<S>,
    run_config: Option<&RunConfig>,
) -> Result<()> {
    let mut w = Writer::new();
    for (name, t) in store.iter() {
        w.push(name.clone(), t);
    }
    let header = Header {
        config: store.config().clone(),
        vocab: Some(store.vocab().tokens().to_vec()),
        tensors: w.tensors,
        content_hash: store.content_hash(),
        backbone_hash: None,
        owners: Vec::new(),
        step: None,
        rng: None,
        moment_steps: BTreeMap::new(),
        run_config: run_config.cloned(),
    };
    write_container::<S>(path, Kind::Backbone, &header, &w.data)
}

pub fn load_backbone<S: Scalar>(path: &Path) -> Result<ParameterStore<S>> {
    let c = read_container::<S>(path, Kind::Backbone)?;
    let vocab_tokens = c
        .header
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint("backbone container lacks a vocabulary".into()))?;
    let vocab = Vocab::from_tokens(vocab_tokens)?;
    let params = c.tensor_map()?;
    let mut params_grad = BTreeMap::new();
    for (k, v) in params {
        params_grad.insert(k, v.with_grad(true));
    }
    let store = ParameterStore::from_parts(c.header.config.clone(), vocab, params_grad)?;
    if store.content_hash() != c.header.content_hash {
        return Err(Error::Checkpoint(
            "backbone content hash does not match the recorded hash".into(),
        ));
    }
    Ok(store)
}

// ---- prefixes ------------------------------------------------------------------

fn push_prefix<S: Scalar>(w: &mut Writer<S>, owner: &str, p: &PrefixParams<S>) {
    for (path, t) in p.named_blocks() {
        w.push(format!("{owner}/{path}"), t);
    }
}

fn rebuild_prefix<S: Scalar>(
    owner: &str,
    cfg: &ModelConfig,
    map: &BTreeMap<String, Tensor<S>>,
) -> Result<PrefixParams<S>> {
    let owner_id = if owner == crate::train::UNIVERSAL_NAME {
        PrefixId::Universal
    } else {
        PrefixId::task(owner)
    };
    let take = |group: &str, i: usize, tag: &str| -> Result<Tensor<S>> {
        let key = format!("{owner}/{group}.l{i}.{tag}");
        map.get(&key)
            .cloned()
            .map(|t| t.with_grad(true))
            .ok_or_else(|| Error::Checkpoint(format!("missing prefix tensor {key}")))
    };
    let blocks = |group: &str, n: usize| -> Result<Vec<PrefixBlock<S>>> {
        (0..n)
            .map(|i| {
                Ok(PrefixBlock {
                    k: take(group, i, "k")?,
                    v: take(group, i, "v")?,
                })
            })
            .collect()
    };
    let p = PrefixParams {
        owner: owner_id,
        enc: blocks("enc", cfg.n_enc_layers)?,
        dec_self: blocks("dec_self", cfg.n_dec_layers)?,
        dec_cross: blocks("dec_cross", cfg.n_dec_layers)?,
    };
    p.validate_for(cfg)?;
    Ok(p)
}

pub fn save_bank<S: Scalar>(
    path: &Path,
    bank: &PrefixBank<S>,
    config: &ModelConfig,
    backbone_hash: ContentHash,
) -> Result<()> {
    let mut w = Writer::new();
    let mut owners = Vec::new();
    for (id, p) in bank.iter() {
        let owner = id.to_string();
        push_prefix(&mut w, &owner, p);
        owners.push(owner);
    }
    let header = Header {
        config: config.clone(),
        vocab: None,
        tensors: w.tensors,
        content_hash: bank.content_hash(),
        backbone_hash: Some(backbone_hash),
        owners,
        step: None,
        rng: None,
        moment_steps: BTreeMap::new(),
        run_config: None,
    };
    write_container::<S>(path, Kind::Bank, &header, &w.data)
}

/// Loads a prefix bank. When `expected_backbone` is given, a recorded hash
/// that differs is a refusal, not a warning.
pub fn load_bank<S: Scalar>(
    path: &Path,
    expected_backbone: Option<ContentHash>,
) -> Result<(PrefixBank<S>, ContentHash)> {
    let c = read_container::<S>(path, Kind::Bank)?;
    let recorded = c
        .header
        .backbone_hash
        .ok_or_else(|| Error::Checkpoint("bank container lacks a backbone hash".into()))?;
    if let Some(expect) = expected_backbone {
        if recorded != expect {
            return Err(Error::Checkpoint(format!(
                "bank was trained against backbone {recorded}, got {expect}"
            )));
        }
    }
    let map = c.tensor_map()?;
    let mut bank = PrefixBank::new();
    for owner in &c.header.owners {
        bank.insert(rebuild_prefix(owner, &c.header.config, &map)?);
    }
    if bank.content_hash() != c.header.content_hash {
        return Err(Error::Checkpoint(
            "bank content hash does not match the recorded hash".into(),
        ));
    }
    Ok((bank, recorded))
}

pub fn save_prefix<S: Scalar>(
    path: &Path,
    prefix: &PrefixParams<S>,
    config: &ModelConfig,
    backbone_hash: ContentHash,
) -> Result<()> {
    let mut w = Writer::new();
    let owner = prefix.owner.to_string();
    push_prefix(&mut w, &owner, prefix);
    let header = Header {
        config: config.clone(),
        vocab: None,
        tensors: w.tensors,
        content_hash: prefix.content_hash(),
        backbone_hash: Some(backbone_hash),
        owners: vec![owner],
        step: None,
        rng: None,
        moment_steps: BTreeMap::new(),
        run_config: None,
    };
    write_container::<S>(path, Kind::Prefix, &header, &w.data)
}

pub fn load_prefix<S: Scalar>(
    path: &Path,
    expected_backbone: Option<ContentHash>,
) -> Result<(PrefixParams<S>, ContentHash)> {
    let c = read_container::<S>(path, Kind::Prefix)?;
    let recorded = c
        .header
        .backbone_hash
        .ok_or_else(|| Error::Checkpoint("prefix container lacks a backbone hash".into()))?;
    if let Some(expect) = expected_backbone {
        if recorded != expect {
            return Err(Error::Checkpoint(format!(
                "prefix was tuned against backbone {recorded}, got {expect}"
            )));
        }
    }
    let owner = c
        .header
        .owners
        .first()
        .ok_or_else(|| Error::Checkpoint("prefix container lacks an owner".into()))?
        .clone();
    let map = c.tensor_map()?;
    let prefix = rebuild_prefix(&owner, &c.header.config, &map)?;
    if prefix.content_hash() != c.header.content_hash {
        return Err(Error::Checkpoint(
            "prefix content hash does not match the recorded hash".into(),
        ));
    }
    Ok((prefix, recorded))
}

// ---- train state ----------------------------------------------------------------

pub fn save_train_state<S: Scalar>(path: &Path, state: &TrainState<S>) -> Result<()> {
    let mut w = Writer::new();
    let mut moment_steps = BTreeMap::new();
    for (name, t) in state.backbone.iter() {
        w.push(format!("param/{name}"), t);
    }
    let mut owners = Vec::new();
    for (id, p) in state.bank.iter() {
        let owner = id.to_string();
        for (path, t) in p.named_blocks() {
            w.push(format!("bank/{owner}/{path}"), t);
        }
        owners.push(owner);
    }
    let mut push_moments = |prefix: &str, map: &MomentMap<S>, w: &mut Writer<S>| {
        for (name, slot) in map {
            let m = Tensor::from_vec(vec![slot.m.len()], slot.m.clone()).expect("flat");
            let v = Tensor::from_vec(vec![slot.v.len()], slot.v.clone()).expect("flat");
            w.push(format!("{prefix}/{name}/m"), &m);
            w.push(format!("{prefix}/{name}/v"), &v);
            moment_steps.insert(format!("{prefix}/{name}"), slot.t);
        }
    };
    push_moments("moments/backbone", &state.backbone_moments, &mut w);
    for (owner, map) in &state.prefix_moments {
        push_moments(&format!("moments/prefix/{owner}"), map, &mut w);
    }
    let header = Header {
        config: state.backbone.config().clone(),
        vocab: Some(state.backbone.vocab().tokens().to_vec()),
        tensors: w.tensors,
        content_hash: state.backbone.content_hash(),
        backbone_hash: None,
        owners,
        step: Some(state.step),
        rng: Some(RngState::capture(&state.rng)),
        moment_steps,
        run_config: None,
    };
    write_container::<S>(path, Kind::TrainState, &header, &w.data)
}

pub fn load_train_state<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let c = read_container::<S>(path, Kind::TrainState)?;
    let vocab = Vocab::from_tokens(
        c.header
            .vocab
            .clone()
            .ok_or_else(|| Error::Checkpoint("train state lacks a vocabulary".into()))?,
    )?;
    let all = c.tensor_map()?;

    let mut params = BTreeMap::new();
    for (name, t) in &all {
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), t.clone().with_grad(true));
        }
    }
    let backbone = ParameterStore::from_parts(c.header.config.clone(), vocab, params)?;
    if backbone.content_hash() != c.header.content_hash {
        return Err(Error::Checkpoint(
            "train-state backbone hash does not match the recorded hash".into(),
        ));
    }

    let scoped: BTreeMap<String, Tensor<S>> = all
        .iter()
        .filter_map(|(name, t)| {
            name.strip_prefix("bank/")
                .map(|rest| (rest.to_string(), t.clone()))
        })
        .collect();
    let mut bank = PrefixBank::new();
    for owner in &c.header.owners {
        bank.insert(rebuild_prefix(owner, &c.header.config, &scoped)?);
    }

    let mut backbone_moments = MomentMap::new();
    let mut prefix_moments: BTreeMap<String, MomentMap<S>> = BTreeMap::new();
    for (slot_key, &t_step) in &c.header.moment_steps {
        let m = all
            .get(&format!("{slot_key}/m"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment tensor {slot_key}/m")))?;
        let v = all
            .get(&format!("{slot_key}/v"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment tensor {slot_key}/v")))?;
        let slot = OptSlot {
            m: m.data().to_vec(),
            v: v.data().to_vec(),
            t: t_step,
        };
        if let Some(name) = slot_key.strip_prefix("moments/backbone/") {
            backbone_moments.insert(name.to_string(), slot);
        } else if let Some(rest) = slot_key.strip_prefix("moments/prefix/") {
            let (owner, name) = rest.split_once('/').ok_or_else(|| {
                Error::Checkpoint(format!("malformed moment key {slot_key}"))
            })?;
            prefix_moments
                .entry(owner.to_string())
                .or_default()
                .insert(name.to_string(), slot);
        } else {
            return Err(Error::Checkpoint(format!("malformed moment key {slot_key}")));
        }
    }

    let rng = c
        .header
        .rng
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("train state lacks an RNG position".into()))?
        .restore();
    Ok(TrainState {
        step: c
            .header
            .step
            .ok_or_else(|| Error::Checkpoint("train state lacks a step counter".into()))?,
        backbone,
        bank,
        backbone_moments,
        prefix_moments,
        rng,
    })
}
