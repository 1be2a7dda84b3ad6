//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fewsum::bench::{
    load_jsonl, make_synthetic_task, run_benchmark, sample_shot_sets, Split, TaskData,
};
use fewsum::checkpoint;
use fewsum::config::{Manifest, RunConfig, TaskConfig, TaskSource};
use fewsum::model::{generate, ContentHash};
use fewsum::rouge::{mean_rouge, score_multi, RougeScore};
use fewsum::seed::derive_seed;
use fewsum::train::{init_state, plan_pretrain, run_steps, TaskRegistry, TrainLogRecord};
use fewsum::tune::{init_prefix, prefix_tune};
use fewsum::vocab::SEP;
use fewsum::{Error, PrefixBank, ParameterStore, Result, TrainState};

use crate::{Cmd, Common};

pub fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain {
            common,
            resume,
            stop_at,
        } => {
            let cfg = load_config(&common)?;
            cmd_pretrain(&cfg, &common.out_dir, resume.as_deref(), stop_at)
        }
        Cmd::Tune {
            common,
            backbone,
            bank,
            task,
            k,
            set_index,
        } => {
            let cfg = load_config(&common)?;
            cmd_tune(&cfg, &common.out_dir, &backbone, &bank, &task, k, set_index)
        }
        Cmd::Generate {
            common,
            backbone,
            prefix,
            input,
        } => {
            let cfg = load_config(&common)?;
            cmd_generate(&cfg, &common.out_dir, &backbone, &prefix, &input)
        }
        Cmd::Score {
            common,
            predictions,
            references,
        } => {
            let cfg = load_config(&common)?;
            cmd_score(&cfg, &common.out_dir, &predictions, &references)
        }
        Cmd::Bench {
            common,
            backbone,
            bank,
        } => {
            let cfg = load_config(&common)?;
            cmd_bench(&cfg, &common.out_dir, &backbone, &bank)
        }
        Cmd::SampleShots { common, task, k } => {
            let cfg = load_config(&common)?;
            cmd_sample_shots(&cfg, &common.out_dir, &task, k)
        }
        Cmd::Replay { manifest, out_dir } => cmd_replay(&manifest, &out_dir),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", common.config.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::data(format!("{}: {e}", common.config.display())))?;
    for spec in &common.set {
        crate::overrides::apply(&mut value, spec)?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::data(format!("{}: {e}", common.config.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Materializes a declared task: generate the synthetic corpus or load the
/// JSONL files.
fn materialize_task(tc: &TaskConfig) -> Result<TaskData> {
    match &tc.source {
        TaskSource::Synthetic { spec } => make_synthetic_task(spec),
        TaskSource::Jsonl {
            task_id,
            train_path,
            test_path,
        } => {
            let data = TaskData {
                train_pool: load_jsonl(train_path, task_id, Split::TrainPool)?,
                test: load_jsonl(test_path, task_id, Split::Test)?,
            };
            data.validate()?;
            Ok(data)
        }
    }
}

fn build_registry(cfg: &RunConfig) -> Result<TaskRegistry> {
    let mut registry = TaskRegistry::new();
    for tc in cfg.pretrain_tasks() {
        let data = materialize_task(tc)?;
        let raw = data.train_pool.len();
        registry.register(
            tc.source.task_id(),
            data.train_pool,
            tc.target_size.unwrap_or(raw),
        );
    }
    registry.extra_vocab = cfg.extra_vocab.clone();
    // synthetic tasks (held-out ones included) draw from a fixed inventory;
    // reserving it keeps later domains free of unknown-token holes
    if cfg
        .tasks
        .iter()
        .any(|t| matches!(t.source, TaskSource::Synthetic { .. }))
    {
        registry
            .extra_vocab
            .extend(fewsum::bench::token_inventory());
    }
    registry.validate()?;
    Ok(registry)
}

fn find_task(cfg: &RunConfig, task_id: &str) -> Result<TaskData> {
    let tc = cfg
        .tasks
        .iter()
        .find(|t| t.source.task_id() == task_id)
        .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
    materialize_task(tc)
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(ContentHash::digest(&bytes).to_hex())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    checkpoint::atomic_write(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&serde_json::to_vec(r)?);
        out.push(b'\n');
    }
    checkpoint::atomic_write(path, &out)
}

fn record_outputs(manifest: &mut Manifest, dir: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        manifest
            .outputs
            .insert((*name).to_string(), file_hash(&dir.join(name))?);
    }
    Ok(())
}

fn finish_manifest(
    mut manifest: Manifest,
    dir: &Path,
    names: &[&str],
    preserve_timestamp: Option<String>,
) -> Result<()> {
    record_outputs(&mut manifest, dir, names)?;
    manifest.timestamp = preserve_timestamp.or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| format!("unix:{}", d.as_secs()))
    });
    write_json(&dir.join(format!("{}.manifest.json", manifest.command)), &manifest)
}

// ---- pretrain -----------------------------------------------------------------

fn cmd_pretrain(
    cfg: &RunConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<()> {
    let registry = build_registry(cfg)?;
    let plan = plan_pretrain(&registry, &cfg.optimizer, cfg.seed)?;

    let mut manifest = Manifest::new("pretrain", cfg.clone());
    let mut state: TrainState = match resume_from {
        Some(path) => {
            manifest
                .inputs
                .insert("resume_state".into(), file_hash(path)?);
            manifest
                .input_paths
                .insert("resume_state".into(), path.display().to_string());
            checkpoint::load_train_state(path)?
        }
        None => init_state(&registry, &cfg.model, plan.vocab.clone(), cfg.seed)?,
    };

    let until = stop_at.unwrap_or(cfg.optimizer.total_steps);
    if let Some(s) = stop_at {
        manifest.args.insert("stop_at".into(), s.to_string());
    }
    if until > cfg.optimizer.total_steps {
        return Err(Error::contract(format!(
            "stop_at {until} exceeds total_steps {}",
            cfg.optimizer.total_steps
        )));
    }
    let mut log: Vec<TrainLogRecord> = Vec::new();
    run_steps(
        &mut state,
        &registry,
        &plan.corpus,
        &plan.batches,
        &cfg.optimizer,
        until,
        &mut log,
    )?;

    std::fs::create_dir_all(out_dir)?;
    checkpoint::save_train_state(&out_dir.join("train_state.ckpt"), &state)?;
    write_jsonl(&out_dir.join("train_log.jsonl"), &log)?;
    let mut outputs = vec!["train_state.ckpt", "train_log.jsonl"];
    if state.step >= cfg.optimizer.total_steps {
        checkpoint::save_backbone(&out_dir.join("backbone.ckpt"), &state.backbone, Some(cfg))?;
        checkpoint::save_bank(
            &out_dir.join("bank.ckpt"),
            &state.bank,
            state.backbone.config(),
            state.backbone.content_hash(),
        )?;
        outputs.push("backbone.ckpt");
        outputs.push("bank.ckpt");
    }
    finish_manifest(manifest, out_dir, &outputs, None)
}

// ---- tune ---------------------------------------------------------------------

fn load_pair(backbone: &Path, bank: &Path) -> Result<(ParameterStore, PrefixBank, ContentHash)> {
    let store: ParameterStore = checkpoint::load_backbone(backbone)?;
    let hash = store.content_hash();
    let (bank, _) = checkpoint::load_bank(bank, Some(hash))?;
    Ok((store, bank, hash))
}

fn steps_for_k(cfg: &RunConfig, k: usize) -> u64 {
    cfg.bench
        .k_settings
        .iter()
        .find(|ks| ks.k == k)
        .map(|ks| ks.steps)
        .unwrap_or(cfg.tune.steps)
}

#[allow(clippy::too_many_arguments)]
fn cmd_tune(
    cfg: &RunConfig,
    out_dir: &Path,
    backbone_path: &Path,
    bank_path: &Path,
    task: &str,
    k: Option<usize>,
    set_index: usize,
) -> Result<()> {
    let (backbone, bank, bh) = load_pair(backbone_path, bank_path)?;
    let data = find_task(cfg, task)?;
    let k = k.unwrap_or(cfg.tune.k);

    let mut shot_sets = sample_shot_sets(&data.train_pool, k, cfg.bench.num_sets, cfg.seed)?;
    if set_index >= shot_sets.len() {
        return Err(Error::data(format!(
            "set_index {set_index} out of {} sampled sets",
            shot_sets.len()
        )));
    }
    let shots = shot_sets.remove(set_index);

    // same sub-seed a bench cell with these coordinates would use
    let seed = derive_seed(
        cfg.seed,
        &[
            "cell",
            task,
            &k.to_string(),
            &cfg.tune.init.to_string(),
            &set_index.to_string(),
        ],
    );
    let tune_cfg = fewsum::tune::TuneConfig {
        k,
        steps: steps_for_k(cfg, k),
        seed,
        ..cfg.tune.clone()
    };
    let init = init_prefix(&cfg.tune.init, &bank, backbone.config(), task, seed)?;
    let before = backbone.content_hash();
    let outcome = prefix_tune(&backbone, init, &shots, &data.train_pool, &tune_cfg)?;
    debug_assert_eq!(backbone.content_hash(), before);

    std::fs::create_dir_all(out_dir)?;
    checkpoint::save_prefix(
        &out_dir.join("tuned_prefix.ckpt"),
        &outcome.prefix,
        backbone.config(),
        bh,
    )?;
    #[derive(Serialize)]
    struct CurvePoint {
        step: u64,
        loss: f64,
    }
    let curve: Vec<CurvePoint> = outcome
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, &loss)| CurvePoint {
            step: i as u64,
            loss,
        })
        .collect();
    write_jsonl(&out_dir.join("loss_curve.jsonl"), &curve)?;
    write_json(&out_dir.join("shot_set.json"), &shots)?;

    let mut manifest = Manifest::new("tune", cfg.clone());
    manifest.inputs.insert("backbone".into(), bh.to_hex());
    manifest
        .inputs
        .insert("bank".into(), file_hash(bank_path)?);
    manifest
        .input_paths
        .insert("backbone".into(), backbone_path.display().to_string());
    manifest
        .input_paths
        .insert("bank".into(), bank_path.display().to_string());
    manifest.args.insert("task".into(), task.to_string());
    manifest.args.insert("k".into(), k.to_string());
    manifest
        .args
        .insert("set_index".into(), set_index.to_string());
    finish_manifest(
        manifest,
        out_dir,
        &["tuned_prefix.ckpt", "loss_curve.jsonl", "shot_set.json"],
        None,
    )
}

// ---- generate -------------------------------------------------------------------

#[derive(Deserialize)]
struct GenInput {
    id: String,
    document: String,
    #[serde(default)]
    query: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    id: String,
    prediction: String,
}

fn cmd_generate(
    cfg: &RunConfig,
    out_dir: &Path,
    backbone_path: &Path,
    prefix_path: &Path,
    input: &Path,
) -> Result<()> {
    let backbone: ParameterStore = checkpoint::load_backbone(backbone_path)?;
    let bh = backbone.content_hash();
    let (prefix, _) = checkpoint::load_prefix(prefix_path, Some(bh))?;

    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", input.display())))?;
    let vocab = backbone.vocab();
    let mut predictions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenInput = serde_json::from_str(line).map_err(|e| {
            Error::data(format!(
                "{} line {}: malformed record: {e}",
                input.display(),
                lineno + 1
            ))
        })?;
        let mut src = Vec::new();
        if let Some(q) = &rec.query {
            src.extend(vocab.encode(q));
            src.push(SEP);
        }
        src.extend(vocab.encode(&rec.document));
        let ids = generate(&backbone, &prefix, &src, cfg.bench.decode, cfg.bench.max_gen_len)?;
        predictions.push(Prediction {
            id: rec.id,
            prediction: vocab.decode(&ids),
        });
    }

    std::fs::create_dir_all(out_dir)?;
    write_jsonl(&out_dir.join("predictions.jsonl"), &predictions)?;

    let mut manifest = Manifest::new("generate", cfg.clone());
    manifest.inputs.insert("backbone".into(), bh.to_hex());
    manifest.inputs.insert("prefix".into(), file_hash(prefix_path)?);
    manifest.inputs.insert("input".into(), file_hash(input)?);
    for (role, p) in [
        ("backbone", backbone_path),
        ("prefix", prefix_path),
        ("input", input),
    ] {
        manifest
            .input_paths
            .insert(role.into(), p.display().to_string());
    }
    finish_manifest(manifest, out_dir, &["predictions.jsonl"], None)
}

// ---- score ----------------------------------------------------------------------

#[derive(Serialize)]
struct ExampleScore {
    id: String,
    rouge: RougeScore,
}

#[derive(Serialize)]
struct ScoreFile {
    per_example: Vec<ExampleScore>,
    mean: RougeScore,
}

fn cmd_score(
    cfg: &RunConfig,
    out_dir: &Path,
    predictions: &Path,
    references: &Path,
) -> Result<()> {
    // predictions: {id, prediction} records; a dataset file also works,
    // with its first summary standing in as the prediction
    #[derive(Deserialize)]
    struct AnyPred {
        id: String,
        #[serde(default)]
        prediction: Option<String>,
        #[serde(default)]
        summary: Option<serde_json::Value>,
    }
    let text = std::fs::read_to_string(predictions)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", predictions.display())))?;
    let mut preds: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnyPred = serde_json::from_str(line).map_err(|e| {
            Error::data(format!(
                "{} line {}: malformed record: {e}",
                predictions.display(),
                lineno + 1
            ))
        })?;
        let value = match (rec.prediction, rec.summary) {
            (Some(p), _) => p,
            (None, Some(serde_json::Value::String(s))) => s,
            (None, Some(serde_json::Value::Array(a))) => a
                .first()
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            _ => {
                return Err(Error::data(format!(
                    "{} line {}: record has neither prediction nor summary",
                    predictions.display(),
                    lineno + 1
                )))
            }
        };
        if preds.insert(rec.id.clone(), value).is_some() {
            return Err(Error::data(format!("duplicate prediction id {}", rec.id)));
        }
    }

    let refs = load_jsonl(references, "refs", Split::Test)?;
    let mut per_example = Vec::new();
    let mut scores = Vec::new();
    for ex in &refs.examples {
        let pred = preds
            .get(&ex.id)
            .ok_or_else(|| Error::data(format!("no prediction for reference id {}", ex.id)))?;
        let rouge = score_multi(&ex.summaries, pred)?;
        scores.push(rouge);
        per_example.push(ExampleScore {
            id: ex.id.clone(),
            rouge,
        });
    }
    let mean = mean_rouge(&scores);
    println!(
        "scored {} examples: R1 {:.4}  R2 {:.4}  RL {:.4}",
        per_example.len(),
        mean.r1.f1,
        mean.r2.f1,
        mean.rl.f1
    );

    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("scores.json"), &ScoreFile { per_example, mean })?;

    let mut manifest = Manifest::new("score", cfg.clone());
    manifest
        .inputs
        .insert("predictions".into(), file_hash(predictions)?);
    manifest
        .inputs
        .insert("references".into(), file_hash(references)?);
    manifest
        .input_paths
        .insert("predictions".into(), predictions.display().to_string());
    manifest
        .input_paths
        .insert("references".into(), references.display().to_string());
    finish_manifest(manifest, out_dir, &["scores.json"], None)
}

// ---- bench ----------------------------------------------------------------------

fn cmd_bench(cfg: &RunConfig, out_dir: &Path, backbone_path: &Path, bank_path: &Path) -> Result<()> {
    let (backbone, bank, bh) = load_pair(backbone_path, bank_path)?;
    let tasks: Vec<TaskData> = cfg
        .held_out_tasks()
        .map(materialize_task)
        .collect::<Result<_>>()?;
    if tasks.is_empty() {
        return Err(Error::data("no held-out tasks declared for benchmarking"));
    }

    let mut embedded = Manifest::new("bench", cfg.clone());
    embedded.inputs.insert("backbone".into(), bh.to_hex());
    embedded.inputs.insert("bank".into(), file_hash(bank_path)?);
    embedded
        .input_paths
        .insert("backbone".into(), backbone_path.display().to_string());
    embedded
        .input_paths
        .insert("bank".into(), bank_path.display().to_string());

    let report = run_benchmark(
        &backbone,
        &bank,
        &tasks,
        &cfg.bench,
        &cfg.tune,
        embedded.clone(),
        cfg.seed,
    )?;

    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    let tables = format!(
        "{}\n{}",
        report.render_mean_table(),
        report.render_std_table()
    );
    checkpoint::atomic_write(&out_dir.join("tables.txt"), tables.as_bytes())?;
    println!("{tables}");

    finish_manifest(embedded, out_dir, &["report.json", "tables.txt"], None)
}

// ---- sample-shots ------------------------------------------------------------------

fn cmd_sample_shots(cfg: &RunConfig, out_dir: &Path, task: &str, k: Option<usize>) -> Result<()> {
    let data = find_task(cfg, task)?;
    let ks: Vec<usize> = match k {
        Some(k) => vec![k],
        None => cfg.bench.k_settings.iter().map(|s| s.k).collect(),
    };
    let mut all = BTreeMap::new();
    for k in ks {
        let sets = sample_shot_sets(&data.train_pool, k, cfg.bench.num_sets, cfg.seed)?;
        all.insert(k.to_string(), sets);
    }
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("shot_sets.json"), &all)?;

    let mut manifest = Manifest::new("sample-shots", cfg.clone());
    manifest.args.insert("task".into(), task.to_string());
    finish_manifest(manifest, out_dir, &["shot_sets.json"], None)
}

// ---- replay ---------------------------------------------------------------------

fn cmd_replay(manifest_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let cfg = manifest.run_config.clone();
    let path_of = |role: &str| -> Result<PathBuf> {
        manifest
            .input_paths
            .get(role)
            .map(PathBuf::from)
            .ok_or_else(|| Error::data(format!("manifest lacks an input path for {role}")))
    };
    let arg_of = |name: &str| -> Option<&String> { manifest.args.get(name) };

    match manifest.command.as_str() {
        "pretrain" => {
            let stop_at = arg_of("stop_at").and_then(|s| s.parse().ok());
            let resume = manifest.input_paths.get("resume_state").map(PathBuf::from);
            cmd_pretrain(&cfg, out_dir, resume.as_deref(), stop_at)?;
        }
        "tune" => {
            let task = arg_of("task")
                .ok_or_else(|| Error::data("tune manifest lacks a task"))?
                .clone();
            let k = arg_of("k").and_then(|s| s.parse().ok());
            let set_index = arg_of("set_index")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            cmd_tune(
                &cfg,
                out_dir,
                &path_of("backbone")?,
                &path_of("bank")?,
                &task,
                k,
                set_index,
            )?;
        }
        "generate" => {
            cmd_generate(
                &cfg,
                out_dir,
                &path_of("backbone")?,
                &path_of("prefix")?,
                &path_of("input")?,
            )?;
        }
        "score" => {
            cmd_score(
                &cfg,
                out_dir,
                &path_of("predictions")?,
                &path_of("references")?,
            )?;
        }
        "bench" => {
            cmd_bench(&cfg, out_dir, &path_of("backbone")?, &path_of("bank")?)?;
        }
        "sample-shots" => {
            let task = arg_of("task")
                .ok_or_else(|| Error::data("sample-shots manifest lacks a task"))?
                .clone();
            cmd_sample_shots(&cfg, out_dir, &task, None)?;
        }
        other => return Err(Error::data(format!("cannot replay command {other}"))),
    }

    let mut failures = Vec::new();
    for (name, expected) in &manifest.outputs {
        let replayed = file_hash(&out_dir.join(name))?;
        let status = if &replayed == expected { "PASS" } else { "FAIL" };
        println!("replay {name}: {status}");
        if &replayed != expected {
            failures.push(name.clone());
        }
    }
    if failures.is_empty() {
        println!("replay: all {} artifacts reproduced", manifest.outputs.len());
        Ok(())
    } else {
        Err(Error::data(format!(
            "replay diverged on: {}",
            failures.join(", ")
        )))
    }
}
