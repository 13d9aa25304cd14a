//! Batch command-line driver: `hrt train|eval|bench|dump-attention`.
//!
//! Every command resolves a `RunConfig` (JSON file + `--seed` + `--override`
//! dotted-key patches), writes its artifacts under `--out`, and finishes
//! with a `run.json` provenance record containing the resolved config and a
//! SHA-256 of every artifact. Exit codes: 0 success, 1 config/input error,
//! 2 divergence, 3 gated-check failure.

use clap::{Args, Parser, Subcommand};
use hrt_core::attention::{AttentionScope, CrossDirection, ForwardCtx};
use hrt_core::bench::{
    ablation_csv, ablation_grid, flat_doubling_rho, nes_comparison, nes_csv, scaling_experiment,
};
use hrt_core::checkpoint;
use hrt_core::config::HrtConfig;
use hrt_core::model::{param_count, HrtModel};
use hrt_core::pyramid::length_schedule;
use hrt_core::tasks::{corpus_splits, gen_batch, synthetic_corpus, TaskKind, TaskSpec};
use hrt_core::tensor::{no_grad, Tensor};
use hrt_core::training::{evaluate, train, TrainOptions};
use hrt_core::{HrtError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hrt", about = "Hierarchical Resolution Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config ({"model": ..., "task": ..., "training": ...}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides both model.seed and training.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key config patches, e.g. --override training.steps=100.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 8)]
        batches: usize,
    },
    /// Run the scaling experiment and optional training grids.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024, 2048, 4096, 8192])]
        n_list: Vec<usize>,
        /// Largest n at which the forward is actually run for peak/wall
        /// measurement; larger n get analytic FLOPs only.
        #[arg(long, default_value_t = 4096)]
        measure_max: usize,
        /// Also train the ablation grid (uses the config's task/training).
        #[arg(long)]
        ablation: bool,
        /// Also train HRT vs flat baseline and emit NES rows.
        #[arg(long)]
        nes: bool,
    },
    /// Dump attention maps and pyramid snapshots from a checkpoint.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Explicit input: raw text for char-level tasks, whitespace-
        /// separated token ids otherwise. Defaults to one task sample.
        #[arg(long)]
        text: Option<String>,
    },
}

/// The resolved contents of a run config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: HrtConfig,
    #[serde(default)]
    task: TaskSpec,
    #[serde(default)]
    training: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: HrtConfig::default(),
            task: TaskSpec::default(),
            training: TrainOptions::default(),
        }
    }
}

/// Applies one `a.b.c=value` patch to the raw config JSON. Every path
/// segment must already exist, so typos are rejected loudly.
fn apply_override(root: &mut Value, patch: &str) -> Result<()> {
    let (key, raw) = patch
        .split_once('=')
        .ok_or_else(|| HrtError::Config(format!("override '{patch}' is not KEY=VALUE")))?;
    let mut cur = &mut *root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HrtError::Config(format!("override key '{key}': '{seg}' is not an object")))?;
        if !obj.contains_key(*seg) {
            return Err(HrtError::Config(format!(
                "override key '{key}': unknown key '{seg}'"
            )));
        }
        cur = obj.get_mut(*seg).unwrap();
        if i + 1 == segments.len() {
            *cur = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
        }
    }
    Ok(())
}

fn resolve_config(common: &Common, required: bool) -> Result<(RunConfig, Value)> {
    let mut raw = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                HrtError::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            let file_cfg: RunConfig = serde_json::from_str(&text)?;
            serde_json::to_value(&file_cfg)?
        }
        None if required => {
            return Err(HrtError::Config("--config is required for this command".into()))
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    if let Some(seed) = common.seed {
        apply_override(&mut raw, &format!("model.seed={seed}"))?;
        apply_override(&mut raw, &format!("training.seed={seed}"))?;
    }
    for patch in &common.overrides {
        apply_override(&mut raw, patch)?;
    }
    let cfg: RunConfig = serde_json::from_value(raw.clone())?;
    cfg.model.validate()?;
    cfg.task.validate()?;
    Ok((cfg, raw))
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects artifacts as they are written and hashes them for run.json.
struct RunLog {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunLog {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(RunLog {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.artifacts.insert(name.to_string(), sha_hex(contents));
        Ok(())
    }

    /// Registers a file written by someone else (e.g. checkpoint::save).
    fn register(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.artifacts.insert(name.to_string(), sha_hex(&bytes));
        Ok(())
    }

    fn finish(&mut self, command: &str, resolved: &Value, seed: Option<u64>) -> Result<()> {
        let run = json!({
            "command": command,
            "seed": seed,
            "config": resolved,
            "artifacts": self.artifacts,
        });
        std::fs::write(
            self.dir.join("run.json"),
            serde_json::to_string_pretty(&run)?,
        )?;
        Ok(())
    }
}

/// Corpus bytes for char-level tasks: `HRT_CORPUS` if set, else the
/// deterministic synthetic corpus. Non-char tasks need none.
fn load_corpus(kind: TaskKind) -> Result<Option<Vec<u8>>> {
    if kind != TaskKind::CharLm {
        return Ok(None);
    }
    match std::env::var_os("HRT_CORPUS") {
        Some(path) => Ok(Some(std::fs::read(&path).map_err(|e| {
            HrtError::Config(format!("cannot read HRT_CORPUS {}: {e}", path.to_string_lossy()))
        })?)),
        None => Ok(Some(synthetic_corpus(1 << 16))),
    }
}

fn split_slice<'a>(corpus: &'a [u8], split: &str) -> Result<&'a [u8]> {
    let (tr, va, te) = corpus_splits(corpus);
    match split {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(HrtError::Input(format!(
            "unknown split '{other}' (expected train|val|test)"
        ))),
    }
}

fn cmd_train(common: &Common) -> Result<i32> {
    let (cfg, raw) = resolve_config(common, true)?;
    let mut log = RunLog::new(&common.out)?;
    let corpus = load_corpus(cfg.task.kind)?;
    let train_corpus = match &corpus {
        Some(c) => Some(split_slice(c, "train")?),
        None => None,
    };
    let mut model = HrtModel::init(&cfg.model)?;
    let report = train(&mut model, &cfg.task, train_corpus, &cfg.training)?;
    checkpoint::save(&model, &log.dir.join("checkpoint.hrt"))?;
    log.register("checkpoint.hrt")?;
    log.write("train_report.csv", report.to_csv().as_bytes())?;
    let final_train_loss = report.steps.last().map(|s| s.total_loss);
    let summary = json!({
        "param_count": param_count(&cfg.model)?,
        "steps_run": report.steps.len(),
        "final_train_loss": final_train_loss,
        "best_val_loss": report.best_val_loss,
        "best_step": report.best_step,
        "stopped_early": report.stopped_early,
        "final_accuracy": report.final_accuracy,
    });
    log.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    log.finish("train", &raw, common.seed)?;
    println!(
        "trained {} steps; final accuracy {:?}",
        report.steps.len(),
        report.final_accuracy
    );
    Ok(0)
}

/// Names every top-level model-config field that differs between the
/// requested config and the checkpoint's embedded one.
fn config_mismatches(requested: &HrtConfig, loaded: &HrtConfig) -> Result<Vec<String>> {
    let a = serde_json::to_value(requested)?;
    let b = serde_json::to_value(loaded)?;
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    Ok(a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect())
}

fn cmd_eval(common: &Common, ckpt: &Path, split: &str, batches: usize) -> Result<i32> {
    let (cfg, raw) = resolve_config(common, true)?;
    let model = checkpoint::load(ckpt)?;
    let mismatched = config_mismatches(&cfg.model, &model.config)?;
    if !mismatched.is_empty() {
        return Err(HrtError::Config(format!(
            "checkpoint config mismatch in fields: {}",
            mismatched.join(", ")
        )));
    }
    let mut log = RunLog::new(&common.out)?;
    let corpus = load_corpus(cfg.task.kind)?;
    let eval_corpus = match &corpus {
        Some(c) => Some(split_slice(c, split)?),
        None => None,
    };
    // Distinct base seeds keep the eval splits disjoint from each other
    // (and the val-seed namespace keeps them disjoint from training).
    let base = match split {
        "train" => cfg.training.seed,
        "val" => cfg.training.seed ^ 0xE7A1,
        _ => cfg.training.seed ^ 0x7e57,
    };
    let (loss, accuracy) = evaluate(&model, &cfg.task, eval_corpus, base, batches)?;
    let metrics = json!({
        "task": cfg.task.kind,
        "split": split,
        "batches": batches,
        "loss": loss,
        "accuracy": accuracy,
        "pseudo_perplexity": loss.exp(),
    });
    log.write("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    log.finish("eval", &raw, common.seed)?;
    println!("{split} loss {loss:.6} accuracy {accuracy:.4}");
    Ok(0)
}

fn cmd_bench(
    common: &Common,
    n_list: &[usize],
    measure_max: usize,
    ablation: bool,
    nes_flag: bool,
) -> Result<i32> {
    let (cfg, raw) = resolve_config(common, false)?;
    let mut log = RunLog::new(&common.out)?;
    let (curve, capacity_failures) = scaling_experiment(n_list, measure_max)?;
    log.write("scaling.csv", curve.to_csv().as_bytes())?;

    // Gated checks: HRT doubling ratio at the large-n points, and the flat
    // baseline exactly quadratic at fixed architecture, per the headline
    // complexity claim.
    let rho_hrt = curve.rho("hrt");
    let mut rho_flat: Vec<(usize, f64)> = Vec::new();
    let mut gate_failures: Vec<Value> = Vec::new();
    for &(low_n, r) in &rho_hrt {
        let n = 2 * low_n;
        if n >= 1024 && r > 2.5 {
            gate_failures.push(json!({"model": "hrt", "n": n, "rho": r, "limit": 2.5}));
        }
        let rf = flat_doubling_rho(low_n)?;
        rho_flat.push((low_n, rf));
        if rf != 4.0 {
            gate_failures.push(json!({"model": "flat", "n": n, "rho": rf, "limit": 4.0}));
        }
    }
    let crossover = n_list.iter().copied().find(|&n| {
        match (curve.row(n, "hrt"), curve.row(n, "flat")) {
            (Some(h), Some(f)) => h.total_flops < f.total_flops,
            _ => false,
        }
    });

    if ablation {
        let corpus = load_corpus(cfg.task.kind)?;
        let rows = ablation_grid(&cfg.model, &cfg.task, &cfg.training, corpus.as_deref())?;
        log.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
    }
    if nes_flag {
        let corpus = load_corpus(cfg.task.kind)?;
        let rows = nes_comparison(&cfg.model, &cfg.task, &cfg.training, corpus.as_deref())?;
        log.write("nes.csv", nes_csv(&rows).as_bytes())?;
    }

    let ok = gate_failures.is_empty() && capacity_failures.is_empty();
    let summary = json!({
        "n_list": n_list,
        "measure_max": measure_max,
        "rho_hrt": rho_hrt.iter().map(|&(n, r)| json!({"n": 2 * n, "rho": r})).collect::<Vec<_>>(),
        "rho_flat": rho_flat.iter().map(|&(n, r)| json!({"n": 2 * n, "rho": r})).collect::<Vec<_>>(),
        "gate_failures": gate_failures,
        "capacity_failures": capacity_failures,
        "crossover_n": crossover,
        "passed": ok,
    });
    log.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    log.finish("bench", &raw, common.seed)?;
    if ok {
        println!("bench passed; crossover at n = {crossover:?}");
        Ok(0)
    } else {
        eprintln!("bench gated checks failed; see summary.json");
        Ok(3)
    }
}

fn tokenize_input(text: &str, cfg: &RunConfig) -> Result<Vec<usize>> {
    let vocab = cfg.model.vocab_size;
    let ids: Vec<usize> = if cfg.task.kind == TaskKind::CharLm {
        text.bytes().map(|b| b as usize).collect()
    } else {
        text.split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| HrtError::Input(format!("token '{t}' is not an integer id")))
            })
            .collect::<Result<_>>()?
    };
    if ids.is_empty() {
        return Err(HrtError::Input("input text produced no tokens".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(HrtError::Input(format!(
            "token id {bad} out of range for vocab {vocab}"
        )));
    }
    Ok(ids)
}

fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|c| m.get(r, c).to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn cmd_dump_attention(common: &Common, ckpt: &Path, text: Option<&str>) -> Result<i32> {
    let model = checkpoint::load(ckpt)?;
    let (cfg, raw) = match &common.config {
        Some(_) => {
            let (cfg, raw) = resolve_config(common, true)?;
            let mismatched = config_mismatches(&cfg.model, &model.config)?;
            if !mismatched.is_empty() {
                return Err(HrtError::Config(format!(
                    "checkpoint config mismatch in fields: {}",
                    mismatched.join(", ")
                )));
            }
            (cfg, raw)
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.model = model.config.clone();
            let raw = serde_json::to_value(&cfg)?;
            (cfg, raw)
        }
    };
    let mut log = RunLog::new(&common.out)?;
    let seed = common.seed.unwrap_or(cfg.training.seed);

    let tokens = match text {
        Some(t) => tokenize_input(t, &cfg)?,
        None => {
            let mut spec = cfg.task.clone();
            spec.batch_size = 1;
            let corpus = load_corpus(spec.kind)?;
            gen_batch(&spec, seed, corpus.as_deref())?.tokens.remove(0)
        }
    };

    let levels = model.config.levels;
    let (padded, lengths) = length_schedule(tokens.len(), levels, model.config.max_len)?;
    let _ = padded;
    let mut ctx = ForwardCtx::recording(ChaCha20Rng::seed_from_u64(seed));
    let out = no_grad(|| model.forward(&[tokens.clone()], &mut ctx))?;
    let records = ctx.recorder.take().unwrap_or_default();

    // Assemble chunked records into one dense map per scope.
    let mut maps: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut self_files = Vec::new();
    let mut cross_files = Vec::new();
    for rec in &records {
        let (name, q_len, k_len) = match rec.scope {
            AttentionScope::SelfLevel { level } => (
                format!("self_l{level}_h{}.csv", rec.head),
                lengths[level - 1],
                lengths[level - 1],
            ),
            AttentionScope::Cross { fine, direction, .. } => {
                let (q, k) = match direction {
                    CrossDirection::BottomUp => (lengths[fine], lengths[fine - 1]),
                    CrossDirection::TopDown => (lengths[fine - 1], lengths[fine]),
                };
                (
                    format!("cross_t{fine}_{}.csv", direction.name()),
                    q,
                    k,
                )
            }
        };
        let map = maps
            .entry(name)
            .or_insert_with(|| Tensor::zeros(q_len, k_len));
        for r in 0..rec.weights.rows() {
            for c in 0..rec.weights.cols() {
                map.set(rec.query_offset + r, rec.key_offset + c, rec.weights.get(r, c));
            }
        }
    }
    for (name, map) in &maps {
        log.write(name, matrix_csv(map).as_bytes())?;
        if name.starts_with("self_") {
            self_files.push(name.clone());
        } else {
            cross_files.push(name.clone());
        }
    }

    let mut pyramid_files = Vec::new();
    for (i, level) in out.pyramids[0].levels.iter().enumerate() {
        let name = format!("pyramid_l{}.csv", i + 1);
        log.write(&name, matrix_csv(level.repr.value()).as_bytes())?;
        pyramid_files.push(name);
    }

    let manifest = json!({
        "input_tokens": tokens,
        "lengths": lengths,
        "self_maps": self_files,
        "cross_maps": cross_files,
        "pyramids": pyramid_files,
    });
    log.write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    log.finish("dump-attention", &raw, common.seed)?;
    println!(
        "wrote {} self maps, {} cross maps, {} pyramid snapshots",
        self_files.len(),
        cross_files.len(),
        pyramid_files.len()
    );
    Ok(0)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Cmd::Train { common } => cmd_train(common),
        Cmd::Eval {
            common,
            checkpoint,
            split,
            batches,
        } => cmd_eval(common, checkpoint, split, *batches),
        Cmd::Bench {
            common,
            n_list,
            measure_max,
            ablation,
            nes,
        } => cmd_bench(common, n_list, *measure_max, *ablation, *nes),
        Cmd::DumpAttention {
            common,
            checkpoint,
            text,
        } => cmd_dump_attention(common, checkpoint, text.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(HrtError::Divergence(msg)) => {
            eprintln!("divergence: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
