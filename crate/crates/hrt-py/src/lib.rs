//! Python bindings for the HRT core: model construction, forward passes,
//! training, checkpointing, task generation, and the analytic cost model.
//!
//! Structured configs cross the boundary as JSON strings (the same schema
//! the CLI uses); numeric results come back as plain Python lists/dicts.

use hrt_core::attention::ForwardCtx;
use hrt_core::bench;
use hrt_core::checkpoint;
use hrt_core::config::HrtConfig;
use hrt_core::model::{self, HrtModel};
use hrt_core::tasks::{self, TaskSpec, Targets};
use hrt_core::tensor::{no_grad, Tensor};
use hrt_core::training::{self, TrainOptions};
use hrt_core::HrtError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn err(e: HrtError) -> PyErr {
    match e {
        HrtError::Config(_) | HrtError::Input(_) | HrtError::Dim(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn jerr(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("json error: {e}"))
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| (0..t.cols()).map(|c| t.get(r, c)).collect())
        .collect()
}

fn parse_config(config_json: &str) -> PyResult<HrtConfig> {
    let cfg: HrtConfig = serde_json::from_str(config_json).map_err(jerr)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// A Hierarchical Resolution Transformer instance.
#[pyclass(unsendable, name = "Model")]
struct PyModel {
    inner: HrtModel,
}

#[pymethods]
impl PyModel {
    /// Builds a model (identity-at-init scheme) from an HrtConfig JSON.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = parse_config(config_json)?;
        Ok(PyModel {
            inner: HrtModel::init(&cfg).map_err(err)?,
        })
    }

    /// The canonical default config as JSON, for tweaking from Python.
    #[staticmethod]
    fn default_config() -> PyResult<String> {
        serde_json::to_string_pretty(&HrtConfig::default()).map_err(jerr)
    }

    fn config(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.config).map_err(jerr)
    }

    fn param_count(&self) -> PyResult<usize> {
        model::param_count(&self.inner.config).map_err(err)
    }

    /// Runs one deterministic no-grad forward over a batch of token-id
    /// sequences. Returns (pooled_logits, token_logits, recon_loss).
    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        tokens: Vec<Vec<usize>>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64)> {
        let out = no_grad(|| {
            let mut ctx = ForwardCtx::new(ChaCha20Rng::seed_from_u64(0), false);
            self.inner.forward(&tokens, &mut ctx)
        })
        .map_err(err)?;
        let pooled = to_rows(out.pooled.value());
        let logits = out.token_logits.iter().map(|v| to_rows(v.value())).collect();
        Ok((pooled, logits, out.recon_loss.value().item()))
    }

    /// Trains in place on a synthetic task; returns the TrainReport as JSON.
    #[pyo3(signature = (task_json, training_json, corpus=None))]
    fn train(
        &mut self,
        task_json: &str,
        training_json: &str,
        corpus: Option<Vec<u8>>,
    ) -> PyResult<String> {
        let spec: TaskSpec = serde_json::from_str(task_json).map_err(jerr)?;
        spec.validate().map_err(err)?;
        let opts: TrainOptions = serde_json::from_str(training_json).map_err(jerr)?;
        let report = training::train(&mut self.inner, &spec, corpus.as_deref(), &opts)
            .map_err(err)?;
        serde_json::to_string(&report).map_err(jerr)
    }

    /// Mean (loss, accuracy) over held-out batches.
    #[pyo3(signature = (task_json, seed, batches, corpus=None))]
    fn evaluate(
        &self,
        task_json: &str,
        seed: u64,
        batches: usize,
        corpus: Option<Vec<u8>>,
    ) -> PyResult<(f64, f64)> {
        let spec: TaskSpec = serde_json::from_str(task_json).map_err(jerr)?;
        spec.validate().map_err(err)?;
        training::evaluate(&self.inner, &spec, corpus.as_deref(), seed, batches).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(err)?,
        })
    }
}

/// Closed-form FLOP counts for one forward at sequence length n, keyed as
/// "category@level", plus "total" and "attention" rollups.
#[pyfunction]
fn analytic_cost(config_json: &str, n: usize) -> PyResult<BTreeMap<String, u64>> {
    let cfg = parse_config(config_json)?;
    let ledger = bench::analytic_cost(&cfg, n).map_err(err)?;
    let mut out: BTreeMap<String, u64> = ledger
        .entries()
        .filter(|(_, _, v)| *v > 0)
        .map(|(c, l, v)| (format!("{}@{}", c.name(), l), v))
        .collect();
    out.insert("total".into(), ledger.modeled_total());
    out.insert("attention".into(), ledger.attention_total());
    Ok(out)
}

/// Parameter count implied by a config, without building the model.
#[pyfunction]
fn param_count(config_json: &str) -> PyResult<usize> {
    model::param_count(&parse_config(config_json)?).map_err(err)
}

/// The param-matched single-level baseline config for an HRT config.
#[pyfunction]
fn flat_baseline_config(config_json: &str) -> PyResult<String> {
    let flat = model::flat_baseline_config(&parse_config(config_json)?).map_err(err)?;
    serde_json::to_string_pretty(&flat).map_err(jerr)
}

/// Generates one deterministic task batch: (tokens, targets_json).
#[pyfunction]
#[pyo3(signature = (task_json, seed, corpus=None))]
fn gen_batch(
    task_json: &str,
    seed: u64,
    corpus: Option<Vec<u8>>,
) -> PyResult<(Vec<Vec<usize>>, String)> {
    let spec: TaskSpec = serde_json::from_str(task_json).map_err(jerr)?;
    spec.validate().map_err(err)?;
    let batch = tasks::gen_batch(&spec, seed, corpus.as_deref()).map_err(err)?;
    let targets = match &batch.targets {
        Targets::Labels(labels) => serde_json::json!({"labels": labels}),
        Targets::Tokens { targets, loss_mask } => {
            serde_json::json!({"targets": targets, "loss_mask": loss_mask})
        }
    };
    Ok((batch.tokens, targets.to_string()))
}

/// Normalized efficiency score: accuracy per GFLOP.
#[pyfunction]
fn nes(accuracy: f64, cost_flops: u64) -> PyResult<f64> {
    bench::nes(accuracy, cost_flops).map_err(err)
}

/// The deterministic built-in corpus used when HRT_CORPUS is unset.
#[pyfunction]
fn synthetic_corpus(target_bytes: usize) -> Vec<u8> {
    tasks::synthetic_corpus(target_bytes)
}

#[pymodule]
fn hrt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(analytic_cost, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(flat_baseline_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_batch, m)?)?;
    m.add_function(wrap_pyfunction!(nes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}
