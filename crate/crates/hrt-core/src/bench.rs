//! Cost accounting and scaling experiments: the closed-form FLOP model, the
//! O(n log n) scaling curves against the param-matched flat baseline, the
//! normalized efficiency score, and the ablation grid.
//!
//! `analytic_cost` replays the forward pass's matmul schedule symbolically
//! and must agree with the instrumented ledger *exactly*, per (category,
//! level). Elementwise work (softmax, norms, activations) lands in
//! `Category::Other` at run time and is excluded from the closed form by
//! definition.

use crate::attention::ForwardCtx;
use crate::config::{HrtConfig, ReadoutKind, ReductionKind};
use crate::error::{HrtError, Result};
use crate::ledger::{Category, CostLedger, LedgerScope};
use crate::model::{flat_baseline_config, param_count, HrtModel};
use crate::pyramid::length_schedule;
use crate::tasks::TaskSpec;
use crate::tensor::{no_grad, peak_floats, reset_peak};
use crate::training::{evaluate, train, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::cell::RefCell;
use std::rc::Rc;

/// Chunk lengths used by chunk-local attention over a sequence.
fn chunk_lengths(len: usize, attn_chunk: usize) -> Vec<usize> {
    let w = if attn_chunk == 0 || attn_chunk >= len {
        len
    } else {
        attn_chunk
    };
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let c = w.min(len - start);
        out.push(c);
        start += c;
    }
    out
}

/// Closed-form FLOP ledger for one batch-size-1 forward pass over a fully
/// valid sequence of `n` tokens (`n` a multiple of `2^(L-1)`). Mirrors the
/// instrumented forward's matmul schedule term by term.
pub fn analytic_cost(config: &HrtConfig, n: usize) -> Result<CostLedger> {
    config.validate()?;
    let levels = config.levels;
    let stride = 1usize << (levels - 1);
    if n == 0 || n % stride != 0 {
        return Err(HrtError::Input(format!(
            "analytic_cost: n={n} must be a positive multiple of 2^(L-1)={stride}"
        )));
    }
    let mut ledger = CostLedger::new();
    let lengths: Vec<usize> = (0..levels).map(|l| n >> l).collect();
    let d1 = config.dims[0];
    let vocab = config.vocab_size;

    for l in 0..levels {
        let (s, d) = (lengths[l], config.dims[l]);
        let lv = l + 1;
        // RTB stack: projections 8 s d^2, then chunked score+mix 2 d c^2
        // each per chunk, then FFN 16 s d^2; per block.
        let chunk_sq: usize = chunk_lengths(s, config.attn_chunk)
            .iter()
            .map(|&c| c * c)
            .sum();
        let per_block = [
            (Category::Projections, 8 * s * d * d),
            (Category::AttnScores, 2 * d * chunk_sq),
            (Category::AttnMix, 2 * d * chunk_sq),
            (Category::Ffn, 16 * s * d * d),
        ];
        for (cat, f) in per_block {
            ledger.add(cat, lv, (config.blocks_per_level * f) as u64);
        }

        if l + 1 < levels {
            let (f, c) = (config.dims[l], config.dims[l + 1]);
            let (sf, sc) = (lengths[l], lengths[l + 1]);
            let in_dim = match config.reduction {
                ReductionKind::LinearStrided => 2 * f,
                _ => f,
            };
            ledger.add(Category::Reduction, lv, (2 * sc * in_dim * c) as u64);

            if config.cross_resolution {
                let a = f.min(c);
                let mut cross = 0usize;
                // Bottom-up: Q from coarse, K/V from fine, out to coarse.
                cross += 2 * sc * c * a + 2 * (2 * sf * f * a);
                // Top-down: Q from fine, K/V from coarse, out to fine.
                cross += 2 * sf * f * a + 2 * (2 * sc * c * a);
                // Chunk-aligned score/mix/out-projection in both directions.
                let w_f = if config.attn_chunk == 0 || config.attn_chunk >= sf {
                    sf
                } else {
                    config.attn_chunk
                };
                let mut start = 0;
                while start < sf {
                    let end = (start + w_f).min(sf);
                    let cf = end - start; // fine chunk
                    let cc = end * sc / sf - start * sc / sf; // coarse chunk
                    // up: coarse queries x fine keys; down: the transpose.
                    cross += 2 * (2 * cc * cf * a); // scores both directions
                    cross += 2 * (2 * cc * cf * a); // mix both directions
                    cross += 2 * cc * a * c; // up output projection
                    cross += 2 * cf * a * f; // down output projection
                    start = end;
                }
                // Per-position gates: [upd; orig] w, one logit per row.
                cross += 2 * sc * (2 * c) + 2 * sf * (2 * f);
                ledger.add(Category::CrossRes, lv, cross as u64);
            }
        }
    }

    // Reconstruction cascade, coarsest transition first.
    if levels > 1 {
        for fine_idx in (0..levels - 1).rev() {
            let (f, c) = (config.dims[fine_idx], config.dims[fine_idx + 1]);
            let sc = lengths[fine_idx + 1];
            let mut rec = 2 * sc * c * f; // width map
            if config.reduction == ReductionKind::Wavelet {
                rec += 2 * sc * f * f; // detail map
            }
            ledger.add(Category::Reconstruction, fine_idx + 1, rec as u64);
        }
    }

    // Heads and readout pooling (level 0 in the ledger).
    let mut head = 2 * n * d1 * vocab; // lm head over the reconstruction
    match config.readout {
        ReadoutKind::Coarsest => {
            head += 2 * lengths[levels - 1] * config.dims[levels - 1];
            head += 2 * config.dims[levels - 1] * vocab;
        }
        ReadoutKind::ConcatAll => {
            for l in 0..levels {
                head += 2 * lengths[l] * config.dims[l];
            }
            head += 2 * config.dims.iter().sum::<usize>() * vocab;
        }
    }
    ledger.add(Category::Projections, 0, head as u64);
    Ok(ledger)
}

/// True when two ledgers agree on every modeled (category, level) cell;
/// `Other` is ignored.
pub fn modeled_entries_equal(a: &CostLedger, b: &CostLedger) -> bool {
    let cells = |l: &CostLedger| -> Vec<(Category, usize, u64)> {
        l.entries()
            .filter(|(c, _, v)| *c != Category::Other && *v > 0)
            .collect()
    };
    cells(a) == cells(b)
}

/// Runs one instrumented no-grad forward over a full-length random token
/// sequence; returns (ledger, peak live floats, wall milliseconds).
pub fn instrumented_forward(config: &HrtConfig, n: usize) -> Result<(CostLedger, u64, f64)> {
    let model = HrtModel::init(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(1234);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let ledger = Rc::new(RefCell::new(CostLedger::new()));
    reset_peak();
    let start = std::time::Instant::now();
    {
        let _scope = LedgerScope::new(ledger.clone());
        no_grad(|| {
            let mut ctx = ForwardCtx::new(ChaCha20Rng::seed_from_u64(0), false);
            model.forward(&[tokens], &mut ctx)
        })?;
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let peak = peak_floats();
    let ledger = Rc::try_unwrap(ledger).unwrap().into_inner();
    Ok((ledger, peak, wall_ms))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub tag: String,
    pub params: usize,
    pub attn_flops: u64,
    pub total_flops: u64,
    /// Measured only up to the measurement cutoff (analytic rows carry None).
    pub peak_floats: Option<u64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingCurve {
    pub rows: Vec<ScalingRow>,
}

impl ScalingCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,model,params,attn_flops,total_flops,peak_floats,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n,
                r.tag,
                r.params,
                r.attn_flops,
                r.total_flops,
                r.peak_floats.map_or(String::new(), |v| v.to_string()),
                r.wall_ms.map_or(String::new(), |v| format!("{v:.3}")),
            ));
        }
        s
    }

    /// Attention-FLOP doubling ratios rho(n) = cost(2n)/cost(n) for one tag,
    /// over consecutive n pairs present in the curve.
    pub fn rho(&self, tag: &str) -> Vec<(usize, f64)> {
        let mut pts: Vec<(usize, u64)> = self
            .rows
            .iter()
            .filter(|r| r.tag == tag)
            .map(|r| (r.n, r.attn_flops))
            .collect();
        pts.sort_unstable();
        let mut out = Vec::new();
        for w in pts.windows(2) {
            if w[1].0 == 2 * w[0].0 {
                out.push((w[0].0, w[1].1 as f64 / w[0].1 as f64));
            }
        }
        out
    }

    pub fn row(&self, n: usize, tag: &str) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.n == n && r.tag == tag)
    }
}

/// The HRT config family used by the scaling experiment: fine width 16,
/// level count growing as log2(n) - 2, widths doubling up to the 4*d1 cap.
pub fn scaling_hrt_config(n: usize) -> Result<HrtConfig> {
    if !n.is_power_of_two() || n < 32 {
        return Err(HrtError::Config(format!(
            "scaling config needs a power-of-two n >= 32, got {n}"
        )));
    }
    let levels = (n.ilog2() as usize) - 2;
    let cfg = HrtConfig {
        vocab_size: 32,
        max_len: n,
        levels,
        dims: HrtConfig::default_dims(16, levels),
        heads: 4,
        blocks_per_level: 1,
        dropout: 0.0,
        seed: 17,
        ..HrtConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Forward-only scaling measurement. FLOPs come from the analytic model for
/// every n (verified elsewhere to equal the instrumented ledger); peak live
/// floats and wall time are measured by running the forward for n up to
/// `measure_max`. Capacity failures skip that n's rows and are reported
/// alongside the partial curve instead of aborting the sweep.
pub fn scaling_experiment(
    n_list: &[usize],
    measure_max: usize,
) -> Result<(ScalingCurve, Vec<String>)> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in n_list {
        match scaling_rows_at(n, measure_max) {
            Ok(mut pair) => rows.append(&mut pair),
            Err(HrtError::Capacity(msg)) => failures.push(format!("n={n}: {msg}")),
            Err(e) => return Err(e),
        }
    }
    Ok((ScalingCurve { rows }, failures))
}

fn scaling_rows_at(n: usize, measure_max: usize) -> Result<Vec<ScalingRow>> {
    let hrt = scaling_hrt_config(n)?;
    let flat = flat_baseline_config(&hrt)?;
    let mut rows = Vec::new();
    for (tag, cfg) in [("hrt", &hrt), ("flat", &flat)] {
        let analytic = analytic_cost(cfg, n)?;
        let (peak, wall) = if n <= measure_max {
            let (ledger, peak, wall) = instrumented_forward(cfg, n)?;
            if !modeled_entries_equal(&ledger, &analytic) {
                return Err(HrtError::Internal(format!(
                    "analytic/instrumented divergence for {tag} at n={n}"
                )));
            }
            (Some(peak), Some(wall))
        } else {
            (None, None)
        };
        rows.push(ScalingRow {
            n,
            tag: tag.into(),
            params: param_count(cfg)?,
            attn_flops: analytic.attention_total(),
            total_flops: analytic.modeled_total(),
            peak_floats: peak,
            wall_ms: wall,
        });
    }
    Ok(rows)
}

/// Doubling ratio of the flat baseline's attention FLOPs at fixed
/// architecture: the param-matched flat config for sequence length `n`,
/// evaluated at n and 2n. Full attention makes this exactly 4.
pub fn flat_doubling_rho(n: usize) -> Result<f64> {
    let flat = flat_baseline_config(&scaling_hrt_config(n)?)?;
    let lo = analytic_cost(&flat, n)?.attention_total();
    let hi = analytic_cost(&flat, 2 * n)?.attention_total();
    Ok(hi as f64 / lo as f64)
}

/// Normalized efficiency score: accuracy per GFLOP.
pub fn nes(accuracy: f64, cost_flops: u64) -> Result<f64> {
    if cost_flops == 0 {
        return Err(HrtError::Input("nes: cost must be positive".into()));
    }
    Ok(accuracy / (cost_flops as f64 / 1e9))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: Option<f64>,
    pub total_flops: u64,
    pub peak_floats: u64,
    pub params: usize,
    /// Set when the variant diverged; the grid keeps going.
    pub error: Option<String>,
}

/// The six architecture-ablation variants.
pub fn ablation_variants(base: &HrtConfig) -> Vec<(String, HrtConfig)> {
    let mut out = Vec::new();
    out.push(("full_hrt".to_string(), base.clone()));
    let mut v = base.clone();
    v.cross_resolution = false;
    out.push(("no_cross_resolution".to_string(), v));
    let mut v = base.clone();
    v.reduction = ReductionKind::AvgPool;
    out.push(("pooling_reduction".to_string(), v));
    let mut v = base.clone();
    v.dims = vec![base.dims[0]; base.levels];
    v.shared_scale_modules = true;
    out.push(("shared_scale_modules".to_string(), v));
    let mut v = base.clone();
    v.levels = 1;
    v.dims = vec![base.dims[0]];
    v.cross_resolution = false;
    v.attn_chunk = 0;
    v.lambda_recon = 0.0;
    out.push(("only_fine_scale".to_string(), v));
    let mut v = base.clone();
    v.reduction = ReductionKind::LinearStrided;
    out.push(("linear_reduction".to_string(), v));
    out
}

/// Trains each variant under identical seeds and budget, then reports
/// accuracy and measured cost. A diverging variant becomes a failed row.
pub fn ablation_grid(
    base: &HrtConfig,
    spec: &TaskSpec,
    opts: &TrainOptions,
    corpus: Option<&[u8]>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let params = param_count(&cfg)?;
        let (n, _) = length_schedule(spec.seq_len, cfg.levels, cfg.max_len)?;
        let cost = analytic_cost(&cfg, n)?;
        let (_, peak, _) = instrumented_forward(&cfg, n)?;
        let mut model = HrtModel::init(&cfg)?;
        match train(&mut model, spec, corpus, opts) {
            Ok(report) => rows.push(AblationRow {
                variant: name,
                accuracy: report.final_accuracy,
                total_flops: cost.modeled_total(),
                peak_floats: peak,
                params,
                error: None,
            }),
            Err(HrtError::Divergence(msg)) => rows.push(AblationRow {
                variant: name,
                accuracy: None,
                total_flops: cost.modeled_total(),
                peak_floats: peak,
                params,
                error: Some(msg),
            }),
            Err(other) => return Err(other),
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,accuracy,total_flops,peak_floats,params,error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.accuracy.map_or(String::new(), |a| format!("{a:.4}")),
            r.total_flops,
            r.peak_floats,
            r.params,
            r.error.as_deref().unwrap_or(""),
        ));
    }
    s
}

/// NES comparison of HRT against its flat baseline on one task at one
/// sequence length, using a shared evaluation protocol.
#[derive(Debug, Clone, Serialize)]
pub struct NesRow {
    pub tag: String,
    pub accuracy: f64,
    pub total_flops: u64,
    pub nes: f64,
}

pub fn nes_comparison(
    hrt_cfg: &HrtConfig,
    spec: &TaskSpec,
    opts: &TrainOptions,
    corpus: Option<&[u8]>,
) -> Result<Vec<NesRow>> {
    let flat_cfg = flat_baseline_config(hrt_cfg)?;
    let mut rows = Vec::new();
    for (tag, cfg) in [("hrt", hrt_cfg), ("flat", &flat_cfg)] {
        let mut model = HrtModel::init(cfg)?;
        train(&mut model, spec, corpus, opts)?;
        let (_, acc) = evaluate(&model, spec, corpus, opts.seed, opts.eval_batches)?;
        let (n, _) = length_schedule(spec.seq_len, cfg.levels, cfg.max_len)?;
        let flops = analytic_cost(cfg, n)?.modeled_total();
        rows.push(NesRow {
            tag: tag.into(),
            accuracy: acc,
            total_flops: flops,
            nes: nes(acc, flops)?,
        });
    }
    Ok(rows)
}

pub fn nes_csv(rows: &[NesRow]) -> String {
    let mut s = String::from("model,accuracy,total_flops,nes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{},{:.6}\n",
            r.tag, r.accuracy, r.total_flops, r.nes
        ));
    }
    s
}
