//! Acceptance criteria 1-10, one test per criterion. Each prints a single
//! `criterion N (...): PASS|FAIL` line (visible with `--nocapture`).

use hrt_core::attention::{attention_weights, scale_bias, AttentionScope, ForwardCtx};
use hrt_core::bench::{
    analytic_cost, flat_doubling_rho, instrumented_forward, modeled_entries_equal,
    scaling_hrt_config,
};
use hrt_core::config::{HrtConfig, ReadoutKind, ReductionKind};
use hrt_core::ledger::{Category, CostLedger, LedgerScope};
use hrt_core::model::{flat_baseline_config, HrtModel};
use hrt_core::pyramid::{
    length_schedule, reconstruct, reduce, LevelState, ReconstructionParams, ReductionParams,
    ResolutionPyramid,
};
use hrt_core::tasks::{
    eval_listops, gen_batch, hier_parity_oracle, TaskKind, TaskSpec, Targets, LO_DIGIT0,
};
use hrt_core::tensor::{grad_check, no_grad, Tensor, Var};
use hrt_core::training::{train, TrainOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::cell::RefCell;
use std::rc::Rc;

fn criterion(n: u32, desc: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("criterion {n} ({desc}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({desc}): FAIL - {msg}");
            panic!("criterion {n} failed: {msg}");
        }
    }
}

fn ctx() -> ForwardCtx {
    ForwardCtx::new(ChaCha20Rng::seed_from_u64(0), false)
}

fn micro_config() -> HrtConfig {
    HrtConfig {
        vocab_size: 11,
        max_len: 16,
        levels: 3,
        dims: vec![4, 8, 8],
        heads: 2,
        blocks_per_level: 1,
        dropout: 0.0,
        seed: 7,
        ..HrtConfig::default()
    }
}

#[test]
fn criterion_01_gradient_correctness() {
    criterion(1, "gradient correctness", || {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Tensor::uniform(3, 4, 1.0, &mut rng);
        let w = Tensor::uniform(4, 5, 1.0, &mut rng);
        let wv = Var::constant(w);
        let primitives: Vec<(&str, f64)> = vec![
            (
                "matmul",
                grad_check(|v| v.matmul(&wv)?.sum(), &x, 1e-6).map_err(|e| e.to_string())?,
            ),
            (
                "softmax",
                grad_check(|v| v.softmax_rows()?.mul(&v.clone())?.sum(), &x, 1e-6)
                    .map_err(|e| e.to_string())?,
            ),
            (
                "log_softmax",
                grad_check(|v| v.log_softmax_rows()?.sum(), &x, 1e-6)
                    .map_err(|e| e.to_string())?,
            ),
            (
                "layer_norm",
                grad_check(
                    |v| {
                        let g = Var::constant(Tensor::from_vec(1, 4, vec![1.1, 0.9, 1.0, 1.2]));
                        let b = Var::constant(Tensor::zeros(1, 4));
                        v.layer_norm(&g, &b, 1e-5)?.mul(&v.clone())?.sum()
                    },
                    &x,
                    1e-6,
                )
                .map_err(|e| e.to_string())?,
            ),
            (
                "gelu",
                grad_check(|v| v.gelu()?.sum(), &x, 1e-6).map_err(|e| e.to_string())?,
            ),
            (
                "attention",
                grad_check(
                    |v| {
                        let k = Var::constant(Tensor::uniform(
                            5,
                            4,
                            1.0,
                            &mut ChaCha20Rng::seed_from_u64(2),
                        ));
                        attention_weights(v, &k, None, &[true, true, false, true, true])?.sum()
                    },
                    &x,
                    1e-6,
                )
                .map_err(|e| e.to_string())?,
            ),
        ];
        for (name, err) in &primitives {
            if *err >= 1e-6 {
                return Err(format!("primitive {name} rel error {err}"));
            }
        }

        // End-to-end micro model (vocab 11, n=8, L=3) wrt the embedding.
        let cfg = micro_config();
        let model = HrtModel::init_random(&cfg).map_err(|e| e.to_string())?;
        let emb0 = model.embedding.value().clone();
        let err = grad_check(
            |emb| {
                let m = HrtModel {
                    embedding: emb.clone(),
                    ..HrtModel::init_random(&cfg)?
                };
                let out = m.forward(&[vec![1, 2, 3, 4, 5, 6, 7, 8]], &mut ctx())?;
                let task = out.pooled.log_softmax_rows()?.sum()?;
                let tok = out.token_logits[0].log_softmax_rows()?.sum()?;
                task.add(&tok)?.add(&out.recon_loss.scale(0.1)?)
            },
            &emb0,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        if err >= 1e-4 {
            return Err(format!("end-to-end rel error {err}"));
        }
        Ok(())
    });
}

#[test]
fn criterion_02_pyramid_law() {
    criterion(2, "pyramid halving law", || {
        let (n, lengths) = length_schedule(128, 5, 16384).map_err(|e| e.to_string())?;
        if n != 128 || lengths != vec![128, 64, 32, 16, 8] {
            return Err(format!("L=5 n=128 gave {lengths:?}"));
        }
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(&(1usize..4000, 1usize..8), |(n_raw, levels)| {
                let (padded, lengths) = length_schedule(n_raw, levels, 1 << 20).unwrap();
                let stride = 1usize << (levels - 1);
                // Pad rule: smallest multiple of 2^(L-1) that fits n_raw.
                prop_assert!(padded >= n_raw && padded % stride == 0);
                prop_assert!(padded - n_raw < stride);
                // Halving law, exact at every transition.
                prop_assert_eq!(lengths.len(), levels);
                prop_assert_eq!(lengths[0], padded);
                for l in 0..levels - 1 {
                    prop_assert_eq!(lengths[l + 1] * 2, lengths[l]);
                }
                Ok(())
            })
            .map_err(|e| e.to_string())?;
        Ok(())
    });
}

#[test]
fn criterion_03_perfect_reconstruction() {
    criterion(3, "perfect Haar reconstruction", || {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for (n, d, depth) in [(8usize, 3usize, 2usize), (16, 5, 3), (64, 2, 4)] {
            let x = Tensor::uniform(n, d, 1.0, &mut rng);
            let mut levels = vec![LevelState::new(Var::constant(x.clone()), vec![true; n])];
            for l in 0..depth {
                let params = ReductionParams {
                    proj: Var::constant(Tensor::eye(d)),
                };
                let next = reduce(&levels[l], l, ReductionKind::Wavelet, &params)
                    .map_err(|e| e.to_string())?;
                levels.push(next);
            }
            let pyramid = ResolutionPyramid { levels };
            let params = ReconstructionParams {
                up_projs: (0..depth).map(|_| Var::constant(Tensor::eye(d))).collect(),
                detail_projs: (0..depth).map(|_| Var::constant(Tensor::eye(d))).collect(),
            };
            let rec = reconstruct(&pyramid, &params).map_err(|e| e.to_string())?;
            for (got, want) in rec.value().as_slice().iter().zip(x.as_slice()) {
                if (got - want).abs() >= 1e-10 {
                    return Err(format!("n={n} d={d}: {got} vs {want}"));
                }
            }
        }
        Ok(())
    });
}

/// Per-level validity masks implied by a raw length: padding is invalid at
/// the fine level, and a coarse slot is valid iff either child is.
fn level_masks(raw_len: usize, padded: usize, levels: usize) -> Vec<Vec<bool>> {
    let mut masks = vec![(0..padded).map(|i| i < raw_len).collect::<Vec<bool>>()];
    for _ in 1..levels {
        let prev = masks.last().unwrap();
        masks.push(
            (0..prev.len() / 2)
                .map(|i| prev[2 * i] || prev[2 * i + 1])
                .collect(),
        );
    }
    masks
}

#[test]
fn criterion_04_attention_stochasticity() {
    criterion(4, "attention rows stochastic, masked keys zero", || {
        let cfg = HrtConfig {
            vocab_size: 17,
            max_len: 32,
            levels: 3,
            dims: vec![8, 8, 16],
            heads: 2,
            blocks_per_level: 2,
            dropout: 0.0,
            attn_chunk: 4,
            seed: 4,
            ..HrtConfig::default()
        };
        let model = HrtModel::init_random(&cfg).map_err(|e| e.to_string())?;
        let raw_len = 13; // pads to 16, so every level sees masked keys
        let tokens: Vec<usize> = (0..raw_len).map(|i| (i * 5 + 1) % 17).collect();
        let mut fctx = ForwardCtx::recording(ChaCha20Rng::seed_from_u64(0));
        no_grad(|| model.forward(&[tokens], &mut fctx)).map_err(|e| e.to_string())?;
        let records = fctx.recorder.take().unwrap();
        if records.is_empty() {
            return Err("no attention records".into());
        }
        let (padded, _) = length_schedule(raw_len, 3, 32).map_err(|e| e.to_string())?;
        let masks = level_masks(raw_len, padded, 3);
        for rec in &records {
            let key_mask: &[bool] = match rec.scope {
                AttentionScope::SelfLevel { level } => &masks[level - 1],
                AttentionScope::Cross { fine, coarse, direction } => match direction {
                    hrt_core::attention::CrossDirection::BottomUp => &masks[fine - 1],
                    hrt_core::attention::CrossDirection::TopDown => &masks[coarse - 1],
                },
            };
            let w = &rec.weights;
            for r in 0..w.rows() {
                let sum: f64 = (0..w.cols()).map(|c| w.get(r, c)).sum();
                if (sum - 1.0).abs() >= 1e-6 {
                    return Err(format!("{:?} row {r} sums to {sum}", rec.scope));
                }
                for c in 0..w.cols() {
                    if !key_mask[rec.key_offset + c] && w.get(r, c).abs() >= 1e-9 {
                        return Err(format!(
                            "{:?} masked key {} got weight {}",
                            rec.scope,
                            rec.key_offset + c,
                            w.get(r, c)
                        ));
                    }
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_05_complexity_scaling() {
    criterion(5, "O(n log n) attention scaling", || {
        let attn = |n: usize| -> Result<f64, String> {
            let cfg = scaling_hrt_config(n).map_err(|e| e.to_string())?;
            Ok(analytic_cost(&cfg, n)
                .map_err(|e| e.to_string())?
                .attention_total() as f64)
        };
        for n in [1024usize, 2048, 4096] {
            let rho = attn(n)? / attn(n / 2)?;
            if rho > 2.5 {
                return Err(format!("hrt rho({n}) = {rho} > 2.5"));
            }
            let flat_rho = flat_doubling_rho(n / 2).map_err(|e| e.to_string())?;
            if flat_rho != 4.0 {
                return Err(format!("flat rho({n}) = {flat_rho} != 4"));
            }
        }

        // Analytic model equals the instrumented ledger exactly, per
        // (category, level), on 5 random configs.
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for trial in 0..5 {
            let levels = rng.random_range(1..=4);
            let cfg = HrtConfig {
                vocab_size: rng.random_range(8..24),
                max_len: 64,
                levels,
                dims: HrtConfig::default_dims([4, 8][rng.random_range(0..2)], levels),
                heads: 2,
                blocks_per_level: rng.random_range(1..=2),
                reduction: [
                    ReductionKind::Wavelet,
                    ReductionKind::AvgPool,
                    ReductionKind::LinearStrided,
                ][rng.random_range(0..3)],
                cross_resolution: rng.random_range(0..2) == 0,
                readout: [ReadoutKind::Coarsest, ReadoutKind::ConcatAll]
                    [rng.random_range(0..2)],
                attn_chunk: [0usize, 8][rng.random_range(0..2)],
                dropout: 0.0,
                seed: trial,
                ..HrtConfig::default()
            };
            let stride = 1usize << (levels - 1);
            let n = rng.random_range(2..=(64 / stride)) * stride;
            let analytic = analytic_cost(&cfg, n).map_err(|e| e.to_string())?;
            let (instr, _, _) = instrumented_forward(&cfg, n).map_err(|e| e.to_string())?;
            if !modeled_entries_equal(&instr, &analytic) {
                return Err(format!("trial {trial}: ledgers differ (cfg {cfg:?}, n={n})"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_06_memory_analog() {
    criterion(6, "peak memory <= 0.6x flat at n=4096", || {
        let n = 4096;
        let hrt = scaling_hrt_config(n).map_err(|e| e.to_string())?;
        let flat = flat_baseline_config(&hrt).map_err(|e| e.to_string())?;
        let (_, hrt_peak, _) = instrumented_forward(&hrt, n).map_err(|e| e.to_string())?;
        let (_, flat_peak, _) = instrumented_forward(&flat, n).map_err(|e| e.to_string())?;
        let ratio = hrt_peak as f64 / flat_peak as f64;
        if ratio > 0.6 {
            return Err(format!(
                "peak ratio {ratio:.3} (hrt {hrt_peak} vs flat {flat_peak})"
            ));
        }
        Ok(())
    });
}

fn copy_setup() -> (HrtConfig, TaskSpec, TrainOptions) {
    let cfg = HrtConfig {
        vocab_size: 12,
        max_len: 16,
        levels: 2,
        dims: vec![16, 32],
        heads: 4,
        blocks_per_level: 1,
        dropout: 0.0,
        attn_chunk: 0,
        lambda_recon: 0.1,
        seed: 42,
        ..HrtConfig::default()
    };
    let spec = TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 12,
        seq_len: 8,
        batch_size: 16,
        ..TaskSpec::default()
    };
    let opts = TrainOptions {
        steps: 2000,
        peak_lr: 3e-3,
        warmup_steps: 100,
        eval_every: 100,
        patience: 20,
        eval_batches: 4,
        seed: 42,
    };
    (cfg, spec, opts)
}

fn hier_setup(cross: bool, steps: u64) -> (HrtConfig, TaskSpec, TrainOptions) {
    let cfg = HrtConfig {
        vocab_size: 2,
        max_len: 16,
        levels: 2,
        dims: vec![16, 32],
        heads: 4,
        blocks_per_level: 2,
        dropout: 0.0,
        attn_chunk: 0,
        lambda_recon: 0.0,
        readout: ReadoutKind::ConcatAll,
        cross_resolution: cross,
        seed: 42,
        ..HrtConfig::default()
    };
    let spec = TaskSpec {
        kind: TaskKind::HierParity,
        seq_len: 15,
        block_size: 5,
        num_blocks: 3,
        batch_size: 32,
        ..TaskSpec::default()
    };
    let opts = TrainOptions {
        steps,
        peak_lr: 3e-3,
        warmup_steps: 100,
        eval_every: 200,
        patience: 1000,
        eval_batches: 8,
        seed: 42,
    };
    (cfg, spec, opts)
}

#[test]
fn criterion_07_learning_sanity() {
    criterion(7, "learning sanity on three tasks", || {
        // Copy: >= 99% token accuracy within 2k steps.
        let (cfg, spec, opts) = copy_setup();
        let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
        let report = train(&mut model, &spec, None, &opts).map_err(|e| e.to_string())?;
        let acc = report.final_accuracy.unwrap_or(0.0);
        if acc < 0.99 {
            return Err(format!("copy accuracy {acc}"));
        }

        // hier_parity: >= 90% with cross-resolution enabled.
        let (cfg, spec, opts) = hier_setup(true, 2000);
        let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
        let report = train(&mut model, &spec, None, &opts).map_err(|e| e.to_string())?;
        let acc = report.final_accuracy.unwrap_or(0.0);
        if acc < 0.90 {
            return Err(format!("hier_parity accuracy {acc}"));
        }

        // char_lm: reconstruction loss at the best checkpoint halves.
        let cfg = HrtConfig {
            vocab_size: 257,
            max_len: 32,
            levels: 3,
            dims: vec![16, 32, 32],
            heads: 4,
            blocks_per_level: 1,
            dropout: 0.0,
            attn_chunk: 0,
            lambda_recon: 0.1,
            seed: 42,
            ..HrtConfig::default()
        };
        let spec = TaskSpec {
            kind: TaskKind::CharLm,
            seq_len: 32,
            batch_size: 8,
            mask_fraction: 0.15,
            ..TaskSpec::default()
        };
        let opts = TrainOptions {
            steps: 500,
            peak_lr: 1e-3,
            warmup_steps: 50,
            eval_every: 100,
            patience: 30,
            eval_batches: 2,
            seed: 42,
        };
        let corpus = hrt_core::tasks::synthetic_corpus(1 << 15);
        let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
        let report = train(&mut model, &spec, Some(&corpus), &opts).map_err(|e| e.to_string())?;
        let initial = report.steps.first().map(|s| s.recon_loss).unwrap_or(0.0);
        let best_step = report.best_step.unwrap_or(opts.steps - 1) as usize;
        let at_best = report.steps[best_step.min(report.steps.len() - 1)].recon_loss;
        if at_best > 0.5 * initial {
            return Err(format!("recon {at_best} vs initial {initial}"));
        }
        Ok(())
    });
}

#[test]
fn criterion_08_ablation_direction() {
    criterion(8, "cross-resolution helps hier_parity", || {
        // Identical seeds and budget, cross-resolution on vs off.
        let mut accs = Vec::new();
        for cross in [true, false] {
            let (cfg, spec, opts) = hier_setup(cross, 2000);
            let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
            let report = train(&mut model, &spec, None, &opts).map_err(|e| e.to_string())?;
            accs.push(report.final_accuracy.unwrap_or(0.0));
        }
        if accs[0] < accs[1] {
            return Err(format!("full {} < no-cross {}", accs[0], accs[1]));
        }

        // Disabled exchange is a pyramid-only model: zero cross-resolution
        // FLOPs, no cross records, bit-identical repeat forwards.
        let (cfg, _, _) = hier_setup(false, 0);
        let model = HrtModel::init_random(&cfg).map_err(|e| e.to_string())?;
        let tokens: Vec<usize> = (0..15).map(|i| i % 2).collect();
        let ledger = Rc::new(RefCell::new(CostLedger::new()));
        let out1 = {
            let _scope = LedgerScope::new(ledger.clone());
            let mut fctx = ForwardCtx::recording(ChaCha20Rng::seed_from_u64(0));
            let out = no_grad(|| model.forward(&[tokens.clone()], &mut fctx))
                .map_err(|e| e.to_string())?;
            let records = fctx.recorder.take().unwrap();
            if records
                .iter()
                .any(|r| matches!(r.scope, AttentionScope::Cross { .. }))
            {
                return Err("cross records with cross_resolution=false".into());
            }
            out
        };
        let cross_flops: u64 = (0..=cfg.levels)
            .map(|l| ledger.borrow().get(Category::CrossRes, l))
            .sum();
        if cross_flops != 0 {
            return Err(format!("{cross_flops} CrossRes flops with cross disabled"));
        }
        let out2 = no_grad(|| model.forward(&[tokens], &mut ctx())).map_err(|e| e.to_string())?;
        let a = out1.pooled.value().as_slice();
        let b = out2.pooled.value().as_slice();
        if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err("repeat forwards not bit-identical".into());
        }
        Ok(())
    });
}

#[test]
fn criterion_09_determinism_and_provenance() {
    criterion(9, "determinism and checkpoint round trip", || {
        let (cfg, spec, mut opts) = copy_setup();
        opts.steps = 30;
        opts.eval_every = 10;
        let mut reports = Vec::new();
        let mut final_params = Vec::new();
        for _ in 0..2 {
            let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
            reports.push(train(&mut model, &spec, None, &opts).map_err(|e| e.to_string())?);
            final_params.push(
                model
                    .params()
                    .iter()
                    .map(|p| p.var.value().clone())
                    .collect::<Vec<Tensor>>(),
            );
        }
        if reports[0] != reports[1] {
            return Err("identical runs produced different reports".into());
        }
        for (a, b) in final_params[0].iter().zip(&final_params[1]) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                if x.to_bits() != y.to_bits() {
                    return Err("identical runs produced different parameters".into());
                }
            }
        }

        // Save/load is bit-exact.
        let mut model = HrtModel::init(&cfg).map_err(|e| e.to_string())?;
        train(&mut model, &spec, None, &opts).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("m.hrt");
        hrt_core::checkpoint::save(&model, &path).map_err(|e| e.to_string())?;
        let loaded = hrt_core::checkpoint::load(&path).map_err(|e| e.to_string())?;
        for (a, b) in model.params().iter().zip(loaded.params().iter()) {
            if a.name != b.name {
                return Err(format!("param order differs: {} vs {}", a.name, b.name));
            }
            for (x, y) in a.var.value().as_slice().iter().zip(b.var.value().as_slice()) {
                if x.to_bits() != y.to_bits() {
                    return Err(format!("param {} not bit-exact after round trip", a.name));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_10_oracle_equivalence() {
    criterion(10, "task and attention oracles", || {
        // 10^4 listops samples vs the token-parser evaluator.
        let spec = TaskSpec {
            kind: TaskKind::ListopsMini,
            seq_len: 64,
            listops_depth: 3,
            batch_size: 100,
            ..TaskSpec::default()
        };
        for seed in 0..100u64 {
            let batch = gen_batch(&spec, seed, None).map_err(|e| e.to_string())?;
            let Targets::Labels(labels) = &batch.targets else {
                return Err("listops targets not labels".into());
            };
            for (seq, &label) in batch.tokens.iter().zip(labels) {
                let v = eval_listops(seq).map_err(|e| e.to_string())?;
                if LO_DIGIT0 + v as usize != label {
                    return Err(format!("listops mismatch at seed {seed}"));
                }
            }
        }

        // 10^4 hier_parity samples vs the brute-force oracle.
        let spec = TaskSpec {
            kind: TaskKind::HierParity,
            seq_len: 20,
            block_size: 5,
            num_blocks: 4,
            batch_size: 100,
            ..TaskSpec::default()
        };
        for seed in 0..100u64 {
            let batch = gen_batch(&spec, seed, None).map_err(|e| e.to_string())?;
            let Targets::Labels(labels) = &batch.targets else {
                return Err("hier_parity targets not labels".into());
            };
            for (bits, &label) in batch.tokens.iter().zip(labels) {
                if hier_parity_oracle(bits, 5) != label {
                    return Err(format!("hier_parity mismatch at seed {seed}"));
                }
            }
        }

        // Attention vs a direct-loop softmax oracle, to 1e-10.
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for trial in 0..20 {
            let (m, p, d) = (
                rng.random_range(1..6),
                rng.random_range(2..7),
                rng.random_range(1..5),
            );
            let q = Tensor::uniform(m, d, 1.0, &mut rng);
            let k = Tensor::uniform(p, d, 1.0, &mut rng);
            let slope = rng.random_range(0.0..1.0);
            let mut mask = vec![true; p];
            if p > 1 {
                mask[rng.random_range(0..p)] = false;
            }
            let bias = scale_bias(
                &Var::constant(Tensor::from_vec(1, 1, vec![slope])),
                m,
                p,
                3,
                0,
            )
            .map_err(|e| e.to_string())?;
            let got = attention_weights(
                &Var::constant(q.clone()),
                &Var::constant(k.clone()),
                Some(&bias),
                &mask,
            )
            .map_err(|e| e.to_string())?;
            for i in 0..m {
                // scores_ij = q_i . k_j / sqrt(d) - slope * |(3 + i) - j|
                let mut exps = vec![0.0f64; p];
                let mut denom = 0.0;
                let mut maxs = f64::NEG_INFINITY;
                let mut scores = vec![0.0f64; p];
                for j in 0..p {
                    if !mask[j] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += q.get(i, t) * k.get(j, t);
                    }
                    scores[j] = dot / (d as f64).sqrt()
                        - slope * ((3 + i) as f64 - j as f64).abs();
                    maxs = maxs.max(scores[j]);
                }
                for j in 0..p {
                    if mask[j] {
                        exps[j] = (scores[j] - maxs).exp();
                        denom += exps[j];
                    }
                }
                for j in 0..p {
                    let want = if mask[j] { exps[j] / denom } else { 0.0 };
                    let have = got.value().get(i, j);
                    if (have - want).abs() >= 1e-10 {
                        return Err(format!(
                            "trial {trial}: weight[{i}][{j}] {have} vs oracle {want}"
                        ));
                    }
                }
            }
        }
        Ok(())
    });
}
