//! Loss assembly, AdamW, learning-rate schedule, gradient clipping, and the
//! training loop: linear warmup into cosine decay, periodic evaluation with
//! best-checkpoint retention and early stopping, and a divergence guard.

use crate::attention::ForwardCtx;
use crate::error::{HrtError, Result};
use crate::model::{ForwardOutput, HrtModel};
use crate::tasks::{gen_batch, TaskBatch, TaskSpec, Targets};
use crate::tensor::{no_grad, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct OptimState {
    /// First/second moment buffers, one per parameter in declaration order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
}

impl OptimState {
    pub fn new(model: &HrtModel, peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.var.shape()).collect();
        OptimState {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            peak_lr,
            warmup_steps,
            total_steps,
            clip_norm: 1.0,
        }
    }
}

/// Linear 0 -> peak over the warmup, then cosine peak -> 0 over the rest.
pub fn lr_at(step: u64, state: &OptimState) -> f64 {
    if state.warmup_steps > 0 && step < state.warmup_steps {
        return state.peak_lr * step as f64 / state.warmup_steps as f64;
    }
    if state.total_steps <= state.warmup_steps {
        return state.peak_lr;
    }
    let t = (step - state.warmup_steps) as f64 / (state.total_steps - state.warmup_steps) as f64;
    let t = t.clamp(0.0, 1.0);
    state.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global L2 clipping over all gradients jointly. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.as_slice() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.as_mut_slice() {
                *x *= s;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay AdamW step with bias correction. Gradients
/// must be in declaration order; non-finite entries abort with the
/// offending parameter's name. Distance-bias slopes are clamped to >= 0
/// after the update.
pub fn adamw_step(
    model: &mut HrtModel,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let params = model.params();
    if grads.len() != params.len() {
        return Err(HrtError::Internal(format!(
            "adamw_step: {} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut updated = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        if !grads[i].all_finite() {
            return Err(HrtError::Divergence(format!(
                "non-finite gradient for parameter {:?} at step {}",
                p.name, state.step
            )));
        }
        let data = p.var.value().as_slice();
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let mut new = Vec::with_capacity(data.len());
        for j in 0..data.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut x = data[j] - lr * m_hat / (v_hat.sqrt() + state.eps);
            if p.decay {
                x -= lr * state.weight_decay * data[j];
            }
            if p.clamp_nonneg && x < 0.0 {
                x = 0.0;
            }
            new.push(x);
        }
        let (r, c) = p.var.shape();
        updated.push(Tensor::from_vec(r, c, new));
    }
    model.set_params(updated)
}

/// Mean cross-entropy of the model output against the batch targets, plus
/// (correct, counted) prediction tallies for accuracy.
pub fn task_loss(out: &ForwardOutput, batch: &TaskBatch) -> Result<(Var, usize, usize)> {
    match &batch.targets {
        Targets::Labels(labels) => {
            let logp = out.pooled.log_softmax_rows()?;
            let (b, vocab) = logp.shape();
            if labels.len() != b {
                return Err(HrtError::Dim("task_loss: label/batch mismatch".into()));
            }
            let mut onehot = Tensor::zeros(b, vocab);
            let mut correct = 0;
            for (i, &l) in labels.iter().enumerate() {
                onehot.set(i, l, -1.0 / b as f64);
                if argmax(logp.value().row(i)) == l {
                    correct += 1;
                }
            }
            let loss = logp.mul(&Var::constant(onehot))?.sum()?;
            Ok((loss, correct, b))
        }
        Targets::Tokens { targets, loss_mask } => {
            let mut total: Option<Var> = None;
            let mut counted = 0usize;
            let mut correct = 0usize;
            // First pass: total masked positions across the batch (the CE
            // normalizer), then accumulate each item's picked log-probs.
            for mask in loss_mask {
                counted += mask.iter().filter(|&&m| m).count();
            }
            if counted == 0 {
                return Err(HrtError::DegenerateMask(
                    "task_loss: no positions carry loss".into(),
                ));
            }
            for (i, logits) in out.token_logits.iter().enumerate() {
                let logp = logits.log_softmax_rows()?;
                let (n_padded, vocab) = logp.shape();
                let mut pick = Tensor::zeros(n_padded, vocab);
                let mut any = false;
                for (pos, (&tgt, &m)) in targets[i].iter().zip(&loss_mask[i]).enumerate() {
                    if !m {
                        continue;
                    }
                    any = true;
                    pick.set(pos, tgt, -1.0 / counted as f64);
                    if argmax(logp.value().row(pos)) == tgt {
                        correct += 1;
                    }
                }
                if !any {
                    continue;
                }
                let term = logp.mul(&Var::constant(pick))?.sum()?;
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(&term)?,
                });
            }
            Ok((total.unwrap(), correct, counted))
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub task_loss: f64,
    pub recon_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub stopped_early: bool,
    pub final_accuracy: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,task_loss,recon_loss,total,grad_norm,lr\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.task_loss, r.recon_loss, r.total_loss, r.grad_norm, r.lr
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            peak_lr: 3e-3,
            warmup_steps: 200,
            eval_every: 100,
            patience: 5,
            eval_batches: 4,
            seed: 0,
        }
    }
}

/// Split seeds are kept disjoint by namespacing: train batch seeds hash in
/// the step, validation seeds use a distinct high-bit offset.
fn train_seed(base: u64, step: u64) -> u64 {
    base ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(step + 1))
}

fn val_seed(base: u64, k: u64) -> u64 {
    (base | 1 << 63) ^ (0xc2b2_ae3d_27d4_eb4fu64.wrapping_mul(k + 1))
}

/// Mean validation loss/accuracy over fixed no-grad batches.
pub fn evaluate(
    model: &HrtModel,
    spec: &TaskSpec,
    corpus: Option<&[u8]>,
    seed: u64,
    batches: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for k in 0..batches {
        let batch = gen_batch(spec, val_seed(seed, k as u64), corpus)?;
        let (loss, c, n) = no_grad(|| -> Result<_> {
            let mut ctx = ForwardCtx::new(ChaCha20Rng::seed_from_u64(0), false);
            let out = model.forward(&batch.tokens, &mut ctx)?;
            let (l, c, n) = task_loss(&out, &batch)?;
            let lam = model.config.lambda_recon;
            let total = l.value().item() + lam * out.recon_loss.value().item();
            Ok((total, c, n))
        })?;
        loss_sum += loss;
        correct += c;
        counted += n;
    }
    Ok((loss_sum / batches as f64, correct as f64 / counted as f64))
}

/// Full training loop. Returns the report; the model is left holding the
/// best-validation parameters (or the final ones if no eval ever ran).
pub fn train(
    model: &mut HrtModel,
    spec: &TaskSpec,
    corpus: Option<&[u8]>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let mut state = OptimState::new(model, opts.peak_lr, opts.warmup_steps, opts.steps);
    let lambda = model.config.lambda_recon;
    let mut report = TrainReport {
        steps: Vec::new(),
        evals: Vec::new(),
        best_val_loss: None,
        best_step: None,
        stopped_early: false,
        final_accuracy: None,
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut evals_since_best = 0usize;

    for step in 0..opts.steps {
        let batch = gen_batch(spec, train_seed(opts.seed, step), corpus)?;
        let mut ctx = ForwardCtx::new(
            ChaCha20Rng::seed_from_u64(train_seed(opts.seed ^ 0xd0d0, step)),
            true,
        );
        let out = model.forward(&batch.tokens, &mut ctx)?;
        let (task, _, _) = task_loss(&out, &batch)?;
        let total = task.add(&out.recon_loss.scale(lambda)?)?;
        let task_f = task.value().item();
        let recon_f = out.recon_loss.value().item();
        let total_f = task_f + lambda * recon_f;
        if !total_f.is_finite() {
            return Err(HrtError::Divergence(format!(
                "non-finite loss {total_f} at step {step}"
            )));
        }
        total.backward()?;
        let mut grads: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| {
                p.var.grad().unwrap_or_else(|| {
                    let (r, c) = p.var.shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        let grad_norm = clip_gradients(&mut grads, state.clip_norm);
        let lr = lr_at(step, &state);
        adamw_step(model, &grads, &mut state, lr)?;
        report.steps.push(StepRecord {
            step,
            task_loss: task_f,
            recon_loss: recon_f,
            total_loss: total_f,
            grad_norm,
            lr,
        });

        if opts.eval_every > 0 && (step + 1) % opts.eval_every == 0 {
            let (val_loss, val_acc) = evaluate(model, spec, corpus, opts.seed, opts.eval_batches)?;
            report.evals.push(EvalRecord {
                step: step + 1,
                val_loss,
                val_accuracy: val_acc,
            });
            if report.best_val_loss.map_or(true, |b| val_loss < b) {
                report.best_val_loss = Some(val_loss);
                report.best_step = Some(step + 1);
                best_params = Some(
                    model
                        .params()
                        .iter()
                        .map(|p| p.var.value().clone())
                        .collect(),
                );
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= opts.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some(best) = best_params {
        model.set_params(best)?;
    }
    if opts.steps > 0 {
        let (_, acc) = evaluate(model, spec, corpus, opts.seed, opts.eval_batches)?;
        report.final_accuracy = Some(acc);
    }
    Ok(report)
}
