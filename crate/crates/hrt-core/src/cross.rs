//! Cross-resolution exchange between adjacent pyramid levels: single-head
//! bottom-up attention (coarse queries over fine keys), top-down attention
//! (fine queries over coarse keys), and per-position gated fusion of the
//! attended update with the original representation.
//!
//! Like self-attention, the exchange is chunk-aligned: fine chunk
//! `[a, a+w)` talks to coarse chunk `[a/2, (a+w)/2)`, which covers the same
//! span of raw positions. With `attn_chunk = 0` (or sequences shorter than
//! a chunk) it degenerates to full cross attention.

use crate::attention::{attention_weights, AttentionRecord, AttentionScope, CrossDirection, ForwardCtx};
use crate::error::{HrtError, Result};
use crate::ledger::{self, Category};
use crate::tensor::{Tensor, Var};
use rand::Rng;

/// Parameters for one fine<->coarse transition. `d_a = min(d_fine, d_coarse)`
/// is the shared attention width.
#[derive(Debug, Clone)]
pub struct CrossResParams {
    pub w_q_up: Var,
    pub w_k_up: Var,
    pub w_v_up: Var,
    pub w_o_up: Var,
    pub gate_w_up: Var,
    pub gate_b_up: Var,
    pub w_q_down: Var,
    pub w_k_down: Var,
    pub w_v_down: Var,
    pub w_o_down: Var,
    pub gate_w_down: Var,
    pub gate_b_down: Var,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Var {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Var::leaf(Tensor::uniform(rows, cols, limit, rng))
}

impl CrossResParams {
    pub fn init(d_fine: usize, d_coarse: usize, rng: &mut impl Rng) -> Self {
        let d_a = d_fine.min(d_coarse);
        CrossResParams {
            w_q_up: xavier(d_coarse, d_a, rng),
            w_k_up: xavier(d_fine, d_a, rng),
            w_v_up: xavier(d_fine, d_a, rng),
            w_o_up: xavier(d_a, d_coarse, rng),
            gate_w_up: Var::leaf(Tensor::zeros(2 * d_coarse, 1)),
            gate_b_up: Var::leaf(Tensor::scalar(0.0)),
            w_q_down: xavier(d_fine, d_a, rng),
            w_k_down: xavier(d_coarse, d_a, rng),
            w_v_down: xavier(d_coarse, d_a, rng),
            w_o_down: xavier(d_a, d_fine, rng),
            gate_w_down: Var::leaf(Tensor::zeros(2 * d_fine, 1)),
            gate_b_down: Var::leaf(Tensor::scalar(0.0)),
        }
    }
}

/// Per-position gated fusion: `alpha = sigmoid([upd; orig] w + b)` (one gate
/// per position), output `alpha * upd + (1 - alpha) * orig`.
pub fn gated_fuse(orig: &Var, upd: &Var, gate_w: &Var, gate_b: &Var) -> Result<Var> {
    if orig.shape() != upd.shape() {
        return Err(HrtError::Dim(format!(
            "gated_fuse: shapes {:?} vs {:?}",
            orig.shape(),
            upd.shape()
        )));
    }
    let cat = upd.concat_cols(orig)?;
    let logit = cat.matmul(gate_w)?; // len x 1
    let b = Var::constant(Tensor::full(logit.rows(), 1, 1.0)).mul_scalar_var(gate_b)?;
    let alpha = logit.add(&b)?.sigmoid()?;
    let one_minus = Var::constant(Tensor::full(alpha.rows(), 1, 1.0)).sub(&alpha)?;
    upd.mul_col_vec(&alpha)?.add(&orig.mul_col_vec(&one_minus)?)
}

struct DirSpec<'a> {
    w_q: &'a Var,
    w_k: &'a Var,
    w_v: &'a Var,
    w_o: &'a Var,
    direction: CrossDirection,
}

/// One direction of cross attention, chunk-aligned. Queries come from `q_x`,
/// keys/values from `kv_x`; `q_per_kv` is len(q)/len(kv) numerator/denominator
/// handled via the fine chunk width. Returns the attended update (same shape
/// as `q_x`); positions whose paired key chunk is fully masked keep their
/// original rows (identity update).
#[allow(clippy::too_many_arguments)]
fn cross_direction(
    q_x: &Var,
    kv_x: &Var,
    q_orig: &Var,
    kv_mask: &[bool],
    fine_len: usize,
    fine_chunk: usize,
    spec: &DirSpec,
    fine_level: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    ledger::set_label(Category::CrossRes, fine_level);
    let q_all = q_x.matmul(spec.w_q)?;
    let k_all = kv_x.matmul(spec.w_k)?;
    let v_all = kv_x.matmul(spec.w_v)?;

    let (q_len, kv_len) = (q_x.rows(), kv_x.rows());
    // Chunk boundaries in fine coordinates; each side maps by its ratio to
    // the fine length.
    let w_f = if fine_chunk == 0 || fine_chunk >= fine_len {
        fine_len
    } else {
        fine_chunk
    };
    let to_side = |fine_pos: usize, side_len: usize| fine_pos * side_len / fine_len;

    let mut out_chunks: Vec<Var> = Vec::new();
    let mut a = 0;
    while a < fine_len {
        let b = (a + w_f).min(fine_len);
        let (qa, qb) = (to_side(a, q_len), to_side(b, q_len));
        let (ka, kb) = (to_side(a, kv_len), to_side(b, kv_len));
        let q_idx: Vec<usize> = (qa..qb).collect();
        let k_idx: Vec<usize> = (ka..kb).collect();
        let chunk_mask = &kv_mask[ka..kb];
        if !chunk_mask.iter().any(|&m| m) {
            out_chunks.push(q_orig.gather_rows(&q_idx)?);
            a = b;
            continue;
        }
        let q = q_all.gather_rows(&q_idx)?;
        let k = k_all.gather_rows(&k_idx)?;
        let v = v_all.gather_rows(&k_idx)?;
        ledger::set_label(Category::CrossRes, fine_level);
        let weights = attention_weights(&q, &k, None, chunk_mask)?;
        if ctx.recorder.is_some() {
            let rec = AttentionRecord {
                scope: AttentionScope::Cross {
                    fine: fine_level,
                    coarse: fine_level + 1,
                    direction: spec.direction,
                },
                head: 0,
                query_offset: qa,
                key_offset: ka,
                weights: weights.value().clone(),
            };
            if let Some(r) = ctx.recorder.as_mut() {
                r.push(rec);
            }
        }
        ledger::set_label(Category::CrossRes, fine_level);
        let mixed = weights.matmul(&v)?;
        ledger::set_label(Category::CrossRes, fine_level);
        out_chunks.push(mixed.matmul(spec.w_o)?);
        a = b;
    }
    Var::concat_rows(&out_chunks)
}

/// Bidirectional exchange between a fine level (index `fine_level`, 1-based)
/// and the next coarser level. Both attended updates are computed from the
/// pre-update states, then each side is gated against its original.
/// Returns `(new_fine, new_coarse)`.
#[allow(clippy::too_many_arguments)]
pub fn exchange(
    fine: &Var,
    fine_mask: &[bool],
    coarse: &Var,
    coarse_mask: &[bool],
    params: &CrossResParams,
    fine_level: usize,
    attn_chunk: usize,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    if fine.rows() != 2 * coarse.rows() {
        return Err(HrtError::Dim(format!(
            "exchange: fine length {} is not twice coarse length {}",
            fine.rows(),
            coarse.rows()
        )));
    }
    let fine_len = fine.rows();
    let up = DirSpec {
        w_q: &params.w_q_up,
        w_k: &params.w_k_up,
        w_v: &params.w_v_up,
        w_o: &params.w_o_up,
        direction: CrossDirection::BottomUp,
    };
    let down = DirSpec {
        w_q: &params.w_q_down,
        w_k: &params.w_k_down,
        w_v: &params.w_v_down,
        w_o: &params.w_o_down,
        direction: CrossDirection::TopDown,
    };
    let coarse_upd = cross_direction(
        coarse, fine, coarse, fine_mask, fine_len, attn_chunk, &up, fine_level, ctx,
    )?;
    let fine_upd = cross_direction(
        fine, coarse, fine, coarse_mask, fine_len, attn_chunk, &down, fine_level, ctx,
    )?;
    ledger::set_label(Category::CrossRes, fine_level);
    let new_coarse = gated_fuse(coarse, &coarse_upd, &params.gate_w_up, &params.gate_b_up)?;
    ledger::set_label(Category::CrossRes, fine_level);
    let new_fine = gated_fuse(fine, &fine_upd, &params.gate_w_down, &params.gate_b_down)?;
    Ok((new_fine, new_coarse))
}
