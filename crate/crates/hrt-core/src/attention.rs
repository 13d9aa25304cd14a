//! Per-level resolution transformer block: multi-head scaled dot-product
//! attention with a learnable distance bias, feed-forward sublayer, pre-norm
//! residual wiring.
//!
//! Self-attention is chunk-local: a sequence is split into consecutive
//! chunks of at most `attn_chunk` positions and attention runs within each
//! chunk. A chunk at level l spans `attn_chunk * 2^(l-1)` raw positions, so
//! receptive fields double per level at constant per-level cost; sequences
//! that fit in one chunk get full attention, which covers every desk-scale
//! configuration.

use crate::error::{HrtError, Result};
use crate::ledger::{self, Category};
use crate::tensor::{Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossDirection {
    BottomUp,
    TopDown,
}

impl CrossDirection {
    pub fn name(self) -> &'static str {
        match self {
            CrossDirection::BottomUp => "bottom_up",
            CrossDirection::TopDown => "top_down",
        }
    }
}

/// What produced an attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScope {
    SelfLevel {
        level: usize,
    },
    Cross {
        fine: usize,
        coarse: usize,
        direction: CrossDirection,
    },
}

/// One recorded attention map (one head, one chunk). Offsets give the chunk
/// position within the full query/key sequences.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub scope: AttentionScope,
    pub head: usize,
    pub query_offset: usize,
    pub key_offset: usize,
    pub weights: Tensor,
}

/// Per-forward mutable state: the dropout RNG stream, the train/eval flag,
/// and an optional attention-map recorder.
pub struct ForwardCtx {
    pub rng: ChaCha20Rng,
    pub training: bool,
    pub recorder: Option<Vec<AttentionRecord>>,
}

impl ForwardCtx {
    pub fn new(rng: ChaCha20Rng, training: bool) -> Self {
        ForwardCtx {
            rng,
            training,
            recorder: None,
        }
    }

    pub fn recording(rng: ChaCha20Rng) -> Self {
        ForwardCtx {
            rng,
            training: false,
            recorder: Some(Vec::new()),
        }
    }

    fn record(&mut self, rec: AttentionRecord) {
        if let Some(r) = self.recorder.as_mut() {
            r.push(rec);
        }
    }
}

/// Softmaxed attention weights for `q` against `k` under a key mask.
/// Masked keys are driven to -1e30 before the stabilized softmax, which
/// underflows them to exactly zero weight.
pub fn attention_weights(
    q: &Var,
    k: &Var,
    bias: Option<&Var>,
    key_mask: &[bool],
) -> Result<Var> {
    if q.cols() != k.cols() {
        return Err(HrtError::Dim(format!(
            "attention: query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if key_mask.len() != k.rows() {
        return Err(HrtError::Dim(format!(
            "attention: mask length {} vs {} keys",
            key_mask.len(),
            k.rows()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(HrtError::DegenerateMask(
            "attention over an all-masked key set".into(),
        ));
    }
    let d_h = q.cols() as f64;
    let mut scores = q.matmul_nt(k)?.scale(1.0 / d_h.sqrt())?;
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    if key_mask.iter().any(|&m| !m) {
        let (m, kk) = scores.shape();
        let mut neg = Tensor::zeros(m, kk);
        for r in 0..m {
            for c in 0..kk {
                if !key_mask[c] {
                    neg.set(r, c, -1e30);
                }
            }
        }
        scores = scores.add(&Var::constant(neg))?;
    }
    scores.softmax_rows()
}

/// Full scaled dot-product attention (Attn(Q, K, V) with optional additive
/// bias and key masking).
pub fn scaled_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    bias: Option<&Var>,
    key_mask: &[bool],
) -> Result<Var> {
    let w = attention_weights(q, k, bias, key_mask)?;
    ledger::set_label(Category::AttnMix, 0);
    w.matmul(v)
}

/// Distance-bias matrix `-slope * |i - j|` with absolute positions given by
/// the query/key offsets; the slope is a learnable 1x1 scalar.
pub fn scale_bias(
    slope: &Var,
    q_len: usize,
    k_len: usize,
    q_offset: usize,
    k_offset: usize,
) -> Result<Var> {
    let mut dist = Tensor::zeros(q_len, k_len);
    for i in 0..q_len {
        for j in 0..k_len {
            let a = (q_offset + i) as f64;
            let b = (k_offset + j) as f64;
            dist.set(i, j, -(a - b).abs());
        }
    }
    Var::constant(dist).mul_scalar_var(slope)
}

/// Initial bias slope for a 1-based level: s0 / 2^(level-1) with s0 = 1, so
/// fine levels prefer locality and coarse levels are near-uniform.
pub fn initial_slope(level: usize) -> f64 {
    1.0 / (1u64 << (level - 1)) as f64
}

/// Learned parameters of one resolution transformer block.
#[derive(Debug, Clone)]
pub struct RtbParams {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    /// Per-head learnable distance-bias slopes, clamped >= 0 after each
    /// optimizer step.
    pub slopes: Vec<Var>,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, limit, rng)
}

impl RtbParams {
    /// `zero_out_projs` zero-initializes W_O and the second ffn map so the
    /// block is the identity at init (residual-only).
    pub fn init(
        dim: usize,
        heads: usize,
        level: usize,
        zero_out_projs: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let d_h = dim / heads;
        fn mk(r: usize, c: usize, rng: &mut impl Rng) -> Var {
            Var::leaf(xavier(r, c, rng))
        }
        let w_q = (0..heads).map(|_| mk(dim, d_h, rng)).collect();
        let w_k = (0..heads).map(|_| mk(dim, d_h, rng)).collect();
        let w_v = (0..heads).map(|_| mk(dim, d_h, rng)).collect();
        let w_o = if zero_out_projs {
            Var::leaf(Tensor::zeros(dim, dim))
        } else {
            mk(dim, dim, rng)
        };
        let hidden = 4 * dim;
        let ffn_w1 = mk(dim, hidden, rng);
        let ffn_b1 = Var::leaf(Tensor::zeros(1, hidden));
        let ffn_w2 = if zero_out_projs {
            Var::leaf(Tensor::zeros(hidden, dim))
        } else {
            mk(hidden, dim, rng)
        };
        let ffn_b2 = Var::leaf(Tensor::zeros(1, dim));
        RtbParams {
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln1_gain: Var::leaf(Tensor::full(1, dim, 1.0)),
            ln1_bias: Var::leaf(Tensor::zeros(1, dim)),
            ln2_gain: Var::leaf(Tensor::full(1, dim, 1.0)),
            ln2_bias: Var::leaf(Tensor::zeros(1, dim)),
            slopes: (0..heads)
                .map(|_| Var::leaf(Tensor::scalar(initial_slope(level))))
                .collect(),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn dim(&self) -> usize {
        self.w_o.rows()
    }
}

/// One pre-norm transformer block: `x + MHA(LN(x))` then `+ FFN(LN(.))`,
/// with dropout on attention weights and after each sublayer output.
/// `level` is 1-based; `attn_chunk` of 0 means full attention.
pub fn rtb_forward(
    x: &Var,
    params: &RtbParams,
    mask: &[bool],
    level: usize,
    attn_chunk: usize,
    dropout_p: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let len = x.rows();
    let dim = x.cols();
    if dim != params.dim() {
        return Err(HrtError::Dim(format!(
            "rtb_forward: input dim {dim} vs params dim {}",
            params.dim()
        )));
    }
    if mask.len() != len {
        return Err(HrtError::Dim(format!(
            "rtb_forward: mask length {} vs {len} rows",
            mask.len()
        )));
    }
    let heads = params.heads();

    let h = x.layer_norm(&params.ln1_gain, &params.ln1_bias, 1e-5)?;

    // Full-sequence head projections, then chunked attention.
    ledger::set_label(Category::Projections, level);
    let qs: Vec<Var> = params
        .w_q
        .iter()
        .map(|w| h.matmul(w))
        .collect::<Result<_>>()?;
    let ks: Vec<Var> = params
        .w_k
        .iter()
        .map(|w| h.matmul(w))
        .collect::<Result<_>>()?;
    let vs: Vec<Var> = params
        .w_v
        .iter()
        .map(|w| h.matmul(w))
        .collect::<Result<_>>()?;

    let width = if attn_chunk == 0 || attn_chunk >= len {
        len
    } else {
        attn_chunk
    };
    let mut chunk_outputs: Vec<Var> = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + width).min(len);
        let clen = end - start;
        let idx: Vec<usize> = (start..end).collect();
        let chunk_mask = &mask[start..end];
        if !chunk_mask.iter().any(|&m| m) {
            // Fully padded chunk: attention contributes nothing.
            chunk_outputs.push(Var::constant(Tensor::zeros(clen, dim)));
            start = end;
            continue;
        }
        let mut head_outs: Vec<Var> = Vec::new();
        for hd in 0..heads {
            let q = qs[hd].gather_rows(&idx)?;
            let k = ks[hd].gather_rows(&idx)?;
            let v = vs[hd].gather_rows(&idx)?;
            let bias = scale_bias(&params.slopes[hd], clen, clen, start, start)?;
            ledger::set_label(Category::AttnScores, level);
            let weights = attention_weights(&q, &k, Some(&bias), chunk_mask)?;
            ctx.record(AttentionRecord {
                scope: AttentionScope::SelfLevel { level },
                head: hd,
                query_offset: start,
                key_offset: start,
                weights: weights.value().clone(),
            });
            let weights = weights.dropout(dropout_p, &mut ctx.rng, ctx.training)?;
            ledger::set_label(Category::AttnMix, level);
            head_outs.push(weights.matmul(&v)?);
        }
        let mut concat = head_outs[0].clone();
        for ho in &head_outs[1..] {
            concat = concat.concat_cols(ho)?;
        }
        chunk_outputs.push(concat);
        start = end;
    }
    let attn = Var::concat_rows(&chunk_outputs)?;
    ledger::set_label(Category::Projections, level);
    let attn = attn.matmul(&params.w_o)?;
    let attn = attn.dropout(dropout_p, &mut ctx.rng, ctx.training)?;
    let x = x.add(&attn)?;

    let h2 = x.layer_norm(&params.ln2_gain, &params.ln2_bias, 1e-5)?;
    ledger::set_label(Category::Ffn, level);
    let f = h2
        .matmul(&params.ffn_w1)?
        .add_row_vec(&params.ffn_b1)?
        .gelu()?;
    ledger::set_label(Category::Ffn, level);
    let f = f.matmul(&params.ffn_w2)?.add_row_vec(&params.ffn_b2)?;
    let f = f.dropout(dropout_p, &mut ctx.rng, ctx.training)?;
    x.add(&f)
}
