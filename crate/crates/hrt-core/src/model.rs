//! End-to-end HRT assembly: embedding, the level loop (RTB stack, reduce,
//! cross-resolution exchange), multi-resolution readout, task heads, the
//! reconstruction objective, and the param-matched flat baseline.

use crate::attention::{rtb_forward, ForwardCtx, RtbParams};
use crate::config::{HrtConfig, ReadoutKind, ReductionKind};
use crate::cross::{exchange, CrossResParams};
use crate::error::{HrtError, Result};
use crate::ledger::{self, Category};
use crate::pyramid::{
    length_schedule, reconstruct, reconstruction_loss, reduce, LevelState, ReconstructionParams,
    ReductionParams, ResolutionPyramid,
};
use crate::tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// One named learnable tensor, with its optimizer treatment.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Clamped to >= 0 after every optimizer step (distance-bias slopes).
    pub clamp_nonneg: bool,
    /// Whether decoupled weight decay applies (matrices yes; biases,
    /// layer-norm parameters, gates and slopes no).
    pub decay: bool,
}

#[derive(Debug)]
pub struct HrtModel {
    pub config: HrtConfig,
    /// vocab_size x d_1.
    pub embedding: Var,
    /// max_len x d_1, fixed sinusoidal table (not learned).
    pub positions: Tensor,
    /// One RTB stack per level; a single shared stack when
    /// `shared_scale_modules` is set.
    pub level_blocks: Vec<Vec<RtbParams>>,
    /// One per transition l -> l+1.
    pub reductions: Vec<ReductionParams>,
    pub cross: Vec<CrossResParams>,
    pub recon: ReconstructionParams,
    /// Token head over the reconstructed fine sequence: d_1 x vocab.
    pub lm_head_w: Var,
    pub lm_head_b: Var,
    /// Pooled head over the readout vector: d_out x vocab (classification
    /// targets are token ids).
    pub cls_head_w: Var,
    pub cls_head_b: Var,
}

/// Everything one forward pass produces. `pooled` has one row per batch
/// item; `token_logits`, `pyramids` and `fine_masks` have one entry per
/// item (token logits at padded length).
#[derive(Debug)]
pub struct ForwardOutput {
    pub pooled: Var,
    pub token_logits: Vec<Var>,
    pub pyramids: Vec<ResolutionPyramid>,
    pub fine_masks: Vec<Vec<bool>>,
    /// Mean squared-error reconstruction loss over the batch (exactly 0 for L=1).
    pub recon_loss: Var,
}

fn sinusoidal_positions(max_len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(max_len, dim);
    for p in 0..max_len {
        let mut i = 0;
        while i < dim {
            let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
            t.set(p, i, (p as f64 * freq).sin());
            if i + 1 < dim {
                t.set(p, i + 1, (p as f64 * freq).cos());
            }
            i += 2;
        }
    }
    t
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Var {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Var::leaf(Tensor::uniform(rows, cols, limit, rng))
}

fn readout_dim(config: &HrtConfig) -> usize {
    match config.readout {
        ReadoutKind::Coarsest => *config.dims.last().unwrap(),
        ReadoutKind::ConcatAll => config.dims.iter().sum(),
    }
}

impl HrtModel {
    /// Standard initialization: block output projections start at zero so
    /// every RTB is the identity at step 0.
    pub fn init(config: &HrtConfig) -> Result<Self> {
        Self::init_impl(config, true)
    }

    /// Fully random initialization (no zero output projections). Used by
    /// gradient checks, where exactly-zero gradient components drown in
    /// finite-difference noise.
    pub fn init_random(config: &HrtConfig) -> Result<Self> {
        Self::init_impl(config, false)
    }

    fn init_impl(config: &HrtConfig, zero_out_projs: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let d1 = config.dims[0];
        let embedding = xavier(config.vocab_size, d1, &mut rng);
        let positions = sinusoidal_positions(config.max_len, d1);

        let stacks = if config.shared_scale_modules {
            1
        } else {
            config.levels
        };
        let mut level_blocks = Vec::with_capacity(stacks);
        for l in 0..stacks {
            let d = config.dims[l];
            level_blocks.push(
                (0..config.blocks_per_level)
                    .map(|_| RtbParams::init(d, config.heads, l + 1, zero_out_projs, &mut rng))
                    .collect(),
            );
        }

        let mut reductions = Vec::new();
        let mut cross = Vec::new();
        let mut up_projs = Vec::new();
        let mut detail_projs = Vec::new();
        for l in 0..config.levels.saturating_sub(1) {
            let (f, c) = (config.dims[l], config.dims[l + 1]);
            let in_dim = match config.reduction {
                ReductionKind::LinearStrided => 2 * f,
                _ => f,
            };
            reductions.push(ReductionParams {
                proj: xavier(in_dim, c, &mut rng),
            });
            if config.cross_resolution {
                cross.push(CrossResParams::init(f, c, &mut rng));
            }
            up_projs.push(xavier(c, f, &mut rng));
            if config.reduction == ReductionKind::Wavelet {
                detail_projs.push(xavier(f, f, &mut rng));
            }
        }
        // reconstruct() indexes detail_projs per transition; pad with unused
        // identity-shaped entries for non-wavelet kinds so indexing is safe.
        if config.reduction != ReductionKind::Wavelet {
            detail_projs =
                (0..config.levels.saturating_sub(1)).map(|l| Var::constant(Tensor::eye(config.dims[l]))).collect();
        }

        let d_out = readout_dim(config);
        let lm_head_w = xavier(d1, config.vocab_size, &mut rng);
        let lm_head_b = Var::leaf(Tensor::zeros(1, config.vocab_size));
        let cls_head_w = xavier(d_out, config.vocab_size, &mut rng);
        let cls_head_b = Var::leaf(Tensor::zeros(1, config.vocab_size));

        Ok(HrtModel {
            config: config.clone(),
            embedding,
            positions,
            level_blocks,
            reductions,
            cross,
            recon: ReconstructionParams {
                up_projs,
                detail_projs,
            },
            lm_head_w,
            lm_head_b,
            cls_head_w,
            cls_head_b,
        })
    }

    /// All learned parameters in declaration order (the checkpoint layout).
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let mut push = |name: String, var: &Var, clamp: bool, decay: bool| {
            out.push(Param {
                name,
                var: var.clone(),
                clamp_nonneg: clamp,
                decay,
            });
        };
        push("embedding".into(), &self.embedding, false, true);
        for (s, stack) in self.level_blocks.iter().enumerate() {
            for (b, blk) in stack.iter().enumerate() {
                let p = format!("stack{s}.block{b}");
                for (h, w) in blk.w_q.iter().enumerate() {
                    push(format!("{p}.w_q{h}"), w, false, true);
                }
                for (h, w) in blk.w_k.iter().enumerate() {
                    push(format!("{p}.w_k{h}"), w, false, true);
                }
                for (h, w) in blk.w_v.iter().enumerate() {
                    push(format!("{p}.w_v{h}"), w, false, true);
                }
                push(format!("{p}.w_o"), &blk.w_o, false, true);
                push(format!("{p}.ffn_w1"), &blk.ffn_w1, false, true);
                push(format!("{p}.ffn_b1"), &blk.ffn_b1, false, false);
                push(format!("{p}.ffn_w2"), &blk.ffn_w2, false, true);
                push(format!("{p}.ffn_b2"), &blk.ffn_b2, false, false);
                push(format!("{p}.ln1_gain"), &blk.ln1_gain, false, false);
                push(format!("{p}.ln1_bias"), &blk.ln1_bias, false, false);
                push(format!("{p}.ln2_gain"), &blk.ln2_gain, false, false);
                push(format!("{p}.ln2_bias"), &blk.ln2_bias, false, false);
                for (h, s) in blk.slopes.iter().enumerate() {
                    push(format!("{p}.slope{h}"), s, true, false);
                }
            }
        }
        for (l, r) in self.reductions.iter().enumerate() {
            push(format!("transition{l}.reduce_proj"), &r.proj, false, true);
        }
        for (l, c) in self.cross.iter().enumerate() {
            let p = format!("transition{l}.cross");
            push(format!("{p}.w_q_up"), &c.w_q_up, false, true);
            push(format!("{p}.w_k_up"), &c.w_k_up, false, true);
            push(format!("{p}.w_v_up"), &c.w_v_up, false, true);
            push(format!("{p}.w_o_up"), &c.w_o_up, false, true);
            push(format!("{p}.gate_w_up"), &c.gate_w_up, false, false);
            push(format!("{p}.gate_b_up"), &c.gate_b_up, false, false);
            push(format!("{p}.w_q_down"), &c.w_q_down, false, true);
            push(format!("{p}.w_k_down"), &c.w_k_down, false, true);
            push(format!("{p}.w_v_down"), &c.w_v_down, false, true);
            push(format!("{p}.w_o_down"), &c.w_o_down, false, true);
            push(format!("{p}.gate_w_down"), &c.gate_w_down, false, false);
            push(format!("{p}.gate_b_down"), &c.gate_b_down, false, false);
        }
        for (l, u) in self.recon.up_projs.iter().enumerate() {
            push(format!("transition{l}.up_proj"), u, false, true);
        }
        if self.config.reduction == ReductionKind::Wavelet {
            for (l, d) in self.recon.detail_projs.iter().enumerate() {
                push(format!("transition{l}.detail_proj"), d, false, true);
            }
        }
        push("lm_head_w".into(), &self.lm_head_w, false, true);
        push("lm_head_b".into(), &self.lm_head_b, false, false);
        push("cls_head_w".into(), &self.cls_head_w, false, true);
        push("cls_head_b".into(), &self.cls_head_b, false, false);
        out
    }

    /// Mutable references to all learned parameters, in exactly the order
    /// of [`HrtModel::params`]. Used to swap in updated tensors (optimizer
    /// steps, checkpoint loads): parameters are replaced wholesale rather
    /// than mutated, since graph nodes share them through `Rc`.
    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        let mut out: Vec<&mut Var> = Vec::new();
        out.push(&mut self.embedding);
        for stack in &mut self.level_blocks {
            for blk in stack {
                out.extend(blk.w_q.iter_mut());
                out.extend(blk.w_k.iter_mut());
                out.extend(blk.w_v.iter_mut());
                out.push(&mut blk.w_o);
                out.push(&mut blk.ffn_w1);
                out.push(&mut blk.ffn_b1);
                out.push(&mut blk.ffn_w2);
                out.push(&mut blk.ffn_b2);
                out.push(&mut blk.ln1_gain);
                out.push(&mut blk.ln1_bias);
                out.push(&mut blk.ln2_gain);
                out.push(&mut blk.ln2_bias);
                out.extend(blk.slopes.iter_mut());
            }
        }
        for r in &mut self.reductions {
            out.push(&mut r.proj);
        }
        for c in &mut self.cross {
            out.push(&mut c.w_q_up);
            out.push(&mut c.w_k_up);
            out.push(&mut c.w_v_up);
            out.push(&mut c.w_o_up);
            out.push(&mut c.gate_w_up);
            out.push(&mut c.gate_b_up);
            out.push(&mut c.w_q_down);
            out.push(&mut c.w_k_down);
            out.push(&mut c.w_v_down);
            out.push(&mut c.w_o_down);
            out.push(&mut c.gate_w_down);
            out.push(&mut c.gate_b_down);
        }
        out.extend(self.recon.up_projs.iter_mut());
        if self.config.reduction == ReductionKind::Wavelet {
            out.extend(self.recon.detail_projs.iter_mut());
        }
        out.push(&mut self.lm_head_w);
        out.push(&mut self.lm_head_b);
        out.push(&mut self.cls_head_w);
        out.push(&mut self.cls_head_b);
        out
    }

    /// Replaces every parameter with a fresh leaf holding the given tensor,
    /// in declaration order; shapes must match exactly.
    pub fn set_params(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let slots = self.params_mut();
        if tensors.len() != slots.len() {
            return Err(HrtError::Checkpoint(format!(
                "parameter count mismatch: {} given, {} expected",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(HrtError::Checkpoint(format!(
                    "parameter shape mismatch: {:?} given, {:?} expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Var::leaf(t);
        }
        Ok(())
    }

    /// Forward pass over a batch; items are processed independently within
    /// one graph (no cross-batch interaction anywhere in the architecture).
    pub fn forward(&self, batch: &[Vec<usize>], ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(HrtError::Input("forward: empty batch".into()));
        }
        let mut pooled_rows = Vec::with_capacity(batch.len());
        let mut token_logits = Vec::with_capacity(batch.len());
        let mut pyramids = Vec::with_capacity(batch.len());
        let mut fine_masks = Vec::with_capacity(batch.len());
        let mut recon_losses = Vec::with_capacity(batch.len());
        for tokens in batch {
            let (pooled, logits, pyramid, mask, recon) = self.forward_one(tokens, ctx)?;
            pooled_rows.push(pooled);
            token_logits.push(logits);
            pyramids.push(pyramid);
            fine_masks.push(mask);
            recon_losses.push(recon);
        }
        let pooled = Var::concat_rows(&pooled_rows)?;
        let mut recon_loss = recon_losses[0].clone();
        for r in &recon_losses[1..] {
            recon_loss = recon_loss.add(r)?;
        }
        let recon_loss = recon_loss.scale(1.0 / batch.len() as f64)?;
        Ok(ForwardOutput {
            pooled,
            token_logits,
            pyramids,
            fine_masks,
            recon_loss,
        })
    }

    fn forward_one(
        &self,
        tokens: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var, ResolutionPyramid, Vec<bool>, Var)> {
        let cfg = &self.config;
        for &t in tokens {
            if t >= cfg.vocab_size {
                return Err(HrtError::Input(format!(
                    "token id {t} out of range (vocab {})",
                    cfg.vocab_size
                )));
            }
        }
        if tokens.len() > cfg.max_len {
            return Err(HrtError::Capacity(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                cfg.max_len
            )));
        }
        let (n_padded, _lengths) = length_schedule(tokens.len(), cfg.levels, cfg.max_len)?;
        let mut ids: Vec<usize> = tokens.to_vec();
        ids.resize(n_padded, 0);
        let mask: Vec<bool> = (0..n_padded).map(|i| i < tokens.len()).collect();

        let d1 = cfg.dims[0];
        let mut pos = Tensor::zeros(n_padded, d1);
        for i in 0..n_padded {
            for c in 0..d1 {
                pos.set(i, c, self.positions.get(i, c));
            }
        }
        let x0 = self
            .embedding
            .gather_rows(&ids)?
            .add(&Var::constant(pos))?;
        let x0 = x0.dropout(cfg.dropout, &mut ctx.rng, ctx.training)?;

        // Level loop (Algorithm 1): RTB stack, then reduce + exchange.
        let mut levels: Vec<LevelState> = vec![LevelState::new(x0.clone(), mask.clone())];
        for l in 0..cfg.levels {
            let stack = if cfg.shared_scale_modules {
                &self.level_blocks[0]
            } else {
                &self.level_blocks[l]
            };
            let lvl_mask = levels[l].mask.clone();
            let chunk = cfg.attn_chunk;
            for blk in stack {
                let r = rtb_forward(
                    &levels[l].repr,
                    blk,
                    &lvl_mask,
                    l + 1,
                    chunk,
                    cfg.dropout,
                    ctx,
                )?;
                levels[l].repr = r;
            }
            if l + 1 < cfg.levels {
                let coarse = reduce(&levels[l], l, cfg.reduction, &self.reductions[l])?;
                levels.push(coarse);
                if cfg.cross_resolution {
                    let (nf, nc) = exchange(
                        &levels[l].repr,
                        &levels[l].mask.clone(),
                        &levels[l + 1].repr,
                        &levels[l + 1].mask.clone(),
                        &self.cross[l],
                        l + 1,
                        cfg.attn_chunk,
                        ctx,
                    )?;
                    levels[l].repr = nf;
                    levels[l + 1].repr = nc;
                }
            }
        }
        let pyramid = ResolutionPyramid { levels };

        // Reconstruction path: token head reads g(pyramid), and the squared-error
        // compares g(pyramid) against the initial fine embedding.
        let rec = reconstruct(&pyramid, &self.recon)?;
        let recon_loss = if cfg.levels == 1 {
            Var::constant(Tensor::scalar(0.0))
        } else {
            reconstruction_loss(&rec, &x0, &mask)?
        };

        ledger::set_label(Category::Projections, 0);
        let logits = rec.matmul(&self.lm_head_w)?.add_row_vec(&self.lm_head_b)?;

        let pooled_repr = self.readout(&pyramid)?;
        ledger::set_label(Category::Projections, 0);
        let pooled = pooled_repr
            .matmul(&self.cls_head_w)?
            .add_row_vec(&self.cls_head_b)?;
        Ok((pooled, logits, pyramid, mask, recon_loss))
    }

    /// Valid-position mean pool of one level as a 1 x d row.
    fn pool_level(level: &LevelState) -> Result<Var> {
        let n_valid = level.valid_count();
        if n_valid == 0 {
            return Err(HrtError::DegenerateMask("readout: no valid positions".into()));
        }
        let w: Vec<f64> = level
            .mask
            .iter()
            .map(|&m| if m { 1.0 / n_valid as f64 } else { 0.0 })
            .collect();
        let row = Var::constant(Tensor::from_vec(1, level.len(), w));
        ledger::set_label(Category::Projections, 0);
        row.matmul(&level.repr)
    }

    fn readout(&self, pyramid: &ResolutionPyramid) -> Result<Var> {
        match self.config.readout {
            ReadoutKind::Coarsest => Self::pool_level(pyramid.levels.last().unwrap()),
            ReadoutKind::ConcatAll => {
                let mut acc: Option<Var> = None;
                for level in &pyramid.levels {
                    let p = Self::pool_level(level)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => a.concat_cols(&p)?,
                    });
                }
                Ok(acc.unwrap())
            }
        }
    }
}

/// Learned scalars in one RTB of width `d` with `heads` heads:
/// QKV + output projections (4 d^2), FFN (8 d^2 + 5 d), two layer-norm
/// pairs (4 d), and one slope per head.
fn rtb_param_count(d: usize, heads: usize) -> usize {
    12 * d * d + 9 * d + heads
}

/// Exact learned-scalar count as a pure function of the config; asserted
/// equal to the runtime parameter enumeration.
pub fn param_count(config: &HrtConfig) -> Result<usize> {
    config.validate()?;
    let d1 = config.dims[0];
    let vocab = config.vocab_size;
    let mut total = vocab * d1; // embedding (positions are fixed)
    let stacks = if config.shared_scale_modules {
        1
    } else {
        config.levels
    };
    for l in 0..stacks {
        total += config.blocks_per_level * rtb_param_count(config.dims[l], config.heads);
    }
    for l in 0..config.levels.saturating_sub(1) {
        let (f, c) = (config.dims[l], config.dims[l + 1]);
        let a = f.min(c);
        total += match config.reduction {
            ReductionKind::LinearStrided => 2 * f * c,
            _ => f * c,
        };
        if config.cross_resolution {
            // up: Q from coarse, K/V from fine, out to coarse, gate on coarse.
            total += c * a + 2 * (f * a) + a * c + 2 * c + 1;
            // down: Q from fine, K/V from coarse, out to fine, gate on fine.
            total += f * a + 2 * (c * a) + a * f + 2 * f + 1;
        }
        total += c * f; // reconstruction width map
        if config.reduction == ReductionKind::Wavelet {
            total += f * f; // reconstruction detail map
        }
    }
    let d_out = readout_dim(config);
    total += d1 * vocab + vocab; // lm head
    total += d_out * vocab + vocab; // cls head
    Ok(total)
}

/// Single-level transformer config matched to `hrt`'s parameter count:
/// L=1, full attention, no reconstruction objective, same heads and FFN
/// ratio. Width is chosen from the HRT's level widths and depth searched,
/// picking the closest count. Errors if nothing lands within ±10%.
pub fn flat_baseline_config(hrt: &HrtConfig) -> Result<HrtConfig> {
    let target = param_count(hrt)? as f64;
    let mut flat = hrt.clone();
    flat.levels = 1;
    flat.cross_resolution = false;
    flat.attn_chunk = 0;
    flat.lambda_recon = 0.0;
    let mut widths: Vec<usize> = hrt.dims.clone();
    widths.sort_unstable();
    widths.dedup();
    // Among matches within tolerance, prefer the shallowest stack (widest
    // blocks): a 10x-deeper narrow stack is a pathological baseline and an
    // order of magnitude slower at long n for the same parameter count.
    let mut closest: Option<(f64, usize, usize)> = None;
    let mut shallowest: Option<(usize, f64, usize)> = None;
    for &w in &widths {
        flat.dims = vec![w];
        for blocks in 1..=256 {
            flat.blocks_per_level = blocks;
            let count = param_count(&flat)? as f64;
            let rel = (count - target).abs() / target;
            if closest.map_or(true, |(b, _, _)| rel < b) {
                closest = Some((rel, w, blocks));
            }
            if rel <= 0.10
                && shallowest.map_or(true, |(b, r, _)| blocks < b || (blocks == b && rel < r))
            {
                shallowest = Some((blocks, rel, w));
            }
            if count > 2.0 * target {
                break;
            }
        }
    }
    let (width, blocks) = match shallowest {
        Some((blocks, _, width)) => (width, blocks),
        None => {
            let (rel, _, _) = closest.unwrap();
            return Err(HrtError::Config(format!(
                "no flat width/depth within 10% of {target} parameters (best {rel:.3})"
            )));
        }
    };
    flat.dims = vec![width];
    flat.blocks_per_level = blocks;
    Ok(flat)
}
