//! Architectural hyperparameters and ablation toggles.

use crate::error::{HrtError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionKind {
    /// Orthonormal Haar averaging + learned projection, details retained.
    Wavelet,
    /// Pairwise mean + learned projection, no details.
    AvgPool,
    /// Learned linear map over concatenated pairs, no details.
    LinearStrided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    /// Mean-pool of valid positions at the coarsest level.
    Coarsest,
    /// Concatenation of valid-mean-pools from every level.
    ConcatAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrtConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of pyramid levels L.
    pub levels: usize,
    /// Per-level embedding widths, non-decreasing, each divisible by `heads`.
    pub dims: Vec<usize>,
    pub heads: usize,
    pub blocks_per_level: usize,
    pub reduction: ReductionKind,
    pub cross_resolution: bool,
    pub shared_scale_modules: bool,
    pub readout: ReadoutKind,
    /// Weight of the reconstruction loss added to the task loss.
    pub lambda_recon: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Per-level self-attention chunk capacity: each level attends within
    /// consecutive chunks of at most this many positions, so a level-l chunk
    /// spans `attn_chunk * 2^(l-1)` raw positions. 0 means unlimited (full
    /// attention at every level, the flat-baseline setting). Sequences no
    /// longer than the capacity always get full attention.
    pub attn_chunk: usize,
}

impl HrtConfig {
    /// Default width schedule: d_l = min(d1 * 2^(l-1), 4 * d1). The cap
    /// keeps the per-level cost sum from being dominated by width growth.
    pub fn default_dims(d1: usize, levels: usize) -> Vec<usize> {
        (0..levels)
            .map(|l| (d1 * (1usize << l)).min(4 * d1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(HrtError::Config("levels must be >= 1".into()));
        }
        if self.dims.len() != self.levels {
            return Err(HrtError::Config(format!(
                "dims has {} entries for {} levels",
                self.dims.len(),
                self.levels
            )));
        }
        for w in self.dims.windows(2) {
            if w[1] < w[0] {
                return Err(HrtError::Config(format!(
                    "dims must be non-decreasing, got {:?}",
                    self.dims
                )));
            }
        }
        if self.heads == 0 {
            return Err(HrtError::Config("heads must be >= 1".into()));
        }
        for (l, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % self.heads != 0 {
                return Err(HrtError::Config(format!(
                    "dims[{l}] = {d} not divisible by heads = {}",
                    self.heads
                )));
            }
        }
        let stride = 1usize << (self.levels - 1);
        if self.max_len == 0 || self.max_len % stride != 0 {
            return Err(HrtError::Config(format!(
                "max_len = {} must be a positive multiple of 2^(L-1) = {stride}",
                self.max_len
            )));
        }
        if self.vocab_size == 0 {
            return Err(HrtError::Config("vocab_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HrtError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lambda_recon < 0.0 {
            return Err(HrtError::Config("lambda_recon must be >= 0".into()));
        }
        if self.shared_scale_modules && self.dims.iter().any(|&d| d != self.dims[0]) {
            return Err(HrtError::Config(
                "shared_scale_modules requires a uniform width schedule".into(),
            ));
        }
        Ok(())
    }

    /// The chunk width actually used for self-attention over a sequence of
    /// length `len`: full attention when unlimited or when the sequence
    /// fits in one chunk.
    pub fn chunk_width(&self, len: usize) -> usize {
        if self.attn_chunk == 0 || self.attn_chunk >= len {
            len
        } else {
            self.attn_chunk
        }
    }
}

impl Default for HrtConfig {
    fn default() -> Self {
        let levels = 3;
        HrtConfig {
            vocab_size: 32,
            max_len: 128,
            levels,
            dims: Self::default_dims(16, levels),
            heads: 4,
            blocks_per_level: 2,
            reduction: ReductionKind::Wavelet,
            cross_resolution: true,
            shared_scale_modules: false,
            readout: ReadoutKind::Coarsest,
            lambda_recon: 0.1,
            dropout: 0.1,
            seed: 0,
            attn_chunk: 128,
        }
    }
}
