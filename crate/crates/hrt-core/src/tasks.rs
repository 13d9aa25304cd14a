//! Synthetic task generation: desk-scale analogs of the benchmark
//! categories. Every generator is a pure function of (spec, seed) and every
//! sample's target is reproducible by an independent oracle.
//!
//! Vocabulary conventions per task:
//! - copy/reverse: 0 = pad, 1 = bos, symbols 2..vocab.
//! - listops_mini: 0 pad, 1 `[`, 2 `]`, 3 MAX, 4 MIN, 5 MED, 6 SM
//!   (sum mod 10), 7..=16 digits 0-9; the label is the digit token id.
//! - char_lm: byte ids 0..=255, 256 = MASK (vocab 257).
//! - hier_parity: bit tokens 0/1; label is the parity bit's token id.

use crate::error::{HrtError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ListopsMini,
    CharLm,
    HierParity,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ListopsMini => "listops_mini",
            TaskKind::CharLm => "char_lm",
            TaskKind::HierParity => "hier_parity",
        }
    }

    /// Whether targets are per-token (vs one label per sequence).
    pub fn token_level(self) -> bool {
        matches!(self, TaskKind::Copy | TaskKind::Reverse | TaskKind::CharLm)
    }

    /// Vocabulary the model must be configured with.
    pub fn vocab_size(self, spec_vocab: usize) -> usize {
        match self {
            TaskKind::Copy | TaskKind::Reverse => spec_vocab,
            TaskKind::ListopsMini => 17,
            TaskKind::CharLm => 257,
            TaskKind::HierParity => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Symbol-task vocabulary (copy/reverse); fixed-vocab tasks ignore it.
    pub vocab_size: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    /// listops: maximum nesting depth (<= 4).
    pub listops_depth: usize,
    /// char_lm: fraction of positions masked.
    pub mask_fraction: f64,
    /// hier_parity: positions per block (odd so majorities are unambiguous).
    pub block_size: usize,
    pub num_blocks: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 12,
            seq_len: 16,
            batch_size: 8,
            listops_depth: 2,
            mask_fraction: 0.15,
            block_size: 5,
            num_blocks: 4,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(HrtError::Config("task: empty batch or sequence".into()));
        }
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse if self.vocab_size < 3 => Err(HrtError::Config(
                "copy/reverse need vocab >= 3 (pad, bos, symbols)".into(),
            )),
            TaskKind::ListopsMini if self.listops_depth > 4 => {
                Err(HrtError::Config("listops depth must be <= 4".into()))
            }
            TaskKind::CharLm if !(0.0..1.0).contains(&self.mask_fraction) => {
                Err(HrtError::Config("mask_fraction must be in [0, 1)".into()))
            }
            TaskKind::HierParity if self.block_size % 2 == 0 => {
                Err(HrtError::Config("hier_parity block_size must be odd".into()))
            }
            TaskKind::HierParity if self.block_size * self.num_blocks != self.seq_len => {
                Err(HrtError::Config(
                    "hier_parity: seq_len must equal block_size * num_blocks".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Targets are either one id per token position (with a loss mask) or one
/// label per sequence. Labels are expressed as token ids so the same
/// vocab-sized heads serve both.
#[derive(Debug, Clone)]
pub enum Targets {
    Tokens {
        targets: Vec<Vec<usize>>,
        loss_mask: Vec<Vec<bool>>,
    },
    Labels(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub kind: TaskKind,
    pub tokens: Vec<Vec<usize>>,
    pub targets: Targets,
}

// listops token ids.
pub const LO_OPEN: usize = 1;
pub const LO_CLOSE: usize = 2;
pub const LO_MAX: usize = 3;
pub const LO_MIN: usize = 4;
pub const LO_MED: usize = 5;
pub const LO_SM: usize = 6;
pub const LO_DIGIT0: usize = 7;

pub const CHAR_MASK: usize = 256;

/// Generates one batch. `corpus` is required for char_lm (the split's byte
/// range) and ignored otherwise.
pub fn gen_batch(spec: &TaskSpec, seed: u64, corpus: Option<&[u8]>) -> Result<TaskBatch> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match spec.kind {
        TaskKind::Copy | TaskKind::Reverse => gen_symbols(spec, &mut rng),
        TaskKind::ListopsMini => gen_listops(spec, &mut rng),
        TaskKind::CharLm => {
            let corpus = corpus
                .ok_or_else(|| HrtError::Input("char_lm requires a corpus".into()))?;
            gen_char_lm(spec, corpus, &mut rng)
        }
        TaskKind::HierParity => gen_hier_parity(spec, &mut rng),
    }
}

fn gen_symbols(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> Result<TaskBatch> {
    let mut tokens = Vec::with_capacity(spec.batch_size);
    let mut targets = Vec::with_capacity(spec.batch_size);
    let mut masks = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let seq: Vec<usize> = (0..spec.seq_len)
            .map(|_| rng.random_range(2..spec.vocab_size))
            .collect();
        let tgt = match spec.kind {
            TaskKind::Copy => seq.clone(),
            TaskKind::Reverse => seq.iter().rev().copied().collect(),
            _ => unreachable!(),
        };
        masks.push(vec![true; spec.seq_len]);
        tokens.push(seq);
        targets.push(tgt);
    }
    Ok(TaskBatch {
        kind: spec.kind,
        tokens,
        targets: Targets::Tokens {
            targets,
            loss_mask: masks,
        },
    })
}

#[derive(Debug)]
enum ListopsNode {
    Digit(u8),
    Op(usize, Vec<ListopsNode>),
}

fn gen_tree(depth_left: usize, rng: &mut ChaCha20Rng) -> ListopsNode {
    if depth_left == 0 || rng.random_range(0..4) == 0 {
        return ListopsNode::Digit(rng.random_range(0..10));
    }
    let op = [LO_MAX, LO_MIN, LO_MED, LO_SM][rng.random_range(0..4)];
    // Odd arity so MED is a strict middle element.
    let arity = [3, 3, 5][rng.random_range(0..3)];
    let children = (0..arity).map(|_| gen_tree(depth_left - 1, rng)).collect();
    ListopsNode::Op(op, children)
}

fn tree_value(node: &ListopsNode) -> u8 {
    match node {
        ListopsNode::Digit(d) => *d,
        ListopsNode::Op(op, children) => {
            let mut vals: Vec<u8> = children.iter().map(tree_value).collect();
            match *op {
                LO_MAX => *vals.iter().max().unwrap(),
                LO_MIN => *vals.iter().min().unwrap(),
                LO_MED => {
                    vals.sort_unstable();
                    vals[vals.len() / 2]
                }
                LO_SM => (vals.iter().map(|&v| v as u32).sum::<u32>() % 10) as u8,
                _ => unreachable!(),
            }
        }
    }
}

fn serialize_tree(node: &ListopsNode, out: &mut Vec<usize>) {
    match node {
        ListopsNode::Digit(d) => out.push(LO_DIGIT0 + *d as usize),
        ListopsNode::Op(op, children) => {
            out.push(LO_OPEN);
            out.push(*op);
            for c in children {
                serialize_tree(c, out);
            }
            out.push(LO_CLOSE);
        }
    }
}

/// Independent oracle: recursively parses a serialized listops token stream
/// and evaluates it (used by tests against `tree_value`, and by consumers
/// that only see tokens).
pub fn eval_listops(tokens: &[usize]) -> Result<u8> {
    fn parse(tokens: &[usize], pos: &mut usize) -> Result<u8> {
        let t = *tokens
            .get(*pos)
            .ok_or_else(|| HrtError::Input("listops: unexpected end".into()))?;
        *pos += 1;
        if (LO_DIGIT0..LO_DIGIT0 + 10).contains(&t) {
            return Ok((t - LO_DIGIT0) as u8);
        }
        if t != LO_OPEN {
            return Err(HrtError::Input(format!("listops: unexpected token {t}")));
        }
        let op = tokens[*pos];
        *pos += 1;
        let mut vals = Vec::new();
        while tokens[*pos] != LO_CLOSE {
            vals.push(parse(tokens, pos)?);
        }
        *pos += 1; // consume close
        Ok(match op {
            LO_MAX => *vals.iter().max().unwrap(),
            LO_MIN => *vals.iter().min().unwrap(),
            LO_MED => {
                vals.sort_unstable();
                vals[vals.len() / 2]
            }
            LO_SM => (vals.iter().map(|&v| v as u32).sum::<u32>() % 10) as u8,
            other => return Err(HrtError::Input(format!("listops: bad operator {other}"))),
        })
    }
    let mut pos = 0;
    let v = parse(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(HrtError::Input("listops: trailing tokens".into()));
    }
    Ok(v)
}

fn gen_listops(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> Result<TaskBatch> {
    let mut tokens = Vec::with_capacity(spec.batch_size);
    let mut labels = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        // Rejection-resample expressions that exceed seq_len (or degenerate
        // single digits, which carry no structure).
        loop {
            let tree = gen_tree(spec.listops_depth, rng);
            if matches!(tree, ListopsNode::Digit(_)) {
                continue;
            }
            let mut seq = Vec::new();
            serialize_tree(&tree, &mut seq);
            if seq.len() > spec.seq_len {
                continue;
            }
            labels.push(LO_DIGIT0 + tree_value(&tree) as usize);
            tokens.push(seq);
            break;
        }
    }
    Ok(TaskBatch {
        kind: TaskKind::ListopsMini,
        tokens,
        targets: Targets::Labels(labels),
    })
}

fn gen_char_lm(spec: &TaskSpec, corpus: &[u8], rng: &mut ChaCha20Rng) -> Result<TaskBatch> {
    if corpus.len() < 10 * spec.seq_len {
        return Err(HrtError::Input(format!(
            "char_lm corpus too small: {} bytes for seq_len {}",
            corpus.len(),
            spec.seq_len
        )));
    }
    let mut tokens = Vec::with_capacity(spec.batch_size);
    let mut targets = Vec::with_capacity(spec.batch_size);
    let mut masks = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let start = rng.random_range(0..corpus.len() - spec.seq_len);
        let window = &corpus[start..start + spec.seq_len];
        let mut seq: Vec<usize> = window.iter().map(|&b| b as usize).collect();
        let mut tgt = vec![0usize; spec.seq_len];
        let mut mask = vec![false; spec.seq_len];
        for i in 0..spec.seq_len {
            if rng.random::<f64>() < spec.mask_fraction {
                tgt[i] = seq[i];
                mask[i] = true;
                seq[i] = CHAR_MASK;
            }
        }
        tokens.push(seq);
        targets.push(tgt);
        masks.push(mask);
    }
    Ok(TaskBatch {
        kind: TaskKind::CharLm,
        tokens,
        targets: Targets::Tokens {
            targets,
            loss_mask: masks,
        },
    })
}

/// Brute-force oracle for hier_parity: parity over blocks of each block's
/// majority bit.
pub fn hier_parity_oracle(bits: &[usize], block_size: usize) -> usize {
    bits.chunks(block_size)
        .map(|b| {
            let ones = b.iter().filter(|&&x| x == 1).count();
            usize::from(ones * 2 > b.len())
        })
        .fold(0, |acc, m| acc ^ m)
}

fn gen_hier_parity(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> Result<TaskBatch> {
    let mut tokens = Vec::with_capacity(spec.batch_size);
    let mut labels = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let bits: Vec<usize> = (0..spec.seq_len).map(|_| rng.random_range(0..2)).collect();
        labels.push(hier_parity_oracle(&bits, spec.block_size));
        tokens.push(bits);
    }
    Ok(TaskBatch {
        kind: TaskKind::HierParity,
        tokens,
        targets: Targets::Labels(labels),
    })
}

/// Disjoint byte ranges of a corpus for train/val/test (80/10/10).
pub fn corpus_splits(corpus: &[u8]) -> (&[u8], &[u8], &[u8]) {
    let n = corpus.len();
    let a = n * 8 / 10;
    let b = n * 9 / 10;
    (&corpus[..a], &corpus[a..b], &corpus[b..])
}

/// Deterministic ~`target_bytes` pseudo-text corpus: seeded word salad with
/// sentence and paragraph structure. Stands in for a bundled public-domain
/// text file so the repository stays small; real text can be supplied via
/// the CLI corpus flag.
pub fn synthetic_corpus(target_bytes: usize) -> Vec<u8> {
    const LEXICON: &[&str] = &[
        "the", "a", "stone", "river", "bridge", "castle", "E", "wind", "morning", "light",
        "tower", "garden", "path", "old", "quiet", "grey", "long", "small", "keeper", "letter",
        "walked", "stood", "carried", "watched", "turned", "opened", "closed", "spoke", "waited",
        "returned", "under", "over", "beside", "through", "toward", "beyond", "between", "into",
        "winter", "summer", "harbor", "market", "lantern", "bell", "road", "field", "forest",
        "north", "south", "voice", "silence", "door", "window", "roof", "wall", "cellar", "attic",
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(0x4852_5431); // "HRT1"
    let mut out = Vec::with_capacity(target_bytes + 64);
    let mut sentence_words = 0usize;
    let mut sentences_in_par = 0usize;
    let mut start_of_sentence = true;
    while out.len() < target_bytes {
        let w = LEXICON[rng.random_range(0..LEXICON.len())];
        if start_of_sentence {
            let mut chars = w.chars();
            if let Some(c) = chars.next() {
                out.extend(c.to_uppercase().to_string().as_bytes());
                out.extend(chars.as_str().as_bytes());
            }
            start_of_sentence = false;
        } else {
            out.push(b' ');
            out.extend(w.as_bytes());
        }
        sentence_words += 1;
        if sentence_words >= rng.random_range(5..14) {
            out.push(b'.');
            sentence_words = 0;
            sentences_in_par += 1;
            start_of_sentence = true;
            if sentences_in_par >= rng.random_range(3..7) {
                out.extend(b"\n\n");
                sentences_in_par = 0;
            } else {
                out.push(b' ');
            }
        }
    }
    out.truncate(target_bytes);
    out
}
