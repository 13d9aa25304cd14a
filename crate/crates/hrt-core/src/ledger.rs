//! FLOP accounting.
//!
//! Counting conventions (one source of truth, mirrored by
//! [`crate::bench::analytic_cost`]):
//!
//! * one multiply-add = 2 FLOPs, so a matmul of `m x k` by `k x p` costs
//!   `2*m*k*p`;
//! * softmax and layer norm cost 5 FLOPs per element (exp, subtract,
//!   sum-share, divide, amortized max);
//! * other elementwise ops cost 1 FLOP per element.
//!
//! Matmul-family ops are charged to whatever `(category, level)` label is
//! current when they run; everything elementwise (softmax, norms,
//! activations, residual adds, dropout) is charged to
//! [`Category::Other`] regardless of the label. The closed-form cost model
//! in the bench module reproduces the labeled categories exactly and
//! excludes `Other` by definition.

use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    AttnScores,
    AttnMix,
    Projections,
    Ffn,
    Reduction,
    CrossRes,
    Reconstruction,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::AttnScores,
        Category::AttnMix,
        Category::Projections,
        Category::Ffn,
        Category::Reduction,
        Category::CrossRes,
        Category::Reconstruction,
        Category::Other,
    ];

    /// The categories covered by the analytic cost model.
    pub const MODELED: [Category; 7] = [
        Category::AttnScores,
        Category::AttnMix,
        Category::Projections,
        Category::Ffn,
        Category::Reduction,
        Category::CrossRes,
        Category::Reconstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::AttnScores => "attn_scores",
            Category::AttnMix => "attn_mix",
            Category::Projections => "projections",
            Category::Ffn => "ffn",
            Category::Reduction => "reduction",
            Category::CrossRes => "cross_res",
            Category::Reconstruction => "reconstruction",
            Category::Other => "other",
        }
    }
}

/// Accumulated FLOP counts keyed by `(category, level)`. Levels are
/// 1-based; cross-level work is charged to the finer level of the pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostLedger {
    flops: BTreeMap<(Category, usize), u64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: Category, level: usize, flops: u64) {
        *self.flops.entry((category, level)).or_insert(0) += flops;
    }

    pub fn total(&self) -> u64 {
        self.flops.values().sum()
    }

    pub fn category_total(&self, category: Category) -> u64 {
        self.flops
            .iter()
            .filter(|((c, _), _)| *c == category)
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn get(&self, category: Category, level: usize) -> u64 {
        self.flops.get(&(category, level)).copied().unwrap_or(0)
    }

    /// Sum over the categories the analytic model covers (excludes `Other`).
    pub fn modeled_total(&self) -> u64 {
        Category::MODELED
            .iter()
            .map(|&c| self.category_total(c))
            .sum()
    }

    /// Attention score + mix FLOPs, the quantity the scaling gates use.
    pub fn attention_total(&self) -> u64 {
        self.category_total(Category::AttnScores) + self.category_total(Category::AttnMix)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Category, usize, u64)> + '_ {
        self.flops.iter().map(|(&(c, l), &v)| (c, l, v))
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Rc<RefCell<CostLedger>>>> = const { RefCell::new(None) };
    static LABEL: RefCell<(Category, usize)> = const { RefCell::new((Category::Other, 0)) };
}

/// Attaches a ledger to this thread; primitive ops report into it until it
/// is detached. Returns the previously attached ledger, if any.
pub fn attach(ledger: Rc<RefCell<CostLedger>>) -> Option<Rc<RefCell<CostLedger>>> {
    ACTIVE.with(|a| a.borrow_mut().replace(ledger))
}

pub fn detach() -> Option<Rc<RefCell<CostLedger>>> {
    ACTIVE.with(|a| a.borrow_mut().take())
}

/// Sets the label applied to matmul-family ops. Elementwise ops ignore it.
pub fn set_label(category: Category, level: usize) {
    LABEL.with(|l| *l.borrow_mut() = (category, level));
}

pub(crate) fn record_labeled(flops: u64) {
    ACTIVE.with(|a| {
        if let Some(ledger) = a.borrow().as_ref() {
            let (c, l) = LABEL.with(|l| *l.borrow());
            ledger.borrow_mut().add(c, l, flops);
        }
    });
}

pub(crate) fn record_other(flops: u64) {
    ACTIVE.with(|a| {
        if let Some(ledger) = a.borrow().as_ref() {
            let level = LABEL.with(|l| l.borrow().1);
            ledger.borrow_mut().add(Category::Other, level, flops);
        }
    });
}

/// RAII guard that attaches a ledger for a scope.
pub struct LedgerScope {
    prev: Option<Rc<RefCell<CostLedger>>>,
}

impl LedgerScope {
    pub fn new(ledger: Rc<RefCell<CostLedger>>) -> Self {
        let prev = attach(ledger);
        LedgerScope { prev }
    }
}

impl Drop for LedgerScope {
    fn drop(&mut self) {
        detach();
        if let Some(prev) = self.prev.take() {
            attach(prev);
        }
    }
}
