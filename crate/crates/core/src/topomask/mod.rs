//! The hierarchical sparse attention mask.
//!
//! A query may attend to a key when:
//! 1. the key is the global token (global sink),
//! 2. both are patches of the same pack (intra-pack dense),
//! 3. the query is a summary and the key a patch of its pack (aggregation),
//! 4. both are summaries (summary-level interaction).
//!
//! Everything else is blocked. Patches never see summaries, and the global
//! token as a query sees only itself.

mod descriptor;

pub use descriptor::{Block, IndexSet, TopoMaskDescriptor};

use serde::Serialize;

use crate::grid::{PackLayout, TokenKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MaskRule {
    GlobalSink,
    IntraPack,
    Aggregation,
    SummaryLevel,
}

/// First rule admitting `(query, key)`, or `None` when blocked.
pub fn mask_rule(layout: &PackLayout, query: usize, key: usize) -> Option<MaskRule> {
    let n = layout.seq_len();
    if query >= n || key >= n {
        return None;
    }
    if key == 0 {
        return Some(MaskRule::GlobalSink);
    }
    match (layout.kind_unchecked(query), layout.kind_unchecked(key)) {
        (TokenKind::Patch { pack: a, .. }, TokenKind::Patch { pack: b, .. }) if a == b => Some(MaskRule::IntraPack),
        (TokenKind::Summary { pack: a }, TokenKind::Patch { pack: b, .. }) if a == b => Some(MaskRule::Aggregation),
        (TokenKind::Summary { .. }, TokenKind::Summary { .. }) => Some(MaskRule::SummaryLevel),
        _ => None,
    }
}

pub fn mask_entry(layout: &PackLayout, query: usize, key: usize) -> bool {
    mask_rule(layout, query, key).is_some()
}

/// `mask_entry` with padding overrides: padded keys are blocked everywhere and
/// padded queries see only the global token.
pub fn mask_entry_with_validity(layout: &PackLayout, key_valid: &[bool], query: usize, key: usize) -> bool {
    if key >= key_valid.len() || query >= key_valid.len() {
        return false;
    }
    if !key_valid[query] {
        return key == 0;
    }
    key_valid[key] && mask_entry(layout, query, key)
}

/// Allowed entries for `packs` unpadded packs of side `k`: `M(k²+1)² + M² + 1`.
pub fn allowed_count(packs: u64, k: u64) -> u64 {
    let per_pack = k * k + 1;
    packs * per_pack * per_pack + packs * packs + 1
}

pub fn seq_len(packs: u64, k: u64) -> u64 {
    1 + packs * (k * k + 1)
}

pub fn sparsity_ratio(packs: u64, k: u64) -> f64 {
    let n = seq_len(packs, k) as f64;
    allowed_count(packs, k) as f64 / (n * n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskStats {
    #[serde(rename = "M")]
    pub packs: u64,
    pub k: u64,
    #[serde(rename = "N")]
    pub seq_len: u64,
    pub allowed: u64,
    pub dense: u64,
    pub ratio: f64,
}

impl MaskStats {
    pub fn new(packs: u64, k: u64) -> Self {
        let n = seq_len(packs, k);
        Self { packs, k, seq_len: n, allowed: allowed_count(packs, k), dense: n * n, ratio: sparsity_ratio(packs, k) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopEstimate {
    pub sparse: u64,
    pub dense: u64,
    pub ratio: f64,
}

/// `4·d` flops per attended entry: one multiply-add pass for scores and one for values.
pub fn flop_estimate(layout: &PackLayout, head_dim: u64) -> FlopEstimate {
    let (m, k) = (layout.pack_count() as u64, layout.k() as u64);
    let n = seq_len(m, k);
    let sparse = 4 * head_dim * allowed_count(m, k);
    let dense = 4 * head_dim * n * n;
    FlopEstimate { sparse, dense, ratio: sparse as f64 / dense as f64 }
}
