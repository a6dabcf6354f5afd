use std::ops::Range;
use std::sync::Arc;

use crate::grid::{PackLayout, TokenKind};
use crate::numerics::RowPattern;
use crate::topomask::MaskRule;

/// Token indices, either contiguous or listed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IndexSet {
    Range(Range<usize>),
    List(Arc<[usize]>),
}

impl IndexSet {
    pub fn len(&self) -> usize {
        match self {
            IndexSet::Range(r) => r.len(),
            IndexSet::List(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            IndexSet::Range(r) => r.contains(&i),
            IndexSet::List(l) => l.binary_search(&i).is_ok(),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            IndexSet::Range(r) => Box::new(r.clone()),
            IndexSet::List(l) => Box::new(l.iter().copied()),
        }
    }

    fn from_sorted(indices: Vec<usize>) -> Self {
        if let (Some(&first), Some(&last)) = (indices.first(), indices.last()) {
            if last + 1 - first == indices.len() {
                return IndexSet::Range(first..last + 1);
            }
        }
        IndexSet::List(indices.into())
    }
}

/// A dense rectangle of allowed entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub queries: IndexSet,
    pub keys: IndexSet,
    pub rule: MaskRule,
}

impl Block {
    pub fn entry_count(&self) -> usize {
        self.queries.len() * self.keys.len()
    }
}

/// Block decomposition of the mask for one layout and validity pattern.
///
/// Block order: the global-sink column, then one intra-pack block per pack,
/// one aggregation row per pack, and finally the summary-summary block.
#[derive(Clone, Debug)]
pub struct TopoMaskDescriptor {
    layout: PackLayout,
    key_valid: Vec<bool>,
    blocks: Vec<Block>,
}

impl TopoMaskDescriptor {
    /// `key_valid[t]` is false only for padded patch tokens.
    pub fn new(layout: &PackLayout, key_valid: &[bool]) -> crate::Result<Self> {
        let n = layout.seq_len();
        if key_valid.len() != n {
            return Err(crate::Error::Shape(format!("{} validity flags for {n} tokens", key_valid.len())));
        }
        for (t, &ok) in key_valid.iter().enumerate() {
            if !ok && !matches!(layout.kind_unchecked(t), TokenKind::Patch { .. }) {
                return Err(crate::Error::InvalidArgument(format!("token {t} is not a patch and cannot be padding")));
            }
        }
        let m = layout.pack_count();
        let mut blocks = Vec::with_capacity(2 * m + 2);
        blocks.push(Block { queries: IndexSet::Range(0..n), keys: IndexSet::Range(0..1), rule: MaskRule::GlobalSink });
        let mut patch_sets = Vec::with_capacity(m);
        for pack in 0..m {
            let range = layout.patch_range(pack)?;
            let set = IndexSet::from_sorted(range.filter(|&t| key_valid[t]).collect());
            blocks.push(Block { queries: set.clone(), keys: set.clone(), rule: MaskRule::IntraPack });
            patch_sets.push(set);
        }
        for (pack, set) in patch_sets.into_iter().enumerate() {
            let s = layout.summary_token_index(pack)?;
            blocks.push(Block { queries: IndexSet::Range(s..s + 1), keys: set, rule: MaskRule::Aggregation });
        }
        let summaries: Arc<[usize]> = layout.summary_indices().into();
        blocks.push(Block {
            queries: IndexSet::List(summaries.clone()),
            keys: IndexSet::List(summaries),
            rule: MaskRule::SummaryLevel,
        });
        Ok(Self { layout: *layout, key_valid: key_valid.to_vec(), blocks })
    }

    pub fn unpadded(layout: &PackLayout) -> Self {
        Self::new(layout, &vec![true; layout.seq_len()]).expect("all-valid flags match the layout")
    }

    pub fn layout(&self) -> &PackLayout {
        &self.layout
    }

    pub fn seq_len(&self) -> usize {
        self.layout.seq_len()
    }

    pub fn key_validity(&self) -> &[bool] {
        &self.key_valid
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Indices into `blocks()` covering query row `i`, in fixed order.
    pub fn row_blocks(&self, i: usize) -> impl Iterator<Item = &Block> {
        let m = self.layout.pack_count();
        let mut ids = [0usize, usize::MAX, usize::MAX];
        if self.key_valid[i] {
            match self.layout.kind_unchecked(i) {
                TokenKind::Global => {}
                TokenKind::Patch { pack, .. } => ids[1] = 1 + pack,
                TokenKind::Summary { pack } => {
                    ids[1] = 1 + m + pack;
                    ids[2] = 1 + 2 * m;
                }
            }
        }
        ids.into_iter().filter(|&b| b != usize::MAX).map(move |b| &self.blocks[b])
    }

    pub fn allowed_entries(&self) -> usize {
        self.blocks.iter().map(Block::entry_count).sum()
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        i < self.seq_len() && self.row_blocks(i).any(|b| b.keys.contains(j))
    }

    /// Every allowed `(query, key)` pair, block by block.
    pub fn expand(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.allowed_entries());
        for b in &self.blocks {
            for q in b.queries.iter() {
                out.extend(b.keys.iter().map(|k| (q, k)));
            }
        }
        out
    }

    /// Allowed keys per query row, in the row's block order.
    pub fn row_pattern(&self) -> RowPattern {
        let rows: Vec<Vec<usize>> = (0..self.seq_len())
            .map(|i| self.row_blocks(i).flat_map(|b| b.keys.iter()).collect())
            .collect();
        RowPattern::from_rows(&rows, self.seq_len()).expect("global sink keeps every row non-empty")
    }
}
