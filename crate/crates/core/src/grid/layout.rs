use std::ops::Range;

use crate::error::{Error, Result};

/// What a token index denotes under a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Global,
    /// Patch at `offset` (row-major within the k×k window) of pack `pack`.
    Patch { pack: usize, offset: usize },
    Summary { pack: usize },
}

/// Mapping between grid cells, packs and positions in the token sequence.
///
/// Token 0 is the global token. Pack `m` occupies `[1 + m(k²+1), (m+1)(k²+1)]`
/// with its k² patches first (row-major within the window) and its summary last.
/// Packs are numbered row-major over the pack grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PackLayout {
    height: usize,
    width: usize,
    k: usize,
}

pub fn build_layout(height: usize, width: usize, k: usize) -> Result<PackLayout> {
    PackLayout::new(height, width, k)
}

impl PackLayout {
    pub fn new(height: usize, width: usize, k: usize) -> Result<Self> {
        if k == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "layout needs positive dims, got {height}x{width} with k={k}"
            )));
        }
        if !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::PadFirst { height, width, k });
        }
        Ok(Self { height, width, k })
    }

    /// A single row of `packs` packs.
    pub fn strip(packs: usize, k: usize) -> Result<Self> {
        Self::new(k, packs * k, k)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pack_rows(&self) -> usize {
        self.height / self.k
    }

    pub fn pack_cols(&self) -> usize {
        self.width / self.k
    }

    pub fn pack_count(&self) -> usize {
        self.pack_rows() * self.pack_cols()
    }

    pub fn patches_per_pack(&self) -> usize {
        self.k * self.k
    }

    pub fn tokens_per_pack(&self) -> usize {
        self.k * self.k + 1
    }

    pub fn seq_len(&self) -> usize {
        1 + self.pack_count() * self.tokens_per_pack()
    }

    pub fn global_token_index(&self) -> usize {
        0
    }

    pub fn summary_token_index(&self, pack: usize) -> Result<usize> {
        self.check_pack(pack)?;
        Ok((pack + 1) * self.tokens_per_pack())
    }

    pub fn summary_indices(&self) -> Vec<usize> {
        (0..self.pack_count()).map(|m| (m + 1) * self.tokens_per_pack()).collect()
    }

    /// Token indices of pack `m`'s patches.
    pub fn patch_range(&self, pack: usize) -> Result<Range<usize>> {
        self.check_pack(pack)?;
        let start = 1 + pack * self.tokens_per_pack();
        Ok(start..start + self.patches_per_pack())
    }

    /// Grid coordinate of pack `m`'s top-left cell.
    pub fn pack_origin(&self, pack: usize) -> Result<(usize, usize)> {
        self.check_pack(pack)?;
        Ok(((pack / self.pack_cols()) * self.k, (pack % self.pack_cols()) * self.k))
    }

    pub fn coord_to_token(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.height || j >= self.width {
            return Err(Error::OutOfRange(format!(
                "cell ({i}, {j}) outside {}x{}",
                self.height, self.width
            )));
        }
        let pack = (i / self.k) * self.pack_cols() + j / self.k;
        let offset = (i % self.k) * self.k + j % self.k;
        Ok(1 + pack * self.tokens_per_pack() + offset)
    }

    /// Inverse of `coord_to_token`; errors for global and summary tokens.
    pub fn token_to_coord(&self, token: usize) -> Result<(usize, usize)> {
        match self.kind(token)? {
            TokenKind::Patch { pack, offset } => {
                let (r0, c0) = self.pack_origin(pack)?;
                Ok((r0 + offset / self.k, c0 + offset % self.k))
            }
            other => Err(Error::InvalidArgument(format!("token {token} is {other:?}, not a patch"))),
        }
    }

    pub fn kind(&self, token: usize) -> Result<TokenKind> {
        if token >= self.seq_len() {
            return Err(Error::OutOfRange(format!("token {token} of {}", self.seq_len())));
        }
        Ok(self.kind_unchecked(token))
    }

    #[inline]
    pub(crate) fn kind_unchecked(&self, token: usize) -> TokenKind {
        if token == 0 {
            return TokenKind::Global;
        }
        let t = token - 1;
        let pack = t / self.tokens_per_pack();
        let offset = t % self.tokens_per_pack();
        if offset == self.patches_per_pack() {
            TokenKind::Summary { pack }
        } else {
            TokenKind::Patch { pack, offset }
        }
    }

    /// Pack of a patch or summary token; `None` for the global token.
    pub fn pack_of(&self, token: usize) -> Option<usize> {
        match self.kind(token).ok()? {
            TokenKind::Global => None,
            TokenKind::Patch { pack, .. } | TokenKind::Summary { pack } => Some(pack),
        }
    }

    fn check_pack(&self, pack: usize) -> Result<()> {
        if pack >= self.pack_count() {
            return Err(Error::OutOfRange(format!("pack {pack} of {}", self.pack_count())));
        }
        Ok(())
    }
}
