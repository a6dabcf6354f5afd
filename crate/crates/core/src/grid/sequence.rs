use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PackLayout, TokenKind};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Global,
    Patch,
    Summary,
    PaddedPatch,
}

impl TokenRole {
    pub const ALL: [TokenRole; 4] = [TokenRole::Global, TokenRole::Patch, TokenRole::Summary, TokenRole::PaddedPatch];

    pub fn index(self) -> usize {
        match self {
            TokenRole::Global => 0,
            TokenRole::Patch => 1,
            TokenRole::Summary => 2,
            TokenRole::PaddedPatch => 3,
        }
    }
}

/// `[global, pack 0 patches.., summary 0, pack 1 patches.., summary 1, ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub layout: PackLayout,
    pub embeddings: Matrix,
    pub roles: Vec<TokenRole>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Per-token validity as seen by the attention mask: only padded patches are invalid.
    pub fn key_validity(&self) -> Vec<bool> {
        self.roles.iter().map(|&r| r != TokenRole::PaddedPatch).collect()
    }

    /// Grid validity bitmap reconstructed from the roles.
    pub fn cell_validity(&self) -> Vec<bool> {
        let l = &self.layout;
        let mut valid = vec![false; l.height() * l.width()];
        for (t, role) in self.roles.iter().enumerate() {
            if *role == TokenRole::Patch {
                let (i, j) = l.token_to_coord(t).expect("patch token");
                valid[i * l.width() + j] = true;
            }
        }
        valid
    }

    pub fn with_embeddings(&self, embeddings: Matrix) -> Result<Self> {
        if embeddings.shape() != self.embeddings.shape() {
            return Err(Error::Shape("replacement embeddings".into()));
        }
        Ok(Self { layout: self.layout, embeddings, roles: self.roles.clone() })
    }
}

/// Token roles for a layout with the given cell validity (row-major over the grid).
pub fn roles_for(layout: &PackLayout, cell_valid: &[bool]) -> Vec<TokenRole> {
    (0..layout.seq_len())
        .map(|t| match layout.kind_unchecked(t) {
            TokenKind::Global => TokenRole::Global,
            TokenKind::Summary { .. } => TokenRole::Summary,
            TokenKind::Patch { .. } => {
                let (i, j) = layout.token_to_coord(t).expect("patch token");
                if cell_valid[i * layout.width() + j] {
                    TokenRole::Patch
                } else {
                    TokenRole::PaddedPatch
                }
            }
        })
        .collect()
}

pub fn assemble_sequence(
    grid: &FeatureGrid,
    layout: &PackLayout,
    summaries: &Matrix,
    global: &[f64],
) -> Result<TokenSequence> {
    let dim = grid.dim();
    if grid.height() != layout.height() || grid.width() != layout.width() {
        return Err(Error::Shape(format!(
            "grid {}x{} against layout {}x{}",
            grid.height(),
            grid.width(),
            layout.height(),
            layout.width()
        )));
    }
    if summaries.shape() != (layout.pack_count(), dim) {
        return Err(Error::Shape(format!(
            "summaries {:?}, expected ({}, {dim})",
            summaries.shape(),
            layout.pack_count()
        )));
    }
    if global.len() != dim {
        return Err(Error::Shape(format!("global token of length {}, expected {dim}", global.len())));
    }
    let mut embeddings = Matrix::zeros(layout.seq_len(), dim);
    embeddings.row_mut(0).copy_from_slice(global);
    for i in 0..grid.height() {
        for j in 0..grid.width() {
            let t = layout.coord_to_token(i, j)?;
            embeddings.row_mut(t).copy_from_slice(grid.feature(i, j));
        }
    }
    for m in 0..layout.pack_count() {
        let t = layout.summary_token_index(m)?;
        embeddings.row_mut(t).copy_from_slice(summaries.row(m));
    }
    let roles = roles_for(layout, grid.validity());
    Ok(TokenSequence { layout: *layout, embeddings, roles })
}
