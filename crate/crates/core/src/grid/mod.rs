//! Patch-feature grids, the pack layout over them, and the assembled token sequence.

mod fgrid;
mod layout;
mod sequence;

pub use fgrid::{read_fgrid, write_fgrid, FGRID_MAGIC, FGRID_VERSION};
pub use layout::{build_layout, PackLayout, TokenKind};
pub use sequence::{assemble_sequence, TokenRole, TokenSequence};

use crate::error::{Error, Result};

/// H×W grid of D-dimensional patch embeddings with a validity bitmap.
///
/// Invalid cells always carry zero features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    features: Vec<f64>,
    valid: Vec<bool>,
    raw_height: usize,
    raw_width: usize,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, features: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let cells = height * width;
        if features.len() != cells * dim {
            return Err(Error::Shape(format!(
                "{} feature values for a {height}x{width}x{dim} grid",
                features.len()
            )));
        }
        if valid.len() != cells {
            return Err(Error::Shape(format!("{} validity bits for {cells} cells", valid.len())));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite feature at flat index {pos}")));
        }
        for (c, &ok) in valid.iter().enumerate() {
            if !ok && features[c * dim..(c + 1) * dim].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidArgument(format!("invalid cell {c} has non-zero features")));
            }
        }
        Ok(Self { height, width, dim, features, valid, raw_height: height, raw_width: width })
    }

    /// All cells valid.
    pub fn from_features(height: usize, width: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        Self::new(height, width, dim, features, vec![true; height * width])
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            features: vec![0.0; height * width * dim],
            valid: vec![true; height * width],
            raw_height: height,
            raw_width: width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid size before any padding.
    pub fn raw_size(&self) -> (usize, usize) {
        (self.raw_height, self.raw_width)
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn feature(&self, i: usize, j: usize) -> &[f64] {
        let c = i * self.width + j;
        &self.features[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cell_feature(&self, cell: usize) -> &[f64] {
        &self.features[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Replaces the features of a valid cell.
    pub fn set_feature(&mut self, i: usize, j: usize, value: &[f64]) -> Result<()> {
        if i >= self.height || j >= self.width {
            return Err(Error::OutOfRange(format!("cell ({i}, {j})")));
        }
        if value.len() != self.dim || value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature must be finite with length D".into()));
        }
        let c = i * self.width + j;
        if !self.valid[c] {
            return Err(Error::InvalidArgument(format!("cell ({i}, {j}) is padding")));
        }
        self.features[c * self.dim..(c + 1) * self.dim].copy_from_slice(value);
        Ok(())
    }
}

/// Rounds H and W up to multiples of `k` with zero-featured, invalid cells.
pub fn pad_grid(grid: &FeatureGrid, k: usize) -> Result<FeatureGrid> {
    if k == 0 {
        return Err(Error::InvalidArgument("pack side k must be at least 1".into()));
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(Error::InvalidArgument("grid must have at least one cell".into()));
    }
    let height = grid.height.div_ceil(k) * k;
    let width = grid.width.div_ceil(k) * k;
    let dim = grid.dim;
    let mut features = vec![0.0; height * width * dim];
    let mut valid = vec![false; height * width];
    for i in 0..grid.height {
        for j in 0..grid.width {
            let dst = i * width + j;
            features[dst * dim..(dst + 1) * dim].copy_from_slice(grid.feature(i, j));
            valid[dst] = grid.is_valid(i, j);
        }
    }
    Ok(FeatureGrid {
        height,
        width,
        dim,
        features,
        valid,
        raw_height: grid.raw_height,
        raw_width: grid.raw_width,
    })
}
