//! Stand-in for a frozen patch encoder: a seeded linear map on an 8×8 mean-pooled raster.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{assemble_sequence, pad_grid, FeatureGrid, PackLayout, TokenSequence};
use crate::numerics::Matrix;

pub const POOL_SIDE: usize = 8;

/// Channel-major image region, `data[c][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RegionImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} pixels for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sub-rectangle clipped to the image bounds.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> RegionImage {
        let y1 = (y0 + height).min(self.height);
        let x1 = (x0 + width).min(self.width);
        let (h, w) = (y1.saturating_sub(y0), x1.saturating_sub(x0));
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y1 {
                for x in x0..x1 {
                    data.push(self.pixel(c, y, x));
                }
            }
        }
        RegionImage { channels: self.channels, height: h, width: w, data }
    }

    pub fn is_empty(&self) -> bool {
        self.channels == 0 || self.height == 0 || self.width == 0
    }

    /// Mean pooling to `POOL_SIDE × POOL_SIDE` per channel. Bin `a` covers source
    /// rows `[a·h/8, max((a+1)·h/8, a·h/8 + 1))`, so small regions repeat pixels.
    pub fn pooled(&self) -> Vec<f64> {
        let bins = |len: usize, a: usize| {
            let start = a * len / POOL_SIDE;
            let end = ((a + 1) * len / POOL_SIDE).max(start + 1).min(len);
            start..end
        };
        let mut out = Vec::with_capacity(self.channels * POOL_SIDE * POOL_SIDE);
        for c in 0..self.channels {
            for a in 0..POOL_SIDE {
                for b in 0..POOL_SIDE {
                    let (ys, xs) = (bins(self.height, a), bins(self.width, b));
                    let count = (ys.len() * xs.len()) as f64;
                    let mut total = 0.0;
                    for y in ys {
                        for x in xs.clone() {
                            total += self.pixel(c, y, x);
                        }
                    }
                    out.push(total / count);
                }
            }
        }
        out
    }
}

/// Deterministic seeded linear encoder shared by patches, pack regions and whole slides.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPatchEncoder {
    channels: usize,
    weights: Matrix,
}

impl ToyPatchEncoder {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(Error::InvalidArgument("toy encoder needs channels >= 1 and dim >= 1".into()));
        }
        let inputs = channels * POOL_SIDE * POOL_SIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Matrix::randn(dim, inputs, 1.0 / (inputs as f64).sqrt(), &mut rng);
        Ok(Self { channels, weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn encode(&self, region: &RegionImage) -> Result<Vec<f64>> {
        if region.is_empty() {
            return Err(Error::EmptyRegion);
        }
        if region.channels != self.channels {
            return Err(Error::Shape(format!(
                "{}-channel region for a {}-channel encoder",
                region.channels, self.channels
            )));
        }
        let pooled = region.pooled();
        Ok((0..self.weights.rows()).map(|r| crate::numerics::dot(self.weights.row(r), &pooled)).collect())
    }
}

/// Encodes a slide image tiled into `patch_px`-sized patches: one feature per
/// patch, one summary per pack from the pack's image region, one global vector
/// from the whole image. The grid is padded to a multiple of `k`; tiles that fall
/// outside the image are padding.
pub fn encode_slide(
    image: &RegionImage,
    patch_px: usize,
    k: usize,
    encoder: &ToyPatchEncoder,
) -> Result<(FeatureGrid, PackLayout, Matrix, Vec<f64>)> {
    if patch_px == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if image.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let (rows, cols) = (image.height.div_ceil(patch_px), image.width.div_ceil(patch_px));
    let dim = encoder.dim();
    let mut features = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        for j in 0..cols {
            features.extend(encoder.encode(&image.crop(i * patch_px, j * patch_px, patch_px, patch_px))?);
        }
    }
    let grid = pad_grid(&FeatureGrid::from_features(rows, cols, dim, features)?, k)?;
    let layout = PackLayout::new(grid.height(), grid.width(), k)?;
    let mut summaries = Matrix::zeros(layout.pack_count(), dim);
    let span = k * patch_px;
    for m in 0..layout.pack_count() {
        let (r0, c0) = layout.pack_origin(m)?;
        let region = image.crop(r0 * patch_px, c0 * patch_px, span, span);
        summaries.row_mut(m).copy_from_slice(&encoder.encode(&region)?);
    }
    let global = encoder.encode(image)?;
    Ok((grid, layout, summaries, global))
}

/// Feature-only fallback: summary = mean of the pack's valid patches, global =
/// mean of all valid patches. A pack with no valid patch gets a zero summary.
pub fn mean_pool_summaries(grid: &FeatureGrid, layout: &PackLayout) -> Result<(Matrix, Vec<f64>)> {
    if grid.height() != layout.height() || grid.width() != layout.width() {
        return Err(Error::Shape("grid and layout disagree".into()));
    }
    if grid.valid_count() == 0 {
        return Err(Error::EmptyRegion);
    }
    let dim = grid.dim();
    let k = layout.k();
    let mut summaries = Matrix::zeros(layout.pack_count(), dim);
    let mut global = vec![0.0; dim];
    for m in 0..layout.pack_count() {
        let (r0, c0) = layout.pack_origin(m)?;
        let mut count = 0usize;
        let row = summaries.row_mut(m);
        for i in r0..r0 + k {
            for j in c0..c0 + k {
                if grid.is_valid(i, j) {
                    count += 1;
                    for ((s, g), &f) in row.iter_mut().zip(global.iter_mut()).zip(grid.feature(i, j)) {
                        *s += f;
                        *g += f;
                    }
                }
            }
        }
        if count > 0 {
            row.iter_mut().for_each(|s| *s /= count as f64);
        }
    }
    let total = grid.valid_count() as f64;
    global.iter_mut().for_each(|g| *g /= total);
    Ok((summaries, global))
}

/// Pads `grid` to multiples of `k` and assembles the token sequence with
/// mean-pooled summary and global tokens.
pub fn feature_sequence(grid: &FeatureGrid, k: usize) -> Result<TokenSequence> {
    let grid = pad_grid(grid, k)?;
    let layout = PackLayout::new(grid.height(), grid.width(), k)?;
    let (summaries, global) = mean_pool_summaries(&grid, &layout)?;
    assemble_sequence(&grid, &layout, &summaries, &global)
}
