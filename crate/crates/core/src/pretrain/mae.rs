use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Encoder, EncoderBlock, EncoderConfig, InitMode};
use crate::error::{Error, Result};
use crate::grid::{PackLayout, TokenSequence};
use crate::numerics::{Matrix, ParamId, ParamStore, RowPattern, Sgd, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskPhase {
    /// Individual patches; every pack keeps at least one visible patch.
    PatchWise,
    /// Whole packs' patches at once.
    PackWise,
}

impl fmt::Display for MaskPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPhase::PatchWise => "patch",
            MaskPhase::PackWise => "pack",
        })
    }
}

/// Masked patch tokens for one reconstruction step. Summary and global tokens
/// are never masked, nor are padded patches.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeMask {
    pub phase: MaskPhase,
    /// Sorted token indices.
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
    /// Set when the requested ratio could not be met under the per-pack constraint.
    pub clamped: bool,
}

impl MaeMask {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }
}

/// Valid patch tokens of each pack, given the grid's cell validity (row-major).
fn valid_patches(layout: &PackLayout, cell_valid: &[bool]) -> Result<Vec<Vec<usize>>> {
    if cell_valid.len() != layout.height() * layout.width() {
        return Err(Error::Shape(format!(
            "{} validity bits for a {}x{} layout",
            cell_valid.len(),
            layout.height(),
            layout.width()
        )));
    }
    (0..layout.pack_count())
        .map(|m| {
            let range = layout.patch_range(m)?;
            Ok(range
                .filter(|&t| {
                    let (i, j) = layout.token_to_coord(t).expect("patch token");
                    cell_valid[i * layout.width() + j]
                })
                .collect())
        })
        .collect()
}

pub fn sample_mae_mask(
    layout: &PackLayout,
    phase: MaskPhase,
    ratio: f64,
    cell_valid: &[bool],
    seed: u64,
) -> Result<MaeMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let packs = valid_patches(layout, cell_valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = false;
    let mut masked = Vec::new();
    match phase {
        MaskPhase::PatchWise => {
            let maskable: usize = packs.iter().map(Vec::len).sum();
            let capacity: usize = packs.iter().map(|p| p.len().saturating_sub(1)).sum();
            let mut target = (ratio * maskable as f64).floor() as usize;
            if target > capacity {
                log::warn!("patch-wise mask ratio {ratio} clamped: {target} requested, {capacity} allowed");
                target = capacity;
                clamped = true;
            }
            let mut candidates: Vec<(usize, usize)> = packs
                .iter()
                .enumerate()
                .flat_map(|(m, p)| p.iter().map(move |&t| (m, t)))
                .collect();
            candidates.shuffle(&mut rng);
            let mut quota: Vec<usize> = packs.iter().map(|p| p.len().saturating_sub(1)).collect();
            for (m, t) in candidates {
                if masked.len() == target {
                    break;
                }
                // a pick that would empty its pack is rejected
                if quota[m] > 0 {
                    quota[m] -= 1;
                    masked.push(t);
                }
            }
        }
        MaskPhase::PackWise => {
            let mut eligible: Vec<usize> = (0..packs.len()).filter(|&m| !packs[m].is_empty()).collect();
            let mut count = (ratio * layout.pack_count() as f64).floor() as usize;
            if count > eligible.len() {
                count = eligible.len();
                clamped = true;
            }
            eligible.shuffle(&mut rng);
            for &m in &eligible[..count] {
                masked.extend_from_slice(&packs[m]);
            }
        }
    }
    masked.sort_unstable();
    Ok(MaeMask { phase, masked, ratio, seed, clamped })
}

/// Mean squared error over masked tokens and all feature dimensions.
pub fn mae_reconstruction_loss(predicted: &Matrix, target: &Matrix, mask: &MaeMask) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", predicted.shape(), target.shape())));
    }
    if mask.is_empty() {
        return Err(Error::NothingToReconstruct);
    }
    let mut total = 0.0;
    for &t in &mask.masked {
        if t >= predicted.rows() {
            return Err(Error::OutOfRange(format!("masked token {t}")));
        }
        total += predicted.row(t).iter().zip(target.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (mask.len() * predicted.cols()) as f64)
}

/// Encoder plus a learned mask embedding, a one-block masked decoder and a linear head.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub encoder: Encoder,
    mask_token: ParamId,
    decoder: EncoderBlock,
    head_w: ParamId,
    head_b: ParamId,
}

impl MaeModel {
    pub const ENCODER_PREFIX: &'static str = "encoder";

    pub fn init(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        let encoder = Encoder::init(store, Self::ENCODER_PREFIX, config, InitMode::Standard)?;
        Self::init_head(store, encoder)
    }

    /// Reuses an encoder already present in `store` and adds fresh MAE parameters
    /// unless they are there too.
    pub fn attach_or_init(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        let encoder = Encoder::attach(store, Self::ENCODER_PREFIX, config)?;
        if store.id("mae.mask_token").is_some() {
            let decoder = EncoderBlock::attach(store, "mae.decoder")?;
            let get = |n: &str| store.id(n).ok_or_else(|| Error::Format(format!("missing tensor {n}")));
            return Ok(Self {
                encoder,
                mask_token: get("mae.mask_token")?,
                decoder,
                head_w: get("mae.head.w")?,
                head_b: get("mae.head.b")?,
            });
        }
        Self::init_head(store, encoder)
    }

    fn init_head(store: &mut ParamStore, encoder: Encoder) -> Result<Self> {
        let cfg = encoder.config().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_6531);
        let mask_token = store.insert("mae.mask_token", Matrix::randn(1, cfg.dim, 0.02, &mut rng))?;
        let decoder = EncoderBlock::init(store, "mae.decoder", cfg.dim, cfg.ff_dim, InitMode::Standard, &mut rng)?;
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let head_w = store.insert("mae.head.w", Matrix::randn(cfg.dim, cfg.dim, scale, &mut rng))?;
        let head_b = store.insert("mae.head.b", Matrix::zeros(1, cfg.dim))?;
        Ok(Self { encoder, mask_token, decoder, head_w, head_b })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.push(self.mask_token);
        ids.extend(self.decoder.param_ids());
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    /// Predicted N×D features for a masked input.
    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        mask: &MaeMask,
        pattern: &Arc<RowPattern>,
    ) -> Result<Var> {
        let input = tape.constant(seq.embeddings.clone());
        let fill = tape.param(store, self.mask_token);
        let masked = tape.replace_rows(input, &mask.masked, fill)?;
        let hidden = self.encoder.forward_tape(tape, store, seq, masked, pattern)?;
        let decoded = self.decoder.forward(tape, store, hidden, pattern, self.encoder.config().heads)?;
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let out = tape.matmul(decoded, w)?;
        tape.add_row(out, b)
    }

    /// Masked MSE against the unmasked input features.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        mask: &MaeMask,
        pattern: &Arc<RowPattern>,
    ) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::NothingToReconstruct);
        }
        let pred = self.predict_tape(tape, store, seq, mask, pattern)?;
        let picked = tape.gather_rows(pred, &mask.masked)?;
        let target = tape.constant(seq.embeddings.select_rows(&mask.masked));
        let diff = tape.sub(picked, target)?;
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    }

    /// One gradient-descent step; returns the loss before the update.
    pub fn train_step(&self, store: &mut ParamStore, optimizer: &mut Sgd, seq: &TokenSequence, mask: &MaeMask) -> Result<f64> {
        let pattern = Encoder::pattern_for(seq)?;
        let mut tape = Tape::new();
        let loss = self.loss_tape(&mut tape, store, seq, mask, &pattern)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        optimizer.step(store, &grads, &self.param_ids());
        Ok(value)
    }
}
