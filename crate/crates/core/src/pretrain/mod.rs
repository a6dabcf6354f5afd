//! Self-supervised pretraining: curriculum-masked feature reconstruction and
//! momentum-contrast alignment of summary tokens.

mod mae;
mod moco;

pub use mae::{mae_reconstruction_loss, sample_mae_mask, MaeMask, MaeModel, MaskPhase};
pub use moco::{infonce_loss, momentum_update, noise_positive, MoCoConfig, MoCoState, MoCoStep};

#[cfg(test)]
mod tests;
