//! Fixed-query cross-attention resampler: any number of summary tokens in,
//! a constant number of output tokens out.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sequence_positional_encoding, EncoderBlock, EncoderOutput, InitMode, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, RowPattern, Sgd, Tape, Var};

#[cfg(test)]
mod tests;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    /// Number of learned queries, and hence of output tokens.
    pub queries: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Cross-attention layers.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Add a 1D sinusoidal encoding of input order to the context.
    pub positional: bool,
    /// Start the output projection at zero.
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            queries: 32,
            input_dim: 16,
            output_dim: 16,
            layers: 2,
            heads: 1,
            ff_dim: 32,
            positional: false,
            zero_init_head: false,
            seed: 0,
        }
    }
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0
            || self.input_dim == 0
            || self.output_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.ff_dim == 0
        {
            return Err(Error::InvalidArgument(format!("resampler sizes must be >= 1: {self:?}")));
        }
        if !self.output_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "output dim {} not divisible by {} heads",
                self.output_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Connector inputs taken from an encoder pass: the summaries, optionally
/// followed by the global token.
pub fn connector_inputs(output: &EncoderOutput, include_global: bool) -> Matrix {
    if include_global {
        output.summaries_with_global()
    } else {
        output.summaries()
    }
}

#[derive(Clone, Debug)]
struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormIds {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{prefix}.gain"), Matrix::filled(1, dim, 1.0))?,
            bias: store.insert(format!("{prefix}.bias"), Matrix::zeros(1, dim))?,
        })
    }

    fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self { gain: lookup(store, &format!("{prefix}.gain"))?, bias: lookup(store, &format!("{prefix}.bias"))? })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
}

/// Learned queries cross-attending to a projected input sequence.
#[derive(Clone, Debug)]
pub struct Resampler {
    config: ResamplerConfig,
    in_w: ParamId,
    in_b: ParamId,
    queries: ParamId,
    context_norms: Vec<LayerNormIds>,
    blocks: Vec<EncoderBlock>,
    out_norm: LayerNormIds,
    head_w: ParamId,
    head_b: ParamId,
}

impl Resampler {
    pub const PREFIX: &'static str = "connector";

    pub fn init(store: &mut ParamStore, config: &ResamplerConfig) -> Result<Self> {
        config.validate()?;
        let p = Self::PREFIX;
        let d = config.output_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let in_w = store.insert(
            format!("{p}.in.w"),
            Matrix::randn(config.input_dim, d, 1.0 / (config.input_dim as f64).sqrt(), &mut rng),
        )?;
        let in_b = store.insert(format!("{p}.in.b"), Matrix::zeros(1, d))?;
        let queries = store.insert(format!("{p}.queries"), Matrix::randn(config.queries, d, 1.0, &mut rng))?;
        let mut context_norms = Vec::with_capacity(config.layers);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            context_norms.push(LayerNormIds::init(store, &format!("{p}.layer{l}.ctx_ln"), d)?);
            blocks.push(EncoderBlock::init(
                store,
                &format!("{p}.layer{l}"),
                d,
                config.ff_dim,
                InitMode::Standard,
                &mut rng,
            )?);
        }
        let out_norm = LayerNormIds::init(store, &format!("{p}.out_ln"), d)?;
        let head = if config.zero_init_head {
            Matrix::zeros(d, d)
        } else {
            Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng)
        };
        let head_w = store.insert(format!("{p}.head.w"), head)?;
        let head_b = store.insert(format!("{p}.head.b"), Matrix::zeros(1, d))?;
        Ok(Self { config: config.clone(), in_w, in_b, queries, context_norms, blocks, out_norm, head_w, head_b })
    }

    pub fn attach(store: &ParamStore, config: &ResamplerConfig) -> Result<Self> {
        config.validate()?;
        let p = Self::PREFIX;
        let in_w = lookup(store, &format!("{p}.in.w"))?;
        if store.get(in_w).shape() != (config.input_dim, config.output_dim) {
            return Err(Error::Shape(format!("{p}.in.w does not match config {config:?}")));
        }
        let queries = lookup(store, &format!("{p}.queries"))?;
        if store.get(queries).rows() != config.queries {
            return Err(Error::Shape(format!("{p}.queries does not match {} queries", config.queries)));
        }
        let mut context_norms = Vec::with_capacity(config.layers);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            context_norms.push(LayerNormIds::attach(store, &format!("{p}.layer{l}.ctx_ln"))?);
            blocks.push(EncoderBlock::attach(store, &format!("{p}.layer{l}"))?);
        }
        Ok(Self {
            config: config.clone(),
            in_w,
            in_b: lookup(store, &format!("{p}.in.b"))?,
            queries,
            context_norms,
            blocks,
            out_norm: LayerNormIds::attach(store, &format!("{p}.out_ln"))?,
            head_w: lookup(store, &format!("{p}.head.w"))?,
            head_b: lookup(store, &format!("{p}.head.b"))?,
        })
    }

    pub fn config(&self) -> &ResamplerConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_w, self.in_b, self.queries];
        for (norm, block) in self.context_norms.iter().zip(&self.blocks) {
            ids.extend([norm.gain, norm.bias]);
            ids.extend(block.param_ids());
        }
        ids.extend([self.out_norm.gain, self.out_norm.bias, self.head_w, self.head_b]);
        ids
    }

    /// Records the pass for an L×D_in input and returns the Q×D_out output.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, inputs: &Matrix) -> Result<Var> {
        if inputs.rows() == 0 {
            return Err(Error::EmptySummarySequence);
        }
        if inputs.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "resampler input has {} columns, expected {}",
                inputs.cols(),
                self.config.input_dim
            )));
        }
        let x = tape.constant(inputs.clone());
        let w = tape.param(store, self.in_w);
        let b = tape.param(store, self.in_b);
        let projected = tape.matmul(x, w)?;
        let mut context = tape.add_row(projected, b)?;
        if self.config.positional {
            let pe = tape.constant(sequence_positional_encoding(inputs.rows(), self.config.output_dim));
            context = tape.add(context, pe)?;
        }
        let pattern = Arc::new(RowPattern::dense(self.config.queries, inputs.rows()));
        let mut q = tape.param(store, self.queries);
        for (norm, block) in self.context_norms.iter().zip(&self.blocks) {
            let c = norm.apply(tape, store, context)?;
            q = block.cross_forward(tape, store, q, c, &pattern, self.config.heads)?;
        }
        let h = self.out_norm.apply(tape, store, q)?;
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let out = tape.matmul(h, hw)?;
        tape.add_row(out, hb)
    }

    /// Squared error between the query-averaged output and `target`, averaged over
    /// channels.
    pub fn pair_loss_tape(&self, tape: &mut Tape, store: &ParamStore, pair: &AlignmentPair) -> Result<Var> {
        if pair.target.len() != self.config.output_dim {
            return Err(Error::Shape(format!(
                "target has {} channels, expected {}",
                pair.target.len(),
                self.config.output_dim
            )));
        }
        let out = self.forward_tape(tape, store, &pair.inputs)?;
        let pooled = tape.mean_rows(out);
        let target = tape.constant(Matrix::row_vector(&pair.target));
        let diff = tape.sub(pooled, target)?;
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    }

    /// Mean pair loss over the corpus.
    pub fn corpus_loss_tape(&self, tape: &mut Tape, store: &ParamStore, corpus: &[AlignmentPair]) -> Result<Var> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("alignment corpus is empty".into()));
        }
        let mut total = self.pair_loss_tape(tape, store, &corpus[0])?;
        for pair in &corpus[1..] {
            let l = self.pair_loss_tape(tape, store, pair)?;
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / corpus.len() as f64))
    }
}

/// Runs the resampler on an L×D_in input.
pub fn resample(inputs: &Matrix, resampler: &Resampler, store: &ParamStore) -> Result<Matrix> {
    let mut tape = Tape::new();
    let out = resampler.forward_tape(&mut tape, store, inputs)?;
    Ok(tape.value(out).clone())
}

/// One alignment example: an input token sequence and the embedding its pooled
/// resampler output should match.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPair {
    pub inputs: Matrix,
    pub target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.01, momentum: 0.0 }
    }
}

/// Full-batch gradient descent on the corpus loss. Returns the loss before
/// each update.
pub fn alignment_train(
    store: &mut ParamStore,
    resampler: &Resampler,
    corpus: &[AlignmentPair],
    config: &AlignmentConfig,
) -> Result<Vec<f64>> {
    let mut optimizer = Sgd::new(config.lr, config.momentum);
    let ids = resampler.param_ids();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let loss = alignment_step(store, resampler, corpus, &mut optimizer, &ids)
            .map_err(|e| match e {
                Error::NonFiniteActivation { .. } => Error::Diverged { step, loss: f64::NAN },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        curve.push(loss);
    }
    Ok(curve)
}

/// One full-batch update; returns the loss before it. Parameters are left
/// untouched when the loss is not finite.
pub fn alignment_step(
    store: &mut ParamStore,
    resampler: &Resampler,
    corpus: &[AlignmentPair],
    optimizer: &mut Sgd,
    trainable: &[ParamId],
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = resampler.corpus_loss_tape(&mut tape, store, corpus)?;
    let value = tape.scalar(loss);
    if value.is_finite() {
        let grads = tape.backward(loss)?;
        optimizer.step(store, &grads, trainable);
    }
    Ok(value)
}
