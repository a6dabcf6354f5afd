use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::pack_positional_encoding;
use crate::error::{Error, Result};
use crate::grid::{PackLayout, TokenSequence};
use crate::numerics::{Matrix, ParamId, ParamStore, RowPattern, Tape, Var};
use crate::topomask::TopoMaskDescriptor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    /// Pack window side.
    pub k: usize,
    /// Add the 2D sinusoidal pack-coordinate encoding to the input.
    pub positional: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, dim: 16, ff_dim: 32, k: 3, positional: true, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!("encoder dims must be >= 1: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    Standard,
    /// Attention and feed-forward output projections start at zero, so every
    /// residual branch contributes nothing until trained.
    ZeroResidual,
}

/// One pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl EncoderBlock {
    const NAMES: [&'static str; 13] =
        ["ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "bo", "ln2.gain", "ln2.bias", "w1", "b1", "w2", "b2"];

    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        mode: InitMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let s_in = 1.0 / (dim as f64).sqrt();
        let s_ff = 1.0 / (ff_dim as f64).sqrt();
        let out_scale = match mode {
            InitMode::Standard => 1.0,
            InitMode::ZeroResidual => 0.0,
        };
        let shapes: [(usize, usize, f64); 13] = [
            (1, dim, f64::NAN),
            (1, dim, 0.0),
            (dim, dim, s_in),
            (dim, dim, s_in),
            (dim, dim, s_in),
            (dim, dim, s_in * out_scale),
            (1, dim, 0.0),
            (1, dim, f64::NAN),
            (1, dim, 0.0),
            (dim, ff_dim, s_in),
            (1, ff_dim, 0.0),
            (ff_dim, dim, s_ff * out_scale),
            (1, dim, 0.0),
        ];
        let mut ids = Vec::with_capacity(13);
        for (name, (r, c, scale)) in Self::NAMES.iter().zip(shapes) {
            let value = if scale.is_nan() {
                Matrix::filled(r, c, 1.0)
            } else if scale == 0.0 {
                Matrix::zeros(r, c)
            } else {
                Matrix::randn(r, c, scale, rng)
            };
            ids.push(store.insert(format!("{prefix}.{name}"), value)?);
        }
        Ok(Self::from_ids(&ids))
    }

    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Self> {
        let ids = Self::NAMES
            .iter()
            .map(|name| {
                let full = format!("{prefix}.{name}");
                store.id(&full).ok_or_else(|| Error::Format(format!("missing tensor {full}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        Self {
            ln1_gain: ids[0],
            ln1_bias: ids[1],
            wq: ids[2],
            wk: ids[3],
            wv: ids[4],
            wo: ids[5],
            bo: ids[6],
            ln2_gain: ids[7],
            ln2_bias: ids[8],
            w1: ids[9],
            b1: ids[10],
            w2: ids[11],
            b2: ids[12],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gain, self.ln1_bias, self.wq, self.wk, self.wv, self.wo, self.bo, self.ln2_gain,
            self.ln2_bias, self.w1, self.b1, self.w2, self.b2,
        ]
    }

    /// Self-attention over `pattern` with queries and keys from the same sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        pattern: &Arc<RowPattern>,
        heads: usize,
    ) -> Result<Var> {
        let p = |t: &mut Tape, id| t.param(store, id);
        let (g1, b1n) = (p(tape, self.ln1_gain), p(tape, self.ln1_bias));
        let h = tape.layer_norm(x, g1, b1n, LN_EPS)?;
        let (wq, wk, wv) = (p(tape, self.wq), p(tape, self.wk), p(tape, self.wv));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let att = tape.attention(q, k, v, pattern.clone(), heads)?;
        let (wo, bo) = (p(tape, self.wo), p(tape, self.bo));
        let proj = tape.matmul(att, wo)?;
        let proj = tape.add_row(proj, bo)?;
        let x = tape.add(x, proj)?;

        let (g2, b2n) = (p(tape, self.ln2_gain), p(tape, self.ln2_bias));
        let h = tape.layer_norm(x, g2, b2n, LN_EPS)?;
        let (w1, b1) = (p(tape, self.w1), p(tape, self.b1));
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let (w2, b2) = (p(tape, self.w2), p(tape, self.b2));
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        tape.add(x, f)
    }

    /// Cross-attention: `queries` attend to `context` (already normalized by the caller).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cross_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        pattern: &Arc<RowPattern>,
        heads: usize,
    ) -> Result<Var> {
        let p = |t: &mut Tape, id| t.param(store, id);
        let (g1, b1n) = (p(tape, self.ln1_gain), p(tape, self.ln1_bias));
        let h = tape.layer_norm(queries, g1, b1n, LN_EPS)?;
        let (wq, wk, wv) = (p(tape, self.wq), p(tape, self.wk), p(tape, self.wv));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let att = tape.attention(q, k, v, pattern.clone(), heads)?;
        let (wo, bo) = (p(tape, self.wo), p(tape, self.bo));
        let proj = tape.matmul(att, wo)?;
        let proj = tape.add_row(proj, bo)?;
        let x = tape.add(queries, proj)?;

        let (g2, b2n) = (p(tape, self.ln2_gain), p(tape, self.ln2_bias));
        let h = tape.layer_norm(x, g2, b2n, LN_EPS)?;
        let (w1, b1) = (p(tape, self.w1), p(tape, self.b1));
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let (w2, b2) = (p(tape, self.w2), p(tape, self.b2));
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        tape.add(x, f)
    }
}

/// Stack of topology-masked encoder blocks plus a learned per-role embedding.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    prefix: String,
    role_embedding: ParamId,
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, mode: InitMode) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let role_embedding = store.insert(format!("{prefix}.role_embedding"), Matrix::zeros(4, config.dim))?;
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::init(store, &format!("{prefix}.layer{l}"), config.dim, config.ff_dim, mode, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), prefix: prefix.to_string(), role_embedding, blocks })
    }

    /// Binds to parameters already present in `store` (e.g. loaded from a checkpoint).
    pub fn attach(store: &ParamStore, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let name = format!("{prefix}.role_embedding");
        let role_embedding = store.id(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if store.get(role_embedding).shape() != (4, config.dim) {
            return Err(Error::Shape(format!("{name} does not match dim {}", config.dim)));
        }
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::attach(store, &format!("{prefix}.layer{l}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), prefix: prefix.to_string(), role_embedding, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.role_embedding];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }

    /// Records the forward pass. `input` holds the N×D token embeddings.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        input: Var,
        pattern: &Arc<RowPattern>,
    ) -> Result<Var> {
        if tape.value(input).shape() != (seq.len(), self.config.dim) {
            return Err(Error::Shape(format!(
                "encoder input {:?}, expected ({}, {})",
                tape.value(input).shape(),
                seq.len(),
                self.config.dim
            )));
        }
        let roles: Vec<usize> = seq.roles.iter().map(|r| r.index()).collect();
        let table = tape.param(store, self.role_embedding);
        let role_rows = tape.gather_rows(table, &roles)?;
        let mut x = tape.add(input, role_rows)?;
        if self.config.positional {
            let pe = tape.constant(pack_positional_encoding(&seq.layout, self.config.dim));
            x = tape.add(x, pe)?;
        }
        for (layer, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x, pattern, self.config.heads)?;
            if !tape.value(x).is_finite() {
                return Err(Error::NonFiniteActivation { layer });
            }
        }
        Ok(x)
    }

    /// Mask pattern for a sequence, honouring padded tokens.
    pub fn pattern_for(seq: &TokenSequence) -> Result<Arc<RowPattern>> {
        let descriptor = TopoMaskDescriptor::new(&seq.layout, &seq.key_validity())?;
        Ok(Arc::new(descriptor.row_pattern()))
    }
}

/// Encoder outputs for every token, with summary and global views.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub layout: PackLayout,
    pub tokens: Matrix,
}

impl EncoderOutput {
    pub fn summaries(&self) -> Matrix {
        self.tokens.select_rows(&self.layout.summary_indices())
    }

    pub fn global(&self) -> &[f64] {
        self.tokens.row(self.layout.global_token_index())
    }

    /// Summaries followed by the global token as an (M+1)×D matrix.
    pub fn summaries_with_global(&self) -> Matrix {
        let mut rows = self.layout.summary_indices();
        rows.push(self.layout.global_token_index());
        self.tokens.select_rows(&rows)
    }
}

pub fn encoder_forward(seq: &TokenSequence, encoder: &Encoder, store: &ParamStore) -> Result<EncoderOutput> {
    if seq.layout.k() != encoder.config.k {
        return Err(Error::InvalidArgument(format!(
            "sequence packed with k={}, encoder configured for k={}",
            seq.layout.k(),
            encoder.config.k
        )));
    }
    let mut tape = Tape::new();
    let pattern = Encoder::pattern_for(seq)?;
    let input = tape.constant(seq.embeddings.clone());
    let out = encoder.forward_tape(&mut tape, store, seq, input, &pattern)?;
    Ok(EncoderOutput { layout: seq.layout, tokens: tape.value(out).clone() })
}
