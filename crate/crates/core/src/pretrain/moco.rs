use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::grid::{TokenRole, TokenSequence};
use crate::numerics::{dot, l2_norm, ops::log_sum_exp, Matrix, ParamStore, RowPattern, Sgd, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoCoConfig {
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// EMA coefficient for the key encoder.
    pub momentum: f64,
    /// Std-dev of the Gaussian noise that makes the positive view.
    pub noise: f64,
    pub queue_capacity: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub seed: u64,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self { temperature: 0.07, momentum: 0.99, noise: 0.1, queue_capacity: 1024, lr: 0.01, sgd_momentum: 0.0, seed: 0 }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidArgument(format!("noise scale {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// `key ← m·key + (1 − m)·query` for every tensor the two stores share by name.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
    }
    for id in query.ids() {
        let kid = key
            .id(query.name(id))
            .ok_or_else(|| Error::Format(format!("key store lacks {}", query.name(id))))?;
        let q = query.get(id);
        let k = key.get_mut(kid);
        if k.shape() != q.shape() {
            return Err(Error::Shape(format!("{} differs between stores", query.name(id))));
        }
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = momentum * *kv + (1.0 - momentum) * qv;
        }
    }
    Ok(())
}

/// Adds i.i.d. N(0, σ²) noise to every entry.
pub fn noise_positive(features: &Matrix, sigma: f64, seed: u64) -> Result<Matrix> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise scale {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let mut out = features.clone();
    out.data_mut().iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    Ok(out)
}

/// `−log(exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ exp(q·k⁻/τ)))`, evaluated with log-sum-exp.
pub fn infonce_loss(query: &[f64], positive: &[f64], queue: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    if positive.len() != query.len() || queue.iter().any(|n| n.len() != query.len()) {
        return Err(Error::Shape("infonce embeddings differ in length".into()));
    }
    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(dot(query, positive) / temperature);
    logits.extend(queue.iter().map(|n| dot(query, n) / temperature));
    Ok(log_sum_exp(&logits) - logits[0])
}

fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = l2_norm(out.row(i)).max(1e-12);
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MoCoStep {
    pub loss: f64,
    pub queue_len: usize,
}

/// Query encoder, EMA key encoder and a FIFO of unit-norm negatives.
#[derive(Clone, Debug)]
pub struct MoCoState {
    pub config: MoCoConfig,
    pub encoder: Encoder,
    pub query: ParamStore,
    pub key: ParamStore,
    queue: VecDeque<Vec<f64>>,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    steps: usize,
}

impl MoCoState {
    pub const ENCODER_PREFIX: &'static str = "encoder";

    /// Both encoders start from `query`, which must contain an encoder under `"encoder"`.
    pub fn new(query: ParamStore, encoder_config: &EncoderConfig, config: MoCoConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::attach(&query, Self::ENCODER_PREFIX, encoder_config)?;
        let optimizer = Sgd::new(config.lr, config.sgd_momentum);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { encoder, key: query.clone(), query, queue: VecDeque::new(), optimizer, rng, steps: 0, config })
    }

    pub fn queue(&self) -> &VecDeque<Vec<f64>> {
        &self.queue
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Appends unit-normalized rows, evicting the oldest entries beyond capacity.
    pub fn push_keys(&mut self, keys: &Matrix) {
        for i in 0..keys.rows() {
            let n = l2_norm(keys.row(i)).max(1e-12);
            self.queue.push_back(keys.row(i).iter().map(|x| x / n).collect());
        }
        while self.queue.len() > self.config.queue_capacity {
            self.queue.pop_front();
        }
    }

    /// Normalized summary embeddings of `seq` under the key encoder.
    pub fn key_summaries(&self, seq: &TokenSequence) -> Result<Matrix> {
        let out = crate::attention::encoder_forward(seq, &self.encoder, &self.key)?;
        Ok(normalize_rows(&out.summaries()))
    }

    /// Fills the queue with key-encoder summaries of `seqs` without training.
    pub fn warm_queue<'a>(&mut self, seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Result<()> {
        for seq in seqs {
            if self.queue.len() >= self.config.queue_capacity {
                break;
            }
            let keys = self.key_summaries(seq)?;
            self.push_keys(&keys);
        }
        Ok(())
    }

    /// Mean InfoNCE over the M summaries of `anchor`, with `keys` (M×D, unit rows)
    /// as positives and the current queue as negatives.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        anchor: &TokenSequence,
        keys: &Matrix,
        pattern: &Arc<RowPattern>,
    ) -> Result<Var> {
        let input = tape.constant(anchor.embeddings.clone());
        let out = self.encoder.forward_tape(tape, store, anchor, input, pattern)?;
        let summaries = tape.gather_rows(out, &anchor.layout.summary_indices())?;
        let q = tape.l2_normalize_rows(summaries);
        let pos = tape.constant(keys.clone());
        let mut parts = vec![tape.row_dot(q, pos)?];
        if !self.queue.is_empty() {
            let rows: Vec<Vec<f64>> = self.queue.iter().cloned().collect();
            let negatives_t = tape.constant(Matrix::from_rows(&rows)?.transpose());
            parts.push(tape.matmul(q, negatives_t)?);
        }
        let logits = tape.concat_cols(&parts)?;
        let logits = tape.scale(logits, 1.0 / self.config.temperature);
        tape.cross_entropy(logits, &vec![0; keys.rows()])
    }

    /// Positive view of `anchor`: noise on every token, padding kept at zero.
    pub fn positive_view(&self, anchor: &TokenSequence, seed: u64) -> Result<TokenSequence> {
        let mut noisy = noise_positive(&anchor.embeddings, self.config.noise, seed)?;
        for (t, role) in anchor.roles.iter().enumerate() {
            if *role == TokenRole::PaddedPatch {
                noisy.row_mut(t).fill(0.0);
            }
        }
        anchor.with_embeddings(noisy)
    }

    /// Loss on `anchor`, a gradient step on the query encoder, enqueue of the
    /// step's keys, then the EMA update of the key encoder.
    pub fn step(&mut self, anchor: &TokenSequence) -> Result<MoCoStep> {
        let noise_seed = self.rng.random::<u64>();
        let positive = self.positive_view(anchor, noise_seed)?;
        let keys = self.key_summaries(&positive)?;
        let pattern = Encoder::pattern_for(anchor)?;
        let mut tape = Tape::new();
        let loss = self.loss_tape(&mut tape, &self.query, anchor, &keys, &pattern)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { step: self.steps, loss: value });
        }
        let grads = tape.backward(loss)?;
        let ids = self.encoder.param_ids();
        self.optimizer.step(&mut self.query, &grads, &ids);
        self.push_keys(&keys);
        momentum_update(&mut self.key, &self.query, self.config.momentum)?;
        self.steps += 1;
        Ok(MoCoStep { loss: value, queue_len: self.queue.len() })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}
