//! The staged training pipeline: patch-wise MAE, pack-wise MAE, momentum
//! contrast, then connector alignment. Each stage can resume from the
//! checkpoint of the one before it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_forward, feature_sequence, Encoder, EncoderConfig, InitMode};
use crate::checkpoint::Checkpoint;
use crate::connector::{alignment_step, connector_inputs, resample, AlignmentPair, Resampler, ResamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, TokenSequence};
use crate::numerics::{Matrix, ParamStore, Sgd};
use crate::pretrain::{sample_mae_mask, MaeModel, MaskPhase, MoCoConfig, MoCoState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mae1,
    Mae2,
    Moco,
    Connector,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Mae1, Stage::Mae2, Stage::Moco, Stage::Connector];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mae1 => "mae1",
            Stage::Mae2 => "mae2",
            Stage::Moco => "moco",
            Stage::Connector => "connector",
        }
    }

    /// Label written in the `phase` field of step logs.
    pub fn phase(self) -> &'static str {
        match self {
            Stage::Mae1 => "patch",
            Stage::Mae2 => "pack",
            Stage::Moco => "moco",
            Stage::Connector => "connector",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}; expected mae1, mae2, moco or connector")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball coefficient of the gradient-descent optimizer.
    pub sgd_momentum: f64,
    /// MAE masking ratio.
    pub ratio: f64,
    pub temperature: f64,
    /// EMA coefficient of the key encoder.
    pub ema: f64,
    pub noise: f64,
    pub queue: usize,
    pub queries: usize,
    /// Pass the global token to the connector after the summaries.
    pub include_global: bool,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for `stage` with an encoder as wide as the feature grids.
    pub fn new(stage: Stage, feature_dim: usize, k: usize, seed: u64) -> Self {
        let heads = if feature_dim.is_multiple_of(2) { 2 } else { 1 };
        let lr = match stage {
            Stage::Mae1 | Stage::Mae2 => 0.02,
            Stage::Moco => 0.05,
            Stage::Connector => 0.05,
        };
        Self {
            stage,
            steps: 500,
            lr,
            sgd_momentum: 0.0,
            ratio: 0.5,
            temperature: 0.07,
            ema: 0.99,
            noise: 0.1,
            queue: 1024,
            queries: 32,
            include_global: true,
            encoder: EncoderConfig {
                layers: 2,
                heads,
                dim: feature_dim,
                ff_dim: 2 * feature_dim,
                k,
                positional: true,
                seed,
            },
            seed,
        }
    }

    fn window(&self) -> usize {
        (self.steps / 10).clamp(1, 25)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub phase: String,
    pub queue_len: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub checkpoint: Checkpoint,
    /// Mean loss over the first window of steps.
    pub initial_loss: f64,
    /// Mean loss over the last window of steps.
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn improved(&self) -> bool {
        self.final_loss < self.initial_loss
    }
}

fn window_means(losses: &[f64], w: usize) -> (f64, f64) {
    let w = w.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteActivation { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

fn check_finite(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, loss })
    }
}

fn encoder_meta(ckpt: Checkpoint, cfg: &TrainConfig) -> Checkpoint {
    let e = &cfg.encoder;
    ckpt.with_meta("stage", cfg.stage.name())
        .with_meta("encoder.layers", e.layers.to_string())
        .with_meta("encoder.heads", e.heads.to_string())
        .with_meta("encoder.dim", e.dim.to_string())
        .with_meta("encoder.ff_dim", e.ff_dim.to_string())
        .with_meta("encoder.k", e.k.to_string())
        .with_meta("encoder.positional", e.positional.to_string())
        .with_meta("seed", cfg.seed.to_string())
}

/// Encoder configuration recorded in a checkpoint's metadata.
pub fn encoder_config_from_meta(ckpt: &Checkpoint) -> Result<EncoderConfig> {
    fn field<T: FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
        ckpt.meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint field {key} is malformed")))
    }
    Ok(EncoderConfig {
        layers: field(ckpt, "encoder.layers")?,
        heads: field(ckpt, "encoder.heads")?,
        dim: field(ckpt, "encoder.dim")?,
        ff_dim: field(ckpt, "encoder.ff_dim")?,
        k: field(ckpt, "encoder.k")?,
        positional: field(ckpt, "encoder.positional")?,
        seed: field(ckpt, "seed")?,
    })
}

/// Runs one stage over `corpus`. `resume` supplies the previous stage's
/// parameters; without it the encoder starts from a fresh initialization.
pub fn run_stage(corpus: &[FeatureGrid], cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if corpus.iter().any(|g| g.dim() != cfg.encoder.dim) {
        return Err(Error::Shape(format!("every grid must have {} channels", cfg.encoder.dim)));
    }
    let seqs = corpus.iter().map(|g| feature_sequence(g, cfg.encoder.k)).collect::<Result<Vec<_>>>()?;
    let (logs, params) = match cfg.stage {
        Stage::Mae1 => run_mae(&seqs, cfg, MaskPhase::PatchWise, resume)?,
        Stage::Mae2 => run_mae(&seqs, cfg, MaskPhase::PackWise, resume)?,
        Stage::Moco => run_moco(&seqs, cfg, resume)?,
        Stage::Connector => run_connector(corpus, &seqs, cfg, resume)?,
    };
    let losses: Vec<f64> = logs.iter().map(|l| l.loss).collect();
    let (initial_loss, final_loss) = if losses.is_empty() { (0.0, 0.0) } else { window_means(&losses, cfg.window()) };
    let mut checkpoint = encoder_meta(Checkpoint::new(params), cfg);
    if cfg.stage == Stage::Connector {
        checkpoint = checkpoint
            .with_meta("connector.queries", cfg.queries.to_string())
            .with_meta("connector.include_global", cfg.include_global.to_string());
    }
    Ok(TrainOutcome { logs, checkpoint, initial_loss, final_loss })
}

fn encoder_store(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    Encoder::init(&mut store, MaeModel::ENCODER_PREFIX, &cfg.encoder, InitMode::Standard)?;
    if let Some(ck) = resume {
        store.load_prefix(&ck.params, &format!("{}.", MaeModel::ENCODER_PREFIX))?;
    }
    Ok(store)
}

fn run_mae(
    seqs: &[TokenSequence],
    cfg: &TrainConfig,
    phase: MaskPhase,
    resume: Option<&Checkpoint>,
) -> Result<(Vec<StepLog>, ParamStore)> {
    let mut store = match resume {
        Some(ck) => ck.params.clone(),
        None => ParamStore::new(),
    };
    let model = if resume.is_some() {
        MaeModel::attach_or_init(&mut store, &cfg.encoder)?
    } else {
        MaeModel::init(&mut store, &cfg.encoder)?
    };
    let mut opt = Sgd::new(cfg.lr, cfg.sgd_momentum);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seq = &seqs[step % seqs.len()];
        let mask_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let mask = sample_mae_mask(&seq.layout, phase, cfg.ratio, &seq.cell_validity(), mask_seed)?;
        if mask.is_empty() {
            return Err(Error::NothingToReconstruct);
        }
        let loss = model.train_step(&mut store, &mut opt, seq, &mask).map_err(diverged(step))?;
        let loss = check_finite(step, loss)?;
        log::debug!("{phase} step {step}: loss {loss:.6}");
        logs.push(StepLog { step, loss, phase: phase.to_string(), queue_len: 0 });
    }
    Ok((logs, store))
}

fn run_moco(
    seqs: &[TokenSequence],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<(Vec<StepLog>, ParamStore)> {
    let store = encoder_store(cfg, resume)?;
    let moco = MoCoConfig {
        temperature: cfg.temperature,
        momentum: cfg.ema,
        noise: cfg.noise,
        queue_capacity: cfg.queue,
        lr: cfg.lr,
        sgd_momentum: cfg.sgd_momentum,
        seed: cfg.seed,
    };
    let mut state = MoCoState::new(store, &cfg.encoder, moco)?;
    state.warm_queue(seqs.iter())?;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let out = state.step(&seqs[step % seqs.len()]).map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged { step, loss },
            other => diverged(step)(other),
        })?;
        logs.push(StepLog { step, loss: out.loss, phase: Stage::Moco.phase().into(), queue_len: out.queue_len });
    }
    Ok((logs, state.query))
}

/// Per-grid alignment targets: a fixed random projection of the mean valid
/// patch feature, standing in for a paired text embedding.
pub fn alignment_targets(corpus: &[FeatureGrid], output_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let dim = corpus.first().map_or(0, FeatureGrid::dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x616c_6967_6e00);
    let proj = Matrix::randn(dim, output_dim, 1.0 / (dim.max(1) as f64).sqrt(), &mut rng);
    corpus
        .iter()
        .map(|g| {
            let mut mean = vec![0.0; dim];
            let n = g.valid_count().max(1) as f64;
            for cell in 0..g.cell_count() {
                if g.validity()[cell] {
                    for (m, x) in mean.iter_mut().zip(g.cell_feature(cell)) {
                        *m += x / n;
                    }
                }
            }
            Matrix::row_vector(&mean).matmul(&proj).expect("matching dims").into_data()
        })
        .collect()
}

fn run_connector(
    corpus: &[FeatureGrid],
    seqs: &[TokenSequence],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<(Vec<StepLog>, ParamStore)> {
    let mut store = encoder_store(cfg, resume)?;
    let encoder = Encoder::attach(&store, MaeModel::ENCODER_PREFIX, &cfg.encoder)?;
    let dim = cfg.encoder.dim;
    let targets = alignment_targets(corpus, dim, cfg.seed);
    // The encoder is frozen here, so its outputs are computed once.
    let pairs = seqs
        .iter()
        .zip(targets)
        .map(|(seq, target)| {
            let out = encoder_forward(seq, &encoder, &store)?;
            Ok(AlignmentPair { inputs: connector_inputs(&out, cfg.include_global), target })
        })
        .collect::<Result<Vec<_>>>()?;
    let rcfg = ResamplerConfig {
        queries: cfg.queries,
        input_dim: dim,
        output_dim: dim,
        heads: cfg.encoder.heads,
        ff_dim: cfg.encoder.ff_dim,
        seed: cfg.seed,
        ..ResamplerConfig::default()
    };
    let resampler = Resampler::init(&mut store, &rcfg)?;
    let ids = resampler.param_ids();
    let mut opt = Sgd::new(cfg.lr, cfg.sgd_momentum);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = alignment_step(&mut store, &resampler, &pairs, &mut opt, &ids).map_err(diverged(step))?;
        let loss = check_finite(step, loss)?;
        logs.push(StepLog { step, loss, phase: Stage::Connector.phase().into(), queue_len: 0 });
    }
    Ok((logs, store))
}

/// Encodes `grid` and condenses it to `queries` tokens, returning the
/// connector input length alongside them. Encoder and connector come from
/// `checkpoint` when it holds them and are otherwise initialized from `seed`
/// (with pack side `k` when there is no checkpoint at all).
pub fn condense_grid(
    grid: &FeatureGrid,
    checkpoint: Option<&Checkpoint>,
    k: usize,
    queries: usize,
    include_global: bool,
    seed: u64,
) -> Result<(usize, Matrix)> {
    let dim = grid.dim();
    let (mut store, enc_cfg) = match checkpoint {
        Some(ck) => (ck.params.clone(), encoder_config_from_meta(ck)?),
        None => {
            let enc = TrainConfig::new(Stage::Connector, dim, k, seed).encoder;
            let mut store = ParamStore::new();
            Encoder::init(&mut store, MaeModel::ENCODER_PREFIX, &enc, InitMode::Standard)?;
            (store, enc)
        }
    };
    if enc_cfg.dim != dim {
        return Err(Error::Shape(format!("encoder expects {} channels, grid has {dim}", enc_cfg.dim)));
    }
    let seq = feature_sequence(grid, enc_cfg.k)?;
    let encoder = Encoder::attach(&store, MaeModel::ENCODER_PREFIX, &enc_cfg)?;
    let inputs = connector_inputs(&encoder_forward(&seq, &encoder, &store)?, include_global);
    let rcfg = ResamplerConfig {
        queries,
        input_dim: dim,
        output_dim: dim,
        heads: enc_cfg.heads,
        ff_dim: enc_cfg.ff_dim,
        seed,
        ..ResamplerConfig::default()
    };
    let resampler = if store.id(&format!("{}.queries", Resampler::PREFIX)).is_some() {
        Resampler::attach(&store, &rcfg)?
    } else {
        Resampler::init(&mut store, &rcfg)?
    };
    Ok((inputs.rows(), resample(&inputs, &resampler, &store)?))
}
