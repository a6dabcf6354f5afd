//! The `check` subcommand: the library's core properties, measured and
//! reported one by one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use topopack::attention::{
    dense_oracle_attention, feature_sequence, sparse_attention, Encoder, EncoderConfig, InitMode,
};
use topopack::connector::{resample, Resampler, ResamplerConfig};
use topopack::grid::{FeatureGrid, PackLayout, TokenSequence};
use topopack::numerics::{grad_check, Matrix, ParamStore, Tape, Var};
use topopack::pretrain::{infonce_loss, sample_mae_mask, MaeModel, MaskPhase, MoCoConfig, MoCoState};
use topopack::topomask::{allowed_count, mask_entry_with_validity, sparsity_ratio, TopoMaskDescriptor};

use crate::output::emit;
use crate::OutputArgs;

const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-6;
const GRAD_SEEDS: u64 = 3;

#[derive(Serialize)]
struct Property {
    name: &'static str,
    value: f64,
    threshold: f64,
    pass: bool,
}

fn at_most(name: &'static str, value: f64, threshold: f64) -> Property {
    Property { name, value, threshold, pass: value < threshold }
}

fn random_grid(rng: &mut ChaCha8Rng, max_side: usize, dim: usize) -> FeatureGrid {
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    FeatureGrid::from_features(h, w, dim, (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite features")
}

fn enumeration_mismatches() -> f64 {
    let mut bad = 0;
    for k in 1..=4 {
        for m in 1..=25 {
            let l = PackLayout::strip(m, k).expect("valid strip");
            let n = l.seq_len();
            let all = vec![true; n];
            let counted: u64 = (0..n)
                .map(|i| (0..n).filter(|&j| mask_entry_with_validity(&l, &all, i, j)).count() as u64)
                .sum();
            if counted != allowed_count(m as u64, k as u64) {
                bad += 1;
            }
        }
    }
    bad as f64
}

fn oracle_deviation(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.random_range(2..=3);
        let d = rng.random_range(1..=16);
        let seq = feature_sequence(&random_grid(rng, 3 * k, d), k)?;
        let valid = seq.key_validity();
        let desc = TopoMaskDescriptor::new(&seq.layout, &valid)?;
        let n = seq.len();
        let (q, kk, v) = (Matrix::randn(n, d, 1.0, rng), Matrix::randn(n, d, 1.0, rng), Matrix::randn(n, d, 1.0, rng));
        let sparse = sparse_attention(&q, &kk, &v, &desc)?;
        let dense = dense_oracle_attention(&q, &kk, &v, |i, j| mask_entry_with_validity(&seq.layout, &valid, i, j))?;
        worst = worst.max(sparse.max_abs_diff(&dense));
    }
    Ok(worst)
}

fn weighted_readout(t: &mut Tape, out: Var, weights: &Matrix) -> topopack::Result<Var> {
    let w = t.constant(weights.clone());
    let m = t.mul(out, w)?;
    Ok(t.sum_all(m))
}

fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig { layers: 1, heads: 2, dim: 4, ff_dim: 6, k: 2, positional: true, seed }
}

fn tiny_sequence(rng: &mut ChaCha8Rng) -> anyhow::Result<TokenSequence> {
    Ok(feature_sequence(&random_grid(rng, 4, 4), 2)?)
}

fn grad_errors(seed: u64) -> anyhow::Result<[f64; 4]> {
    let mut worst = [0.0f64; 4];
    for s in 0..GRAD_SEEDS {
        let s = seed.wrapping_add(s);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let cfg = tiny_encoder(s);
        let seq = tiny_sequence(&mut rng)?;
        let pattern = Encoder::pattern_for(&seq)?;

        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "encoder", &cfg, InitMode::Standard)?;
        let weights = Matrix::randn(seq.len(), 4, 1.0, &mut rng);
        worst[0] = worst[0].max(grad_check(&store, GRAD_STEP, |t, p| {
            let input = t.constant(seq.embeddings.clone());
            let out = enc.forward_tape(t, p, &seq, input, &pattern)?;
            weighted_readout(t, out, &weights)
        })?);

        let mut store = ParamStore::new();
        let mae = MaeModel::init(&mut store, &cfg)?;
        let mask = sample_mae_mask(&seq.layout, MaskPhase::PatchWise, 0.5, &seq.cell_validity(), s)?;
        if !mask.is_empty() {
            worst[1] = worst[1].max(grad_check(&store, GRAD_STEP, |t, p| mae.loss_tape(t, p, &seq, &mask, &pattern))?);
        }

        let mut store = ParamStore::new();
        Encoder::init(&mut store, MoCoState::ENCODER_PREFIX, &cfg, InitMode::Standard)?;
        let mut state =
            MoCoState::new(store, &cfg, MoCoConfig { temperature: 0.5, queue_capacity: 8, seed: s, ..Default::default() })?;
        let extra = tiny_sequence(&mut rng)?;
        state.push_keys(&state.key_summaries(&extra)?);
        let keys = state.key_summaries(&state.positive_view(&seq, s)?)?;
        worst[2] = worst[2].max(grad_check(&state.query, GRAD_STEP, |t, p| state.loss_tape(t, p, &seq, &keys, &pattern))?);

        let rcfg = ResamplerConfig { queries: 3, input_dim: 4, output_dim: 4, heads: 2, ff_dim: 6, seed: s, ..Default::default() };
        let mut store = ParamStore::new();
        let r = Resampler::init(&mut store, &rcfg)?;
        let x = Matrix::randn(rng.random_range(1..6), 4, 1.0, &mut rng);
        let w = Matrix::randn(3, 4, 1.0, &mut rng);
        worst[3] = worst[3].max(grad_check(&store, GRAD_STEP, |t, p| {
            let out = r.forward_tape(t, p, &x)?;
            weighted_readout(t, out, &w)
        })?);
    }
    Ok(worst)
}

fn connector_length_errors(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let cfg = ResamplerConfig::default();
    let mut store = ParamStore::new();
    let r = Resampler::init(&mut store, &cfg)?;
    let mut bad = 0;
    for l in [1, 7, 130] {
        let out = resample(&Matrix::randn(l, cfg.input_dim, 1.0, rng), &r, &store)?;
        if out.rows() != 32 {
            bad += 1;
        }
    }
    Ok(bad as f64)
}

pub fn run(seed: u64, output: &OutputArgs) -> anyhow::Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut props = vec![
        Property {
            name: "allowed_count_1000_3",
            value: allowed_count(1000, 3) as f64,
            threshold: 1_100_001.0,
            pass: allowed_count(1000, 3) == 1_100_001,
        },
        at_most("ratio_1000_3_minus_0.0110", (sparsity_ratio(1000, 3) - 0.0110).abs(), 5e-5),
        at_most("mask_enumeration_mismatches", enumeration_mismatches(), 0.5),
        at_most("sparse_vs_dense_max_deviation", oracle_deviation(&mut rng)?, 1e-10),
    ];
    let grads = grad_errors(seed)?;
    for (name, e) in ["grad_check_encoder", "grad_check_mae", "grad_check_moco", "grad_check_resampler"].into_iter().zip(grads) {
        props.push(at_most(name, e, GRAD_TOL));
    }
    let q = [1.0, 0.0, 0.0];
    let negatives = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let loss = infonce_loss(&q, &q, &negatives, 1.0)?;
    props.push(at_most("infonce_orthogonal_error", (loss - (1.0 + 2.0 * (-1.0f64).exp()).ln()).abs(), 1e-9));
    props.push(at_most("connector_length_errors", connector_length_errors(&mut rng)?, 0.5));

    let pass = props.iter().all(|p| p.pass);
    for p in props.iter().filter(|p| !p.pass) {
        log::error!("{} = {:e} (threshold {:e})", p.name, p.value, p.threshold);
    }
    emit(json!({ "command": "check", "seed": seed, "checks": props, "pass": pass }), output)?;
    Ok(pass)
}
