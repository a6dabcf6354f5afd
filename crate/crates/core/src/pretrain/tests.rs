use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{feature_sequence, Encoder, EncoderConfig, InitMode};
use crate::grid::{PackLayout, TokenSequence};
use crate::numerics::{grad_check, l2_norm, Matrix, ParamStore, Sgd};
use crate::synth::{synth_corpus, SynthConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn l6() -> PackLayout {
    PackLayout::new(6, 6, 3).unwrap()
}

#[test]
fn pack_wise_half() {
    let m = sample_mae_mask(&l6(), MaskPhase::PackWise, 0.5, &[true; 36], 1).unwrap();
    assert_eq!(m.len(), 18);
    let packs: std::collections::BTreeSet<_> = m.masked.iter().map(|&t| l6().pack_of(t).unwrap()).collect();
    assert_eq!(packs.len(), 2);
    assert!(!m.clamped);
}

#[test]
fn zero_ratio_is_empty() {
    for phase in [MaskPhase::PatchWise, MaskPhase::PackWise] {
        assert!(sample_mae_mask(&l6(), phase, 0.0, &[true; 36], 3).unwrap().is_empty());
    }
}

#[test]
fn patch_wise_full_ratio_clamps() {
    let l = l6();
    let m = sample_mae_mask(&l, MaskPhase::PatchWise, 1.0, &[true; 36], 4).unwrap();
    assert_eq!(m.len(), 32);
    assert!(m.clamped);
    for p in 0..4 {
        let visible = l.patch_range(p).unwrap().filter(|t| !m.contains(*t)).count();
        assert_eq!(visible, 1);
    }
}

#[test]
fn mask_rejects_bad_ratio() {
    assert!(sample_mae_mask(&l6(), MaskPhase::PatchWise, 1.5, &[true; 36], 0).is_err());
    assert!(sample_mae_mask(&l6(), MaskPhase::PatchWise, 0.5, &[true; 35], 0).is_err());
}

#[test]
fn mask_is_deterministic() {
    let a = sample_mae_mask(&l6(), MaskPhase::PatchWise, 0.5, &[true; 36], 9).unwrap();
    let b = sample_mae_mask(&l6(), MaskPhase::PatchWise, 0.5, &[true; 36], 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reconstruction_loss_cases() {
    let mask = MaeMask { phase: MaskPhase::PatchWise, masked: vec![1, 2], ratio: 0.5, seed: 0, clamped: false };
    let target = Matrix::from_vec(4, 2, vec![9.0, 9.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0]).unwrap();
    assert_eq!(mae_reconstruction_loss(&target, &target, &mask).unwrap(), 0.0);
    let pred = Matrix::from_vec(4, 2, vec![-3.0, 1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    assert_eq!(mae_reconstruction_loss(&pred, &target, &mask).unwrap(), 1.25);
    let mut moved = pred.clone();
    moved.set(0, 0, 100.0);
    moved.set(3, 1, -7.0);
    assert_eq!(mae_reconstruction_loss(&moved, &target, &mask).unwrap(), 1.25);
    let empty = MaeMask { masked: vec![], ..mask };
    assert!(matches!(mae_reconstruction_loss(&pred, &target, &empty), Err(crate::Error::NothingToReconstruct)));
}

#[test]
fn momentum_examples() {
    let mut q = ParamStore::new();
    q.insert("w", Matrix::filled(2, 2, 1.0)).unwrap();
    let mut k = ParamStore::new();
    k.insert("w", Matrix::zeros(2, 2)).unwrap();
    let mut k1 = k.clone();
    momentum_update(&mut k1, &q, 1.0).unwrap();
    assert_eq!(k1, k);
    let mut k0 = k.clone();
    momentum_update(&mut k0, &q, 0.0).unwrap();
    assert_eq!(k0, q);
    let mut k99 = k.clone();
    momentum_update(&mut k99, &q, 0.99).unwrap();
    for &v in k99.get(k99.id("w").unwrap()).data() {
        assert!((v - 0.01).abs() < 1e-15);
    }
    assert!(momentum_update(&mut k, &q, 1.5).is_err());
}

#[test]
fn momentum_contracts_toward_query() {
    let mut r = rng(1);
    for _ in 0..20 {
        let m = r.random_range(0.0..1.0);
        let mut q = ParamStore::new();
        let id = q.insert("w", Matrix::randn(3, 4, 1.0, &mut r)).unwrap();
        let mut k = ParamStore::new();
        k.insert("w", Matrix::randn(3, 4, 1.0, &mut r)).unwrap();
        let before = k.get(id).sub(q.get(id)).unwrap();
        momentum_update(&mut k, &q, m).unwrap();
        let after = k.get(id).sub(q.get(id)).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a.abs() - m * b.abs()).abs() < 1e-12);
        }
    }
}

#[test]
fn noise_cases() {
    let mut r = rng(2);
    let x = Matrix::randn(5, 4, 1.0, &mut r);
    assert_eq!(noise_positive(&x, 0.0, 1).unwrap(), x);
    assert_eq!(noise_positive(&x, 0.3, 1).unwrap(), noise_positive(&x, 0.3, 1).unwrap());
    assert_ne!(noise_positive(&x, 0.3, 1).unwrap(), noise_positive(&x, 0.3, 2).unwrap());
    assert!(noise_positive(&x, -1.0, 1).is_err());
}

#[test]
fn noise_lowers_cosine_monotonically() {
    let mut means = Vec::new();
    for &sigma in &[0.01, 0.1, 1.0] {
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..100 {
            let mut r = rng(1000 + seed);
            let mut x = Matrix::randn(8, 16, 1.0, &mut r);
            for i in 0..8 {
                let n = l2_norm(x.row(i));
                x.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            let y = noise_positive(&x, sigma, seed).unwrap();
            for i in 0..8 {
                total += crate::numerics::dot(x.row(i), y.row(i)) / l2_norm(y.row(i));
                count += 1;
            }
        }
        means.push(total / count as f64);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn infonce_identity_and_orthogonal() {
    let q = vec![1.0, 0.0, 0.0];
    assert_eq!(infonce_loss(&q, &q, &[], 0.07).unwrap(), 0.0);
    let queue = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let l = infonce_loss(&q, &q, &queue, 1.0).unwrap();
    assert!((l - 0.551_444_713_932_051_1).abs() < 1e-12, "{l}");
    assert!(infonce_loss(&q, &q, &queue, 0.0).is_err());
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Softmax cross-entropy with label 0, computed directly from exp/sum.
pub(crate) fn brute_force_ce(logits: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[0].exp() / z).ln()
}

#[test]
fn infonce_matches_cross_entropy() {
    let mut r = rng(3);
    for _ in 0..50 {
        let d = r.random_range(2..12);
        let tau = r.random_range(0.2..2.0);
        let q = unit(&mut r, d);
        let p = unit(&mut r, d);
        let queue: Vec<Vec<f64>> = (0..r.random_range(0..20)).map(|_| unit(&mut r, d)).collect();
        let mut logits = vec![crate::numerics::dot(&q, &p) / tau];
        logits.extend(queue.iter().map(|n| crate::numerics::dot(&q, n) / tau));
        let got = infonce_loss(&q, &p, &queue, tau).unwrap();
        assert!((got - brute_force_ce(&logits)).abs() < 1e-12);
        assert!(got >= 0.0);
    }
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig { layers: 1, heads: 1, dim: 6, ff_dim: 8, k: 2, positional: true, seed: 5 }
}

fn tiny_corpus(count: usize, dim: usize, seed: u64) -> Vec<TokenSequence> {
    let cfg = SynthConfig { height: 4, width: 4, dim, clusters: 2, noise: 0.1, seed };
    synth_corpus(&cfg, count)
        .unwrap()
        .into_iter()
        .map(|s| feature_sequence(&s.grid, 2).unwrap())
        .collect()
}

fn moco_state(cfg: MoCoConfig) -> MoCoState {
    let enc = tiny_encoder_config();
    let mut store = ParamStore::new();
    Encoder::init(&mut store, MoCoState::ENCODER_PREFIX, &enc, InitMode::Standard).unwrap();
    MoCoState::new(store, &enc, cfg).unwrap()
}

#[test]
fn first_moco_step_with_identical_views_is_zero() {
    let mut state = moco_state(MoCoConfig { noise: 0.0, ..MoCoConfig::default() });
    let seq = &tiny_corpus(1, 6, 1)[0];
    let step = state.step(seq).unwrap();
    assert!(step.loss.abs() < 1e-12);
    assert_eq!(step.queue_len, 4);
}

#[test]
fn queue_is_fifo() {
    let mut state = moco_state(MoCoConfig { queue_capacity: 6, ..MoCoConfig::default() });
    let mut r = rng(4);
    let first = Matrix::randn(4, 6, 1.0, &mut r);
    let second = Matrix::randn(4, 6, 1.0, &mut r);
    state.push_keys(&first);
    state.push_keys(&second);
    assert_eq!(state.queue_len(), 6);
    let q: Vec<_> = state.queue().iter().cloned().collect();
    for (row, entry) in [2, 3].iter().zip(&q[..2]) {
        let n = l2_norm(first.row(*row));
        for (a, b) in entry.iter().zip(first.row(*row)) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }
    for entry in &q {
        assert!((l2_norm(entry) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn queue_entries_stay_unit_norm() {
    let mut state = moco_state(MoCoConfig { queue_capacity: 13, ..MoCoConfig::default() });
    let mut r = rng(5);
    for _ in 0..40 {
        let rows = r.random_range(1..7);
        state.push_keys(&Matrix::randn(rows, 6, r.random_range(0.01..100.0), &mut r));
        assert!(state.queue_len() <= 13);
        assert!(state.queue().iter().all(|e| (l2_norm(e) - 1.0).abs() < 1e-9));
    }
}

#[test]
fn moco_training_lowers_loss() {
    let corpus = tiny_corpus(8, 6, 2);
    let mut state = moco_state(MoCoConfig { queue_capacity: 64, lr: 0.05, ..MoCoConfig::default() });
    state.warm_queue(corpus.iter().cycle().take(16)).unwrap();
    let losses: Vec<f64> = (0..200).map(|s| state.step(&corpus[s % corpus.len()]).unwrap().loss).collect();
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "initial {head}, final {tail}");
}

#[test]
fn moco_grad_check() {
    let corpus = tiny_corpus(3, 6, 3);
    let mut state = moco_state(MoCoConfig { queue_capacity: 12, temperature: 0.5, ..MoCoConfig::default() });
    state.warm_queue(corpus.iter()).unwrap();
    let anchor = &corpus[0];
    let keys = state.key_summaries(&state.positive_view(anchor, 7).unwrap()).unwrap();
    let pattern = Encoder::pattern_for(anchor).unwrap();
    let err = grad_check(&state.query, 1e-5, |t, s| state.loss_tape(t, s, anchor, &keys, &pattern)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mae_grad_check() {
    let cfg = tiny_encoder_config();
    let mut store = ParamStore::new();
    let model = MaeModel::init(&mut store, &cfg).unwrap();
    let seq = &tiny_corpus(1, 6, 4)[0];
    let mask = sample_mae_mask(&seq.layout, MaskPhase::PatchWise, 0.5, &seq.cell_validity(), 2).unwrap();
    let pattern = Encoder::pattern_for(seq).unwrap();
    let err = grad_check(&store, 1e-5, |t, s| model.loss_tape(t, s, seq, &mask, &pattern)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mae_training_lowers_loss() {
    let cfg = EncoderConfig { dim: 8, heads: 2, ff_dim: 16, ..tiny_encoder_config() };
    let mut store = ParamStore::new();
    let model = MaeModel::init(&mut store, &cfg).unwrap();
    let corpus = tiny_corpus(6, 8, 5);
    let mut opt = Sgd::new(0.05, 0.0);
    let mut losses = Vec::new();
    for step in 0..200 {
        let seq = &corpus[step % corpus.len()];
        let mask = sample_mae_mask(&seq.layout, MaskPhase::PatchWise, 0.5, &seq.cell_validity(), step as u64).unwrap();
        losses.push(model.train_step(&mut store, &mut opt, seq, &mask).unwrap());
    }
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "initial {head}, final {tail}");
}

#[test]
fn mae_attach_round_trip() {
    let cfg = tiny_encoder_config();
    let mut store = ParamStore::new();
    let a = MaeModel::init(&mut store, &cfg).unwrap();
    let mut copy = store.clone();
    let b = MaeModel::attach_or_init(&mut copy, &cfg).unwrap();
    assert_eq!(a.param_ids(), b.param_ids());
    assert_eq!(copy, store);
}
