use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny() -> ResamplerConfig {
    ResamplerConfig { queries: 4, input_dim: 3, output_dim: 4, layers: 2, heads: 2, ff_dim: 6, ..Default::default() }
}

fn build(cfg: &ResamplerConfig) -> (ParamStore, Resampler) {
    let mut store = ParamStore::new();
    let r = Resampler::init(&mut store, cfg).unwrap();
    (store, r)
}

#[test]
fn output_length_is_fixed() {
    let (store, r) = build(&ResamplerConfig::default());
    let mut g = rng(1);
    for l in [1, 7, 130, 4096] {
        let out = resample(&Matrix::randn(l, 16, 1.0, &mut g), &r, &store).unwrap();
        assert_eq!(out.shape(), (32, 16));
        assert!(out.is_finite());
    }
}

#[test]
fn empty_input_is_rejected() {
    let (store, r) = build(&tiny());
    assert!(matches!(resample(&Matrix::zeros(0, 3), &r, &store), Err(Error::EmptySummarySequence)));
    assert!(matches!(resample(&Matrix::zeros(2, 5), &r, &store), Err(Error::Shape(_))));
}

#[test]
fn single_input_ignores_its_score() {
    // With one key the softmax weight is 1 whatever the query, so changing the
    // learned queries' key projection leaves the attention output alone.
    let (store, r) = build(&tiny());
    let x = Matrix::randn(1, 3, 1.0, &mut rng(2));
    let base = resample(&x, &r, &store).unwrap();
    let mut changed = store.clone();
    for l in 0..2 {
        let id = changed.id(&format!("connector.layer{l}.wk")).unwrap();
        *changed.get_mut(id) = Matrix::randn(4, 4, 3.0, &mut rng(3 + l));
    }
    let other = resample(&x, &r, &changed).unwrap();
    assert!(base.max_abs_diff(&other) < 1e-12);
}

#[test]
fn permutation_invariant_without_positions() {
    let (store, r) = build(&ResamplerConfig::default());
    let mut g = rng(4);
    for l in [2, 9, 40] {
        let x = Matrix::randn(l, 16, 1.0, &mut g);
        let mut order: Vec<usize> = (0..l).collect();
        order.shuffle(&mut g);
        let a = resample(&x, &r, &store).unwrap();
        let b = resample(&x.select_rows(&order), &r, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn positions_make_order_matter() {
    let cfg = ResamplerConfig { positional: true, ..ResamplerConfig::default() };
    let (store, r) = build(&cfg);
    let x = Matrix::randn(5, 16, 1.0, &mut rng(5));
    let swapped = x.select_rows(&[4, 3, 2, 1, 0]);
    let a = resample(&x, &r, &store).unwrap();
    let b = resample(&swapped, &r, &store).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn deterministic_given_seed() {
    let (s1, r1) = build(&tiny());
    let (s2, _) = build(&tiny());
    assert_eq!(s1, s2);
    let x = Matrix::randn(6, 3, 1.0, &mut rng(6));
    assert_eq!(resample(&x, &r1, &s1).unwrap(), resample(&x, &r1, &s2).unwrap());
}

#[test]
fn attach_matches_init() {
    let (store, r) = build(&tiny());
    let a = Resampler::attach(&store, &tiny()).unwrap();
    assert_eq!(a.param_ids(), r.param_ids());
    let wrong = ResamplerConfig { input_dim: 5, ..tiny() };
    assert!(Resampler::attach(&store, &wrong).is_err());
}

#[test]
fn grad_check_scalar_readout() {
    for seed in 0..5 {
        let cfg = ResamplerConfig { seed, ..tiny() };
        let (store, r) = build(&cfg);
        let mut g = rng(100 + seed);
        let x = Matrix::randn(5, 3, 1.0, &mut g);
        let w = Matrix::randn(4, 4, 1.0, &mut g);
        let err = grad_check(&store, 1e-5, |t, s| {
            let out = r.forward_tape(t, s, &x)?;
            let wv = t.constant(w.clone());
            let m = t.mul(out, wv)?;
            Ok(t.sum_all(m))
        })
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn zero_head_zero_target_starts_at_zero() {
    let cfg = ResamplerConfig { zero_init_head: true, ..tiny() };
    let (mut store, r) = build(&cfg);
    let mut g = rng(7);
    let corpus: Vec<_> =
        (0..4).map(|i| AlignmentPair { inputs: Matrix::randn(i + 1, 3, 1.0, &mut g), target: vec![0.0; 4] }).collect();
    let curve = alignment_train(&mut store, &r, &corpus, &AlignmentConfig { steps: 3, ..Default::default() }).unwrap();
    assert_eq!(curve[0], 0.0);
}

#[test]
fn identical_pairs_converge_monotonically() {
    let (mut store, r) = build(&tiny());
    let mut g = rng(8);
    let pair = AlignmentPair { inputs: Matrix::randn(6, 3, 1.0, &mut g), target: vec![0.5, -0.25, 1.0, 0.0] };
    let corpus = vec![pair; 4];
    let cfg = AlignmentConfig { steps: 2000, lr: 0.05, momentum: 0.0 };
    let curve = alignment_train(&mut store, &r, &corpus, &cfg).unwrap();
    for w in curve.windows(2) {
        assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
    }
    assert!(*curve.last().unwrap() < 1e-3, "{}", curve.last().unwrap());
}

#[test]
fn alignment_lowers_loss_on_mixed_corpus() {
    let (mut store, r) = build(&tiny());
    let mut g = rng(9);
    let proj = Matrix::randn(3, 4, 1.0, &mut g);
    let corpus: Vec<_> = (0..8)
        .map(|i| {
            let inputs = Matrix::randn(2 + i, 3, 1.0, &mut g);
            let means: Vec<f64> =
                (0..3).map(|c| (0..inputs.rows()).map(|r| inputs.get(r, c)).sum::<f64>() / inputs.rows() as f64).collect();
            let mean = Matrix::row_vector(&means);
            AlignmentPair { target: mean.matmul(&proj).unwrap().into_data(), inputs }
        })
        .collect();
    let curve =
        alignment_train(&mut store, &r, &corpus, &AlignmentConfig { steps: 300, lr: 0.05, momentum: 0.0 }).unwrap();
    assert!(curve.last().unwrap() < &curve[0]);
}

#[test]
fn divergence_reports_step() {
    let (mut store, r) = build(&tiny());
    let corpus = vec![AlignmentPair { inputs: Matrix::filled(2, 3, 1.0), target: vec![1e200; 4] }];
    let err = alignment_train(&mut store, &r, &corpus, &AlignmentConfig { steps: 50, lr: 1.0, momentum: 0.0 })
        .unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
}
