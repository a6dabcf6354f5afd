use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn weighted_softmax_gradient() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        let x = p.insert("x", Matrix::randn(1, 5, 1.0, &mut r)).unwrap();
        let w = Matrix::randn(1, 5, 1.0, &mut r);
        let allowed = Arc::new(vec![true, false, true, true, false]);
        let err = grad_check(&p, 1e-5, |t, s| {
            let xv = t.param(s, x);
            let sm = t.masked_softmax(xv, allowed.clone())?;
            let wv = t.constant(w.clone());
            let prod = t.mul(sm, wv)?;
            Ok(t.sum_all(prod))
        })
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn every_primitive_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut p = ParamStore::new();
        let a = p.insert("a", Matrix::randn(4, 6, 1.0, &mut r)).unwrap();
        let b = p.insert("b", Matrix::randn(6, 6, 0.5, &mut r)).unwrap();
        let gain = p.insert("gain", Matrix::randn(1, 6, 1.0, &mut r)).unwrap();
        let bias = p.insert("bias", Matrix::randn(1, 6, 1.0, &mut r)).unwrap();
        let fill = p.insert("fill", Matrix::randn(1, 6, 1.0, &mut r)).unwrap();
        let readout = Matrix::randn(4, 6, 1.0, &mut r);
        let pattern = Arc::new(
            RowPattern::from_rows(&[vec![0], vec![0, 1, 2], vec![1, 3], vec![0, 1, 2, 3]], 4).unwrap(),
        );
        let err = grad_check(&p, 1e-5, |t, s| {
            let av = t.param(s, a);
            let bv = t.param(s, b);
            let fv = t.param(s, fill);
            let gv = t.param(s, gain);
            let biv = t.param(s, bias);
            let x = t.replace_rows(av, &[1], fv)?;
            let h = t.layer_norm(x, gv, biv, 1e-5)?;
            let proj = t.matmul(h, bv)?;
            let act = t.gelu(proj);
            let biased = t.add_row(act, biv)?;
            let att = t.attention(biased, h, av, pattern.clone(), 2)?;
            let tr = t.transpose(att);
            let back = t.transpose(tr);
            let normed = t.l2_normalize_rows(back);
            let ro = t.constant(readout.clone());
            let dots = t.row_dot(normed, ro)?;
            let g = t.gather_rows(att, &[0, 2, 2])?;
            let m = t.mean_rows(g);
            let sq = t.square(m);
            let logits = t.concat_cols(&[dots, biased])?;
            let ce = t.cross_entropy(logits, &[0, 3, 1, 6])?;
            let msq = t.mean_all(sq);
            let diff = t.sub(ce, msq)?;
            let scaled = t.scale(diff, 0.7);
            Ok(t.sum_all(scaled))
        })
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn shared_parameter_gets_one_slot() {
    let mut p = ParamStore::new();
    let x = p.insert("x", Matrix::filled(1, 1, 2.0)).unwrap();
    let mut t = Tape::new();
    let a = t.param(&p, x);
    let b = t.param(&p, x);
    assert_eq!(a, b);
    let prod = t.mul(a, b).unwrap();
    let loss = t.sum_all(prod);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.filled(), 1);
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);
}

#[test]
fn rebuilding_is_bitwise_identical() {
    let mut r = rng(5);
    let mut p = ParamStore::new();
    let w = p.insert("w", Matrix::randn(3, 3, 1.0, &mut r)).unwrap();
    let input = Matrix::randn(5, 3, 1.0, &mut r);
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let wv = t.param(&p, w);
        let y = t.matmul(x, wv).unwrap();
        let z = t.gelu(y);
        let loss = t.mean_all(z);
        let g = t.backward(loss).unwrap();
        (t.value(z).clone(), g.get(w).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.data(), v2.data());
    assert_eq!(g1.data(), g2.data());
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::zeros(2, 2));
    assert!(t.backward(x).is_err());
}

#[test]
fn attention_pattern_validation() {
    assert!(matches!(
        RowPattern::from_rows(&[vec![]], 3),
        Err(crate::Error::EmptyAttentionRow)
    ));
    assert!(RowPattern::from_rows(&[vec![3]], 3).is_err());
}

proptest! {
    #[test]
    fn softmax_shift_invariant(
        scores in prop::collection::vec(-50.0f64..50.0, 1..12),
        mask_bits in prop::collection::vec(any::<bool>(), 12),
        shift in -1e3f64..1e3,
    ) {
        let mut allowed: Vec<bool> = mask_bits[..scores.len()].to_vec();
        allowed[0] = true;
        let p = softmax_masked(&scores, &allowed).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax_masked(&shifted, &allowed).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (v, &ok) in p.iter().zip(&allowed) {
            prop_assert!(v.is_finite());
            if ok { prop_assert!(*v > 0.0) } else { prop_assert_eq!(*v, 0.0) }
        }
    }

    #[test]
    fn softmax_finite_for_extreme_scores(
        scores in prop::collection::vec(-1e300f64..1e300, 1..8),
    ) {
        let allowed = vec![true; scores.len()];
        let p = softmax_masked(&scores, &allowed).unwrap();
        prop_assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_standardizes(x in prop::collection::vec(-100.0f64..100.0, 2..16)) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let n = x.len();
        let y = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 0.0).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }
}
