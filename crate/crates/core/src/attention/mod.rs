//! Block-sparse attention over a topology mask, its dense reference, and the
//! masked transformer encoder built on top of it.

mod encoder;
mod positional;
mod toy;

pub(crate) use encoder::LN_EPS;
pub use encoder::{encoder_forward, Encoder, EncoderBlock, EncoderConfig, EncoderOutput, InitMode};
pub use positional::{pack_positional_encoding, sequence_positional_encoding};
pub use toy::{encode_slide, feature_sequence, mean_pool_summaries, RegionImage, ToyPatchEncoder, POOL_SIDE};

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_masked, Matrix};
use crate::topomask::TopoMaskDescriptor;

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || q.rows() != k.rows() || v.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.cols() == 0 || v.cols() == 0 {
        return Err(Error::Shape("head dimension must be at least 1".into()));
    }
    Ok(())
}

/// Reference O(N²d) masked attention: every score is computed, blocked ones are
/// dropped by the masked softmax.
pub fn dense_oracle_attention<F>(q: &Matrix, k: &Matrix, v: &Matrix, allowed: F) -> Result<Matrix>
where
    F: Fn(usize, usize) -> bool,
{
    check_qkv(q, k, v)?;
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(n, v.cols());
    let mut scores = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            scores[j] = dot(q.row(i), k.row(j)) * scale;
            mask[j] = allowed(i, j);
        }
        let p = softmax_masked(&scores, &mask)?;
        let row = out.row_mut(i);
        for (j, &pj) in p.iter().enumerate() {
            for (o, &x) in row.iter_mut().zip(v.row(j)) {
                *o += pj * x;
            }
        }
    }
    Ok(out)
}

/// Attention restricted to the descriptor's blocks.
pub fn sparse_attention(q: &Matrix, k: &Matrix, v: &Matrix, descriptor: &TopoMaskDescriptor) -> Result<Matrix> {
    sparse_attention_counted(q, k, v, descriptor).map(|(out, _)| out)
}

/// Like [`sparse_attention`], also returning the number of query·key scores evaluated.
///
/// Rows run in parallel; within a row the blocks are visited in a fixed order,
/// so the result does not depend on the thread count.
pub fn sparse_attention_counted(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    descriptor: &TopoMaskDescriptor,
) -> Result<(Matrix, u64)> {
    check_qkv(q, k, v)?;
    let n = descriptor.seq_len();
    if q.rows() != n {
        return Err(Error::Shape(format!("{} tokens against a descriptor for {n}", q.rows())));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = v.cols();
    let evaluated = AtomicU64::new(0);
    let mut out = Matrix::zeros(n, dv);
    out.data_mut()
        .par_chunks_mut(dv)
        .enumerate()
        .for_each_init(Vec::new, |scores: &mut Vec<(usize, f64)>, (i, row)| {
            scores.clear();
            let qi = q.row(i);
            for block in descriptor.row_blocks(i) {
                for j in block.keys.iter() {
                    scores.push((j, dot(qi, k.row(j)) * scale));
                }
            }
            evaluated.fetch_add(scores.len() as u64, Ordering::Relaxed);
            let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (_, s) in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for &(j, w) in scores.iter() {
                let w = w / total;
                for (o, &x) in row.iter_mut().zip(v.row(j)) {
                    *o += w * x;
                }
            }
        });
    Ok((out, evaluated.into_inner()))
}
