use crate::grid::{PackLayout, TokenKind};
use crate::numerics::Matrix;

pub(crate) fn sinusoid(pos: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for p in 0..half {
        let freq = 1.0 / 10_000f64.powf(2.0 * p as f64 / out.len().max(1) as f64);
        out[2 * p] = (pos * freq).sin();
        out[2 * p + 1] = (pos * freq).cos();
    }
}

/// 2D sinusoidal encoding per token: the first half of the channels encodes the
/// row, the second half the column. Patches use their grid cell, summaries the
/// centre of their pack, and the global token gets zeros.
pub fn pack_positional_encoding(layout: &PackLayout, dim: usize) -> Matrix {
    let n = layout.seq_len();
    let mut out = Matrix::zeros(n, dim);
    let centre = (layout.k() as f64 - 1.0) / 2.0;
    for t in 0..n {
        let (r, c) = match layout.kind_unchecked(t) {
            TokenKind::Global => continue,
            TokenKind::Patch { .. } => {
                let (i, j) = layout.token_to_coord(t).expect("patch token");
                (i as f64, j as f64)
            }
            TokenKind::Summary { pack } => {
                let (r0, c0) = layout.pack_origin(pack).expect("pack in range");
                (r0 as f64 + centre, c0 as f64 + centre)
            }
        };
        let row = out.row_mut(t);
        let (rows, cols) = row.split_at_mut(dim / 2);
        sinusoid(r, rows);
        sinusoid(c, cols);
    }
    out
}

/// 1D sinusoidal encoding of sequence position, one row per position.
pub fn sequence_positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut out = Matrix::zeros(len, dim);
    for t in 0..len {
        sinusoid(t as f64, out.row_mut(t));
    }
    out
}
