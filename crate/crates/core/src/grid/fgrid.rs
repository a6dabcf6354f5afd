//! FGRID: little-endian binary container for a feature grid.
//!
//! ```text
//! "FGRD" | version u32 | H u32 | W u32 | D u32
//! H*W*D f32, row-major by (i, j, d)
//! ceil(H*W/8) bytes of validity, LSB-first, cells row-major, zero-padded
//! ```

use std::io::{Read, Write};

use crate::error::{eof_as_truncation, Error, Result};
use crate::grid::FeatureGrid;

pub const FGRID_MAGIC: &[u8; 4] = b"FGRD";
pub const FGRID_VERSION: u32 = 1;

pub fn write_fgrid<W: Write>(grid: &FeatureGrid, mut out: W) -> Result<()> {
    let dims = [grid.height(), grid.width(), grid.dim()];
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(FGRID_MAGIC);
    header.extend_from_slice(&FGRID_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    out.write_all(&header)?;

    let mut body = Vec::with_capacity(grid.features().len() * 4 + grid.cell_count().div_ceil(8));
    for &v in grid.features() {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut bits = vec![0u8; grid.cell_count().div_ceil(8)];
    for (c, &ok) in grid.validity().iter().enumerate() {
        if ok {
            bits[c / 8] |= 1 << (c % 8);
        }
    }
    body.extend_from_slice(&bits);
    out.write_all(&body)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_fgrid<R: Read>(input: R) -> Result<FeatureGrid> {
    read_fgrid_body(input).map_err(eof_as_truncation)
}

fn read_fgrid_body<R: Read>(mut input: R) -> Result<FeatureGrid> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FGRID_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != FGRID_VERSION {
        return Err(Error::Format(format!("unsupported FGRID version {version}")));
    }
    let height = read_u32(&mut input)? as usize;
    let width = read_u32(&mut input)? as usize;
    let dim = read_u32(&mut input)? as usize;
    let cells = height
        .checked_mul(width)
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let values = cells
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("feature count overflows".into()))?;

    let mut raw = Vec::new();
    // `take` bounds the allocation by what the stream actually holds.
    (&mut input).take(values as u64 * 4).read_to_end(&mut raw)?;
    if raw.len() != values * 4 {
        return Err(Error::Format("feature block is truncated".into()));
    }
    let features = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut bits = vec![0u8; cells.div_ceil(8)];
    input.read_exact(&mut bits)?;
    if cells % 8 != 0 {
        let tail = bits[bits.len() - 1] >> (cells % 8);
        if tail != 0 {
            return Err(Error::Format("non-zero padding bits in validity bitmap".into()));
        }
    }
    let valid = (0..cells).map(|c| bits[c / 8] & (1 << (c % 8)) != 0).collect();

    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after validity bitmap".into()));
    }
    FeatureGrid::new(height, width, dim, features, valid)
}
