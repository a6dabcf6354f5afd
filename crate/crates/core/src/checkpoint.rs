//! TPCK: little-endian binary checkpoint of named f64 tensors plus string metadata.
//!
//! ```text
//! "TPCK" | version u32 | meta count u32 | tensor count u32
//! per meta entry:  key len u32 | key utf-8 | value len u32 | value utf-8
//! per tensor:      name len u32 | name utf-8 | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! Metadata is written in key order and tensors in store order, so reading and
//! rewriting a file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{eof_as_truncation, Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest name or metadata string accepted on read.
const MAX_STRING: usize = 1 << 20;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { params, meta: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_checkpoint(self, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(BufReader::new(File::open(path)?))
    }
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| Error::Format(format!("{what} length {n} exceeds u32")))
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    buf.extend_from_slice(&len_u32(s.len(), "string")?);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&len_u32(ckpt.meta.len(), "metadata table")?);
    buf.extend_from_slice(&len_u32(ckpt.params.len(), "tensor table")?);
    for (k, v) in &ckpt.meta {
        put_str(&mut buf, k)?;
        put_str(&mut buf, v)?;
    }
    for (_, name, value) in ckpt.params.iter() {
        put_str(&mut buf, name)?;
        buf.extend_from_slice(&len_u32(value.rows(), "row")?);
        buf.extend_from_slice(&len_u32(value.cols(), "column")?);
        for &x in value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn get_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str<R: Read>(input: &mut R) -> Result<String> {
    let len = get_u32(input)? as usize;
    if len > MAX_STRING {
        return Err(Error::Format(format!("string length {len} is implausible")));
    }
    let mut b = vec![0u8; len];
    input.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("string is not utf-8: {e}")))
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    read_checkpoint_body(input).map_err(eof_as_truncation)
}

fn read_checkpoint_body<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_count = get_u32(&mut input)?;
    let tensor_count = get_u32(&mut input)?;
    let mut meta = BTreeMap::new();
    let mut last_key: Option<String> = None;
    for _ in 0..meta_count {
        let k = get_str(&mut input)?;
        let v = get_str(&mut input)?;
        if last_key.as_ref().is_some_and(|prev| prev >= &k) {
            return Err(Error::Format(format!("metadata key {k:?} out of order or repeated")));
        }
        last_key = Some(k.clone());
        meta.insert(k, v);
    }
    let mut params = ParamStore::new();
    for _ in 0..tensor_count {
        let name = get_str(&mut input)?;
        let rows = get_u32(&mut input)? as usize;
        let cols = get_u32(&mut input)? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Format(format!("{name} size overflows")))?;
        let mut raw = Vec::new();
        // `take` bounds the allocation by what the stream actually holds.
        (&mut input).take(count as u64 * 8).read_to_end(&mut raw)?;
        if raw.len() != count * 8 {
            return Err(Error::Format(format!("tensor {name} truncated")));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)?)?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { params, meta })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for t in 0..rng.random_range(0..6) {
            let (r, c) = (rng.random_range(0..5), rng.random_range(0..5));
            params.insert(format!("t{t}.w"), Matrix::randn(r, c, 1.0, &mut rng)).unwrap();
        }
        Checkpoint::new(params).with_meta("stage", "mae1").with_meta("dim", "16")
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for seed in 0..20 {
            let ck = sample(seed);
            let mut a = Vec::new();
            write_checkpoint(&ck, &mut a).unwrap();
            let back = read_checkpoint(a.as_slice()).unwrap();
            assert_eq!(back, ck);
            let mut b = Vec::new();
            write_checkpoint(&back, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let mut params = ParamStore::new();
        params.insert("w", Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&Checkpoint::new(params).with_meta("a", "b"), &mut bytes).unwrap();
        let mut expected = b"TPCK".to_vec();
        for v in [1u32, 1, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(b'a');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'b');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(3), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(3), &mut bytes).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(read_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tpck");
        let ck = sample(5);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
