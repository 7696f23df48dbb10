//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ODTQCKPT"
//! version  u32
//! records  until EOF:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 x rank
//!   payload  f64 x product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ParamStore, Tensor};
use super::{GradError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ODTQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in store.snapshot() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in &t.values {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| GradError::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GradError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?.ok_or_else(|| GradError::Checkpoint("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(GradError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut entries = Vec::new();
    while let Some(name_len) = read_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| GradError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?.ok_or_else(|| truncated_at(&name))?;
        if rank > MAX_RANK {
            return Err(GradError::Checkpoint(format!("rank {rank} of `{name}` too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| truncated_at(&name))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| truncated_at(&name))?;
            values.push(f64::from_le_bytes(b));
        }
        entries.push((name, Tensor { shape, values }));
    }
    ParamStore::from_snapshot(entries)
}

impl ParamStore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(self, BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(BufReader::new(File::open(path)?))
    }
}

/// `Ok(None)` on a clean EOF before the first byte.
fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(GradError::Checkpoint("truncated record".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn truncated(_: std::io::Error) -> GradError {
    GradError::Checkpoint("truncated record".into())
}

fn truncated_at(name: &str) -> GradError {
    GradError::Checkpoint(format!("truncated record for `{name}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("emb", vec![3, 2], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25])
            .unwrap();
        s.insert("bias", vec![2], vec![0.5, f64::MAX]).unwrap();
        s.insert("scalar", vec![], vec![42.0]).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_bits() {
        let s = sample_store();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(s.snapshot(), back.snapshot());
    }

    #[test]
    fn rejects_unknown_version() {
        let mut buf = Vec::new();
        write_checkpoint(&sample_store(), &mut buf).unwrap();
        buf[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&sample_store(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let cut = &buf[..buf.len() - 3];
        assert!(read_checkpoint(cut).is_err());
    }
}
