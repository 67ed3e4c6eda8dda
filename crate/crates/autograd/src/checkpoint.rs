//! Binary checkpoint container.
//!
//! Layout: the magic bytes `HTGNN1`, a 32-byte configuration digest, then
//! zero or more entries until end of input. Each entry is
//! `u32 name_len | name (UTF-8) | u32 rank | rank × u64 dims | values`
//! where values are row-major little-endian `f64`. All integers are
//! little-endian.

use std::io::{Read, Write};

use crate::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 6] = b"HTGNN1";
pub type Digest = [u8; 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write<W: Write>(mut w: W, digest: &Digest, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(digest)?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = e.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TensorError::Checkpoint(format!("truncated {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a container, rejecting it unless its digest equals `expected`.
pub fn read<R: Read>(mut r: R, expected: &Digest) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 6];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut digest = [0u8; 32];
    read_exact_or(&mut r, &mut digest, "digest")?;
    if &digest != expected {
        return Err(TensorError::Checkpoint(
            "configuration digest mismatch".into(),
        ));
    }
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf[..1])? {
            0 => break,
            _ => read_exact_or(&mut r, &mut len_buf[1..], "entry header")?,
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "entry name")?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut r, &mut b, "dims")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        read_exact_or(&mut r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| TensorError::Checkpoint(format!("entry {name}: {e}")))?;
        entries.push(Entry { name, tensor });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_digest_check() {
        let entries = vec![
            Entry {
                name: "hg.layer0.theta".into(),
                tensor: Tensor::new(&[2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap(),
            },
            Entry {
                name: "scalar".into(),
                tensor: Tensor::scalar(3.25),
            },
        ];
        let digest = [7u8; 32];
        let mut buf = Vec::new();
        write(&mut buf, &digest, &entries).unwrap();
        assert_eq!(&buf[..6], MAGIC);
        let back = read(buf.as_slice(), &digest).unwrap();
        assert_eq!(back, entries);
        assert!(matches!(
            read(buf.as_slice(), &[0u8; 32]),
            Err(TensorError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_input_is_rejected() {
        let digest = [1u8; 32];
        let mut buf = Vec::new();
        let entries = vec![Entry {
            name: "w".into(),
            tensor: Tensor::zeros(&[3]),
        }];
        write(&mut buf, &digest, &entries).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read(buf.as_slice(), &digest).is_err());
    }
}
