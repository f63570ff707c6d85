//! Binary tensor records: magic `CMRT`, `u32` rank, `u32` dims, then the
//! payload as little-endian `f64`. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMRT";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Size in bytes of the record `write_tensor` produces.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 4 + 4 * t.rank() + 8 * t.len()
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: "<stream>".into(),
            reason: format!("bad tensor magic {magic:?}"),
        });
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format {
            path: "<stream>".into(),
            reason: format!("implausible tensor rank {rank}"),
        });
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"CMRT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = to_bytes(&Tensor::zeros(&[1]));
        b[0] = b'X';
        assert!(read_tensor(&mut b.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let mut rng = super::super::rng::stream(seed, "io");
            let t = super::super::rng::normal(&mut rng, &shape, 3.0);
            let back = read_tensor(&mut to_bytes(&t).as_slice()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
