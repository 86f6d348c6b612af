//! Flat binary tensor files: `"DMWA"`, version (u32 LE), rank (u32 LE),
//! extents (u32 LE each), then the values as f32 LE.

use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMWA";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rank = cur.u32("rank")? as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: "rank 0".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.pos;
        let e = cur.u32("extent")? as usize;
        if e == 0 {
            return Err(Error::Format {
                offset: at,
                msg: "zero extent".into(),
            });
        }
        shape.push(e);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format {
            offset: cur.pos,
            msg: "extent product overflows".into(),
        })?;
    let start = cur.pos;
    let raw = cur.take(count.saturating_mul(4), "values")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: format!("{} trailing bytes after {count} values at {start}", bytes.len() - cur.pos),
        });
    }
    Tensor::new(shape, data)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DMWA");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_and_bad_inputs() {
        let b = encode(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = decode(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 16, .. }), "{err}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::UnsupportedVersion(2))));
        let mut long = b;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f32 / 7.0) as f64).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
