//! Binary tensor file format.
//!
//! Layout, all little-endian:
//!   bytes 0..4   magic "FTNS"
//!   bytes 4..6   version, u16, currently 1
//!   byte  6      dtype code: 0 = real32, 1 = complex64 (pair of f32)
//!   byte  7      rank, u8
//!   then rank x u32 dims, then the raw f32 payload (interleaved re,im
//!   for complex). File length is 8 + 4*rank + 4*width*product(dims).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Dtype, Tensor};

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u16 = 1;

fn dtype_code(d: Dtype) -> u8 {
    match d {
        Dtype::Real => 0,
        Dtype::Complex => 1,
    }
}

pub fn save_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let dims_bytes = 4 * t.rank();
    let mut out = Vec::with_capacity(8 + dims_bytes + 4 * t.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype_code(t.dtype()));
    out.push(u8::try_from(t.rank()).map_err(|_| Error::Dimension("rank exceeds 255".into()))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Dimension("extent exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", magic),
        });
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let code = cur.take(1, "dtype")?[0];
    let dtype = match code {
        0 => Dtype::Real,
        1 => Dtype::Complex,
        _ => {
            return Err(Error::Format {
                offset: 6,
                msg: format!("unknown dtype code {code}"),
            })
        }
    };
    let rank = cur.take(1, "rank")?[0] as usize;

    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = cur.pos as u64;
        let d = u32::from_le_bytes(cur.take(4, "dims")?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: off,
                msg: format!("zero extent in dim {i}"),
            });
        }
        shape.push(d);
    }

    let numel: usize = shape.iter().product();
    let scalars = numel * dtype.width();
    let payload_off = cur.pos;
    let payload = cur.take(4 * scalars, "payload")?;
    if cur.pos != buf.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }

    let mut data = Vec::with_capacity(scalars);
    for i in 0..scalars {
        let b = &payload[4 * i..4 * i + 4];
        data.push(f32::from_le_bytes(b.try_into().unwrap()));
    }
    let _ = payload_off;

    match dtype {
        Dtype::Real => Tensor::from_vec(&shape, data),
        Dtype::Complex => Tensor::from_interleaved(&shape, data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_real_is_bitwise() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ftns");
        let t = Tensor::<f32>::from_vec(
            &[3, 3],
            (0..9).map(|i| (i as f32).sin() * 1e-3 + i as f32).collect(),
        )
        .unwrap();
        save_tensor(&t, &p).unwrap();
        let r = load_tensor(&p).unwrap();
        assert_eq!(t.shape(), r.shape());
        assert_eq!(t.dtype(), r.dtype());
        for (a, b) in t.data().iter().zip(r.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn complex_2x2_is_48_bytes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ftns");
        let t = Tensor::<f32>::from_complex(
            &[2, 2],
            &[
                Complex::new(1.0, 2.0),
                Complex::new(3.0, 4.0),
                Complex::new(5.0, 6.0),
                Complex::new(7.0, 8.0),
            ],
        )
        .unwrap();
        save_tensor(&t, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 48);
        let r = load_tensor(&p).unwrap();
        assert_eq!(r.dtype(), Dtype::Complex);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ftns");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x01\x04\x00\x00\x00").unwrap();
        match load_tensor(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_end_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ftns");
        let t = Tensor::<f32>::zeros(&[4]);
        save_tensor(&t, &p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 3]).unwrap();
        match load_tensor(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (full.len() - 3) as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_dtype_and_trailing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.ftns");
        let t = Tensor::<f32>::zeros(&[2]);
        save_tensor(&t, &p).unwrap();
        let mut b = std::fs::read(&p).unwrap();

        let mut v = b.clone();
        v[4] = 9;
        std::fs::write(&p, &v).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { offset: 4, .. })));

        let mut d = b.clone();
        d[6] = 7;
        std::fs::write(&p, &d).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { offset: 6, .. })));

        b.push(0);
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }
}
