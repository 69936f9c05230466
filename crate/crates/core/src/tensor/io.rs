//! `ICDT` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                          |
//! |------------|----------------------------------|
//! | 4          | magic `ICDT`                     |
//! | 1          | version (currently 1)            |
//! | 1          | rank `r`                         |
//! | 8 * r      | extents as `u64`                 |
//! | 8 * numel  | values as `f64`, row-major       |

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ICDT";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::dim("icdt", format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            offset,
            reason: format!("truncated {what}"),
        },
        _ => Error::Io(e),
    })
}

/// Reads one tensor; error offsets are relative to the start of the blob.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    fill(r, &mut head, 0, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:?}", &head[..4]),
        });
    }
    if head[4] != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {}", head[4]),
        });
    }
    let rank = head[5] as usize;
    let mut offset = 6u64;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        fill(r, &mut b8, offset, "extents")?;
        let d = u64::from_le_bytes(b8);
        if d == 0 {
            return Err(Error::Format {
                offset,
                reason: "zero extent".into(),
            });
        }
        shape.push(usize::try_from(d).map_err(|_| Error::Format {
            offset,
            reason: format!("extent {d} too large"),
        })?);
        offset += 8;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 6,
            reason: "element count overflows".into(),
        })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        fill(r, &mut b8, offset, "data")?;
        data.push(f64::from_le_bytes(b8));
        offset += 8;
    }
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
