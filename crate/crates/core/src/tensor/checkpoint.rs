//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "NARTCKPT"
//! version u8       1
//! record* until end of file:
//!   name_len u32, name utf-8 bytes,
//!   rank u32, extents rank x u32,
//!   values product(extents) x f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NARTCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    for r in records {
        let n: usize = r.shape.iter().product();
        if n != r.values.len() {
            return Err(Error::invalid(format!("record '{}' shape/value mismatch", r.name)));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &e in &r.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = crate::io::Cursor::new(&buf);
    cur.expect_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut out = Vec::new();
    while !cur.is_empty() {
        let len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.bytes(len, "name")?.to_vec())
            .map_err(|_| Error::invalid("parameter name is not utf-8"))?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(cur.f64("value")?);
        }
        out.push(Record { name, shape, values });
    }
    Ok(out)
}
