//! File formats for mel-spectrograms and per-token durations, plus the
//! byte cursor shared by every binary reader in the crate.
//!
//! All binary containers start with an 8-byte magic and a version byte;
//! integers and floats are little-endian.
//!
//! Mel container (`NARTMEL\0`, version 1):
//!
//! ```text
//! frames u32, bins u32, frames*bins x f32 (row-major, frame-major)
//! ```
//!
//! Duration container (`NARTDURS`, version 1), records until end of file:
//!
//! ```text
//! tokens u32, tokens x (phoneme_id u32, frames u32)
//! ```
//!
//! The textual duration form starts with the line `# nartts durations v1`
//! and holds one utterance per line: `<tokens> <id>:<frames> ...`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MEL_MAGIC: &[u8; 8] = b"NARTMEL\0";
pub const MEL_VERSION: u8 = 1;
pub const DURATION_MAGIC: &[u8; 8] = b"NARTDURS";
pub const DURATION_VERSION: u8 = 1;
const DURATION_TEXT_HEADER: &str = "# nartts durations v1";

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn expect_header(&mut self, magic: &'static [u8; 8], version: u8) -> Result<()> {
        let m = self.bytes(8, "magic")?;
        if m != magic {
            return Err(Error::BadMagic { expected: magic });
        }
        let v = self.u8("version")?;
        if v != version {
            return Err(Error::UnsupportedVersion {
                found: v,
                supported: version,
            });
        }
        Ok(())
    }
}

/// A row-major mel-spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Mel {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f32>,
}

impl Mel {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

pub fn write_mel<W: Write>(mut w: W, mel: &Mel) -> Result<()> {
    if mel.values.len() != mel.frames * mel.bins {
        return Err(Error::invalid("mel value count does not match frames x bins"));
    }
    w.write_all(MEL_MAGIC)?;
    w.write_all(&[MEL_VERSION])?;
    w.write_all(&(mel.frames as u32).to_le_bytes())?;
    w.write_all(&(mel.bins as u32).to_le_bytes())?;
    for v in &mel.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mel<R: Read>(mut r: R) -> Result<Mel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor::new(&buf);
    cur.expect_header(MEL_MAGIC, MEL_VERSION)?;
    let frames = cur.u32("frame count")? as usize;
    let bins = cur.u32("bin count")? as usize;
    let mut values = Vec::with_capacity(frames * bins);
    for _ in 0..frames * bins {
        values.push(cur.f32("mel value")?);
    }
    Ok(Mel { frames, bins, values })
}

/// Whitespace-separated matrix, one frame per line.
pub fn write_mel_text<W: Write>(mut w: W, mel: &Mel) -> Result<()> {
    for t in 0..mel.frames {
        let line: Vec<String> = mel.frame(t).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Per-token (phoneme id, frames) pairs of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DurationRecord {
    pub tokens: Vec<(usize, usize)>,
}

pub fn write_durations<W: Write>(mut w: W, records: &[DurationRecord]) -> Result<()> {
    w.write_all(DURATION_MAGIC)?;
    w.write_all(&[DURATION_VERSION])?;
    for r in records {
        w.write_all(&(r.tokens.len() as u32).to_le_bytes())?;
        for &(id, f) in &r.tokens {
            w.write_all(&(id as u32).to_le_bytes())?;
            w.write_all(&(f as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_durations<R: Read>(mut r: R) -> Result<Vec<DurationRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor::new(&buf);
    cur.expect_header(DURATION_MAGIC, DURATION_VERSION)?;
    let mut out = Vec::new();
    while !cur.is_empty() {
        let n = cur.u32("token count")? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let id = cur.u32("phoneme id")? as usize;
            let f = cur.u32("frames")? as usize;
            tokens.push((id, f));
        }
        out.push(DurationRecord { tokens });
    }
    Ok(out)
}

pub fn write_durations_text<W: Write>(mut w: W, records: &[DurationRecord]) -> Result<()> {
    writeln!(w, "{DURATION_TEXT_HEADER}")?;
    for r in records {
        write!(w, "{}", r.tokens.len())?;
        for (id, f) in &r.tokens {
            write!(w, " {id}:{f}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_durations_text(text: &str) -> Result<Vec<DurationRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DURATION_TEXT_HEADER => {}
        Some(h) if h.starts_with("# nartts durations v") => {
            let found = h.trim_start_matches("# nartts durations v").trim().parse().unwrap_or(0);
            return Err(Error::UnsupportedVersion {
                found,
                supported: DURATION_VERSION,
            });
        }
        _ => return Err(Error::invalid("missing duration text header")),
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::invalid(format!("duration text line {}: '{line}'", no + 2));
        let mut parts = line.split_whitespace();
        let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut tokens = Vec::with_capacity(n);
        for p in parts {
            let (id, f) = p.split_once(':').ok_or_else(bad)?;
            tokens.push((id.parse().map_err(|_| bad())?, f.parse().map_err(|_| bad())?));
        }
        if tokens.len() != n {
            return Err(bad());
        }
        out.push(DurationRecord { tokens });
    }
    Ok(out)
}
