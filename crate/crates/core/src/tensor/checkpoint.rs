//! `PMCK1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMCK1"
//! repeated until EOF:
//!   u32 name_len, name_len bytes of UTF-8 name
//!   u32 rank, rank x u64 dims
//!   product(dims) x f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PMCK1";

pub fn write_to<'a, W: Write>(
    w: &mut W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, entries).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint from bytes. `origin` only labels errors.
pub fn read_from<R: Read>(r: &mut R, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |reason: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        reason,
    };
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(origin, e))?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(bad("missing PMCK1 magic".into()));
    }
    let mut pos = MAGIC.len();
    let take = |n: usize, pos: &mut usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(bad(format!("truncated record at byte {pos}")));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    while pos < buf.len() {
        let name_len = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len, &mut pos)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(4, &mut pos)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, &mut pos)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 4, &mut pos)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file), path)
}

/// Looks up a tensor by name.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Reads a scalar stored as a rank-0 tensor.
pub fn find_scalar(entries: &[(String, Tensor)], name: &str) -> Result<f32> {
    let t = find(entries, name)?;
    t.data()
        .first()
        .copied()
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

pub fn scalar_entry(name: &str, v: f32) -> (String, Tensor) {
    (
        name.to_string(),
        Tensor::new(vec![], vec![v]).expect("rank-0 scalar"),
    )
}
