//! Checkpoint files: a flat, ordered list of named parameter blocks.
//!
//! Layout (all integers little-endian u32, floats little-endian f64):
//!
//! ```text
//! magic "HCPL" | version | block count
//! per block: name length | name bytes (UTF-8) | rank | extents… | payload…
//! ```
//!
//! The payload length is the product of the extents. Files are
//! self-describing and byte-identical for identical parameters, so
//! checkpoints diff cleanly across runs.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"HCPL";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes `(name, tensor)` blocks in the given order. Names must be unique
/// and nonempty.
pub fn write_blocks(path: &Path, blocks: &[(String, Tensor)]) -> Result<()> {
    let mut seen = HashMap::new();
    for (name, _) in blocks {
        if name.is_empty() {
            return Err(Error::Checkpoint("empty block name".into()));
        }
        if seen.insert(name, ()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block name `{name}`")));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, u32::try_from(blocks.len()).expect("block count fits u32"))?;
    for (name, t) in blocks {
        write_u32(&mut w, u32::try_from(name.len()).expect("name length fits u32"))?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, u32::try_from(t.shape.len()).expect("rank fits u32"))?;
        for &e in &t.shape {
            write_u32(&mut w, u32::try_from(e).expect("extent fits u32"))?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads back every block in file order.
pub fn read_blocks(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint file (magic {magic:?})"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    let mut seen = HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block name `{name}`")));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        blocks.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after final block".into()));
    }
    Ok(blocks)
}

/// Assigns loaded blocks onto a component's parameters via its `visit_mut`
/// walk. Every parameter must be present with a matching shape, and every
/// block must be consumed; `requires_grad` flags are preserved.
pub fn assign_blocks(
    blocks: Vec<(String, Tensor)>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut map = HashMap::new();
    for (name, t) in blocks {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block name `{name}`")));
        }
    }
    let mut first_err = None;
    visit(&mut |name, t| {
        if first_err.is_some() {
            return;
        }
        match map.remove(name) {
            None => {
                first_err = Some(Error::Checkpoint(format!(
                    "checkpoint is missing block `{name}`"
                )));
            }
            Some(src) => {
                if src.shape != t.shape {
                    first_err = Some(Error::dim(
                        &format!("checkpoint block `{name}`"),
                        &t.shape,
                        &src.shape,
                    ));
                } else {
                    t.data = src.data;
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if !map.is_empty() {
        let mut extras: Vec<&String> = map.keys().collect();
        extras.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint has unknown block `{}`",
            extras[0]
        )));
    }
    Ok(())
}
