//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "FPRX1"
//! version u32      1
//! then, until end of file, one record per parameter:
//!   name_len u32, name (UTF-8), rank u32, dims u64 * rank, payload f64 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::ParamGraph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FPRX1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(graph: &ParamGraph, w: W) -> Result<()> {
    write_tensors(graph.named_params(), w)
}

pub fn save_checkpoint(graph: &ParamGraph, path: &Path) -> Result<()> {
    write_checkpoint(graph, BufWriter::new(File::create(path)?))
}

/// Writes arbitrary named tensors in the checkpoint layout.
pub fn write_tensors<'a, W, I>(records: I, mut w: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, value) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_tensors<'a, I>(records: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    write_tensors(records, BufWriter::new(File::create(path)?))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

pub(crate) fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses every record of a checkpoint stream.
pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(5).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = cur.u32().ok_or_else(|| format_err(path, "truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !cur.done() {
        let trunc = || format_err(path, format!("truncated record {}", out.len()));
        let name_len = cur.u32().ok_or_else(trunc)? as usize;
        let name = String::from_utf8(cur.take(name_len).ok_or_else(trunc)?.to_vec())
            .map_err(|_| format_err(path, "parameter name is not UTF-8"))?;
        let rank = cur.u32().ok_or_else(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(trunc)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(cur.u64().ok_or_else(trunc)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites every parameter of `graph` from the file. Every graph
/// parameter must be present with a matching shape.
pub fn load_checkpoint(graph: &mut ParamGraph, path: &Path) -> Result<()> {
    let records = read_checkpoint(BufReader::new(File::open(path)?), path)?;
    restore(graph, records, path)
}

pub fn restore(graph: &mut ParamGraph, records: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    let mut seen = vec![false; graph.param_count()];
    for (name, value) in records {
        let id = graph
            .find_param(&name)
            .ok_or_else(|| format_err(path, format!("unknown parameter '{name}'")))?;
        value.ensure_finite(&name)?;
        graph.set_param_value(id, value)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = graph.param_ids().find(|id| !seen[id.index()]) {
        return Err(format_err(path, format!("missing parameter '{}'", graph.param_name(missing))));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
