//! RXHA embedding cache: `"RXHA"`, version u32, width u32, count u64, then
//! per row a u16 id length, the UTF-8 id, and `width` f32 values. All
//! integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RXHA";
pub const VERSION: u32 = 1;

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        format: "RXHA",
        message: message.into(),
    }
}

pub fn write_embedding_cache(path: &Path, dim: usize, rows: &[(String, Vec<f32>)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(rows.len() as u64).to_le_bytes()).map_err(io)?;
    for (id, v) in rows {
        if v.len() != dim {
            return Err(Error::WidthDrift {
                expected: dim,
                found: v.len(),
            });
        }
        let len = u16::try_from(id.len()).map_err(|_| bad(format!("id of {} bytes is too long", id.len())))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        for x in v {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f32>)>,
}

pub fn read_embedding_cache(path: &Path) -> Result<EmbeddingCache> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|_| bad(format!("truncated {what}")))?;
        Ok(buf)
    };
    if take(4, "magic")? != MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = u32::from_le_bytes(take(4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(8, "header")?.try_into().unwrap());
    let mut rows = Vec::new();
    for k in 0..count {
        let len = u16::from_le_bytes(take(2, "row header")?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(len, "id")?).map_err(|_| bad(format!("row {k}: id is not UTF-8")))?;
        let v = take(dim * 4, "vector")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        rows.push((id, v));
    }
    if take(1, "").is_ok() {
        return Err(bad("trailing bytes after last row"));
    }
    Ok(EmbeddingCache { dim, rows })
}
