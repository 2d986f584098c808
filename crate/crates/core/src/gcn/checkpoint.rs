//! Binary checkpoint for a trained [`GraphEncoder`].
//!
//! Layout (all little-endian):
//!
//! ```text
//! "RXGE" | version u32 | d_gcn u32 | d_llm u32 | L u32 | users u64 | items u64
//! user table f32[users × d_gcn] | item table f32[items × d_gcn]
//! for each of the 3 projection layers: weights f32[out × in], bias f32[out]
//! ```
//!
//! The hidden width is not stored; it is recovered from the payload length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Dense, EmbeddingTable, GraphEncoder, ProjectionNet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RXGE";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 * 4 + 8 * 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: GraphEncoder,
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(path: &Path, encoder: &GraphEncoder) -> Result<()> {
    let table = &encoder.table;
    let proj = &encoder.projection;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(proj.output_width() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.layers as u32).to_le_bytes());
    buf.extend_from_slice(&(table.users.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.items.rows() as u64).to_le_bytes());
    put_matrix(&mut buf, &table.users);
    put_matrix(&mut buf, &table.items);
    for layer in &proj.layers {
        put_matrix(&mut buf, &layer.weight);
        for &b in &layer.bias {
            buf.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        message: message.into(),
    }
}

/// Solves `h² + h·(d_gcn + d_llm + 2) + d_llm = floats` for an integer `h`.
fn hidden_width(floats: u64, d_gcn: u64, d_llm: u64) -> Option<u64> {
    let a = d_gcn + d_llm + 2;
    let c = floats.checked_sub(d_llm)?;
    let disc = (a * a + 4 * c) as f64;
    let guess = ((disc.sqrt() - a as f64) / 2.0).round() as u64;
    (guess.saturating_sub(1)..=guess + 1).find(|&h| h > 0 && h * h + h * a == c)
}

pub fn read_checkpoint(path: &Path, activation: Activation) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, activation)
}

fn decode(bytes: &[u8], activation: Activation) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d_gcn = u32_at(8) as u64;
    let d_llm = u32_at(12) as u64;
    let layers = u32_at(16) as usize;
    let n_users = u64_at(20);
    let n_items = u64_at(28);

    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(4) {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let floats = payload.len() as u64 / 4;
    let table_floats = (n_users + n_items)
        .checked_mul(d_gcn)
        .filter(|&t| t <= floats)
        .ok_or_else(|| bad("embedding tables exceed file size"))?;
    let hidden = hidden_width(floats - table_floats, d_gcn, d_llm)
        .ok_or_else(|| bad("projection payload does not match any hidden width"))?;

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |rows: u64, cols: u64| -> Result<Matrix> {
        let data: Vec<f64> = values.by_ref().take((rows * cols) as usize).collect();
        Matrix::from_vec(rows as usize, cols as usize, data)
    };
    let users = take(n_users, d_gcn)?;
    let items = take(n_items, d_gcn)?;
    let mut dense = |input: u64, output: u64| -> Result<Dense> {
        let weight = take(output, input)?;
        let bias = take(1, output)?.as_slice().to_vec();
        Ok(Dense { weight, bias })
    };
    let l0 = dense(d_gcn, hidden)?;
    let l1 = dense(hidden, hidden)?;
    let l2 = dense(hidden, d_llm)?;
    let projection = ProjectionNet::from_layers([l0, l1, l2], activation)?;
    let table = EmbeddingTable { users, items, layers };
    if !table.is_finite() || !projection.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(Checkpoint {
        encoder: GraphEncoder { table, projection },
    })
}
