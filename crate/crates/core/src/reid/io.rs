//! Binary embedding container.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | content                 |
//! |-------|-------------------------|
//! | 4     | magic `EMB1`            |
//! | 4     | `u32` dimension `D`     |
//! | 8     | `u64` row count `N`     |
//! | 4·D·N | rows of `f32` values    |
//!
//! Scorer weight files hold two such blocks back to back. The first block
//! has 64 rows of width `3·D + 1` (one hidden channel per row: the `D x 3`
//! kernel in dimension-major order followed by the bias). The second has a
//! single row of width `3·64 + 1` (the `64 x 3` kernel then the bias).

use std::io::{Read, Write};
use std::path::Path;

use super::aggregate::{ConvScorer, CONV_HIDDEN, CONV_KERNEL};
use super::{l2_normalize, Embedding, ReidError};

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Raw rows of one container block.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

pub fn write_block<R: AsRef<[f64]>>(w: &mut impl Write, dim: usize, rows: &[R]) -> Result<(), ReidError> {
    let dim32 = u32::try_from(dim).map_err(|_| ReidError::Format(format!("dimension {dim} too large")))?;
    w.write_all(MAGIC)?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(dim * 4);
    for r in rows {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(ReidError::DimensionMismatch { expected: dim, got: r.len() });
        }
        buf.clear();
        for v in r {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads one block; `Ok(None)` at a clean end of input.
pub fn read_block(r: &mut impl Read) -> Result<Option<EmbeddingBlock>, ReidError> {
    let mut header = [0u8; 16];
    let mut got = 0;
    while got < header.len() {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < header.len() {
        return Err(ReidError::Format("truncated header".into()));
    }
    if &header[..4] != MAGIC {
        return Err(ReidError::Format("bad magic".into()));
    }
    let dim = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let mut rows = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| ReidError::Format("truncated row data".into()))?;
        rows.push(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    Ok(Some(EmbeddingBlock { dim, rows }))
}

pub fn write_embeddings(w: &mut impl Write, dim: usize, rows: &[Embedding]) -> Result<(), ReidError> {
    write_block(w, dim, rows)
}

/// Reads a single-block embedding file, re-normalizing each row.
pub fn read_embeddings(r: &mut impl Read) -> Result<(usize, Vec<Embedding>), ReidError> {
    let block = read_block(r)?.ok_or_else(|| ReidError::Format("empty file".into()))?;
    let rows = block
        .rows
        .iter()
        .map(|row| l2_normalize(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((block.dim, rows))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(usize, Vec<Embedding>), ReidError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_embeddings(&mut f)
}

pub fn save_embeddings(path: impl AsRef<Path>, dim: usize, rows: &[Embedding]) -> Result<(), ReidError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(&mut f, dim, rows)?;
    f.flush()?;
    Ok(())
}

pub fn write_scorer(w: &mut impl Write, s: &ConvScorer) -> Result<(), ReidError> {
    let (w1, b1, w2, b2) = s.parts();
    let d = s.dim();
    let first: Vec<Vec<f64>> = (0..CONV_HIDDEN)
        .map(|c| {
            let mut row = w1[c * d * CONV_KERNEL..(c + 1) * d * CONV_KERNEL].to_vec();
            row.push(b1[c]);
            row
        })
        .collect();
    write_block(w, d * CONV_KERNEL + 1, &first)?;
    let mut second = w2.to_vec();
    second.push(b2);
    write_block(w, CONV_HIDDEN * CONV_KERNEL + 1, &[second])
}

pub fn read_scorer(r: &mut impl Read) -> Result<ConvScorer, ReidError> {
    let first = read_block(r)?.ok_or_else(|| ReidError::Format("missing first kernel block".into()))?;
    let second = read_block(r)?.ok_or_else(|| ReidError::Format("missing second kernel block".into()))?;
    if first.rows.len() != CONV_HIDDEN || first.dim < CONV_KERNEL + 1 || (first.dim - 1) % CONV_KERNEL != 0 {
        return Err(ReidError::Format(format!("first block has {} rows of width {}", first.rows.len(), first.dim)));
    }
    if second.rows.len() != 1 || second.dim != CONV_HIDDEN * CONV_KERNEL + 1 {
        return Err(ReidError::Format(format!("second block has {} rows of width {}", second.rows.len(), second.dim)));
    }
    let d = (first.dim - 1) / CONV_KERNEL;
    let mut w1 = Vec::with_capacity(CONV_HIDDEN * d * CONV_KERNEL);
    let mut b1 = Vec::with_capacity(CONV_HIDDEN);
    for row in &first.rows {
        w1.extend(row[..first.dim - 1].iter().map(|&v| v as f64));
        b1.push(row[first.dim - 1] as f64);
    }
    let row = &second.rows[0];
    let w2 = row[..second.dim - 1].iter().map(|&v| v as f64).collect();
    ConvScorer::new(d, w1, b1, w2, row[second.dim - 1] as f64)
}

pub fn load_scorer(path: impl AsRef<Path>) -> Result<ConvScorer, ReidError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_scorer(&mut f)
}
