//! On-disk formats: embedding matrices, head checkpoints, dataset
//! manifests, ground truth, and difficulty splits.
//!
//! Matrices are stored column-contiguous as little-endian f32 behind a
//! 16-byte header (magic, version, dim, count); reading converts back to
//! f64 exactly, so write-read-write cycles are byte-identical. Checkpoints
//! keep full f64 precision and carry a JSON sidecar with provenance.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingMatrix, Role};
use crate::error::{Error, Result};
use crate::trainer::StudentHead;
use crate::world::Split;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"RDEM";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDCK";
pub const FORMAT_VERSION: u32 = 1;

fn path_string(path: &Path) -> String {
    path.display().to_string()
}

fn checked_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::ShapeMismatch {
        context: format!("{what} {value} exceeds the format's u32 range"),
    })
}

/// Writes any matrix as little-endian f32, column-contiguous.
pub fn write_matrix(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&EMBEDDING_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&checked_u32(matrix.nrows(), "dim")?.to_le_bytes())?;
    out.write_all(&checked_u32(matrix.ncols(), "count")?.to_le_bytes())?;
    // nalgebra stores column-major, so storage order is already
    // column-contiguous.
    for &value in matrix.iter() {
        out.write_all(&(value as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix`]; f32 to f64 is exact.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file_len = fs::metadata(path)?.len();
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| Error::TruncatedPayload {
            path: path_string(path),
            expected: 0,
            got: 0,
        })?;
    let magic: [u8; 4] = header[0..4].try_into().expect("fixed slice");
    if magic != EMBEDDING_MAGIC {
        return Err(Error::BadMagic {
            path: path_string(path),
            expected: EMBEDDING_MAGIC,
            got: magic,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("fixed slice"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path_string(path),
            got: version,
            supported: FORMAT_VERSION,
        });
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().expect("fixed slice")) as usize;
    let count = u32::from_le_bytes(header[12..16].try_into().expect("fixed slice")) as usize;
    let values = dim.checked_mul(count).ok_or_else(|| Error::ShapeMismatch {
        context: format!("header declares an implausible {dim}x{count} matrix"),
    })?;
    // Verify the real size before allocating anything header-sized.
    if file_len != 16 + 4 * values as u64 {
        return Err(Error::TruncatedPayload {
            path: path_string(path),
            expected: values,
            got: (file_len.saturating_sub(16) / 4) as usize,
        });
    }
    let mut payload = vec![0u8; 4 * values];
    file.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")) as f64);
    Ok(DMatrix::from_iterator(dim, count, data))
}

/// Stores unit-norm embeddings; the payload is their f32 rounding.
pub fn write_embedding_file(path: &Path, embeddings: &EmbeddingMatrix) -> Result<()> {
    write_matrix(path, embeddings.data())
}

/// Loads embeddings, restoring exact unit norms lost to f32 quantization.
pub fn read_embedding_file(path: &Path, role: Role) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::normalize_columns(read_matrix(path)?, role)
}

/// Provenance stored beside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// 1-based epoch the weights were taken after.
    pub epoch: usize,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
    /// True for snapshot-averaged weights, false for a single snapshot.
    pub averaged: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the head's tensors (f64) plus a JSON sidecar.
pub fn write_checkpoint(path: &Path, head: &StudentHead, meta: &CheckpointMeta) -> Result<()> {
    let tensors = head.parameters();
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(head.layer_count() as u32 - 1).to_le_bytes())?;
    out.write_all(&checked_u32(tensors.len(), "tensor count")?.to_le_bytes())?;
    for tensor in tensors {
        out.write_all(&checked_u32(tensor.nrows(), "rows")?.to_le_bytes())?;
        out.write_all(&checked_u32(tensor.ncols(), "cols")?.to_le_bytes())?;
        for &value in tensor.iter() {
            out.write_all(&value.to_le_bytes())?;
        }
    }
    out.flush()?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(meta)? + "\n",
    )?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, bytes: usize, values: usize, value_size: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.offset;
        if remaining < bytes {
            return Err(Error::TruncatedPayload {
                path: path_string(self.path),
                expected: values,
                got: remaining / value_size,
            });
        }
        let slice = &self.buf[self.offset..self.offset + bytes];
        self.offset += bytes;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let slice = self.take(4, 1, 4)?;
        Ok(u32::from_le_bytes(slice.try_into().expect("fixed slice")))
    }
}

/// Reads a checkpoint and its sidecar back into a usable head.
pub fn read_checkpoint(path: &Path) -> Result<(StudentHead, CheckpointMeta)> {
    let buf = fs::read(path)?;
    let mut cursor = Cursor {
        buf: &buf,
        offset: 0,
        path,
    };
    let magic: [u8; 4] = cursor.take(4, 1, 4)?.try_into().expect("fixed slice");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path_string(path),
            expected: CHECKPOINT_MAGIC,
            got: magic,
        });
    }
    let version = cursor.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path_string(path),
            got: version,
            supported: FORMAT_VERSION,
        });
    }
    let kind = cursor.read_u32()?;
    let tensor_count = cursor.read_u32()? as usize;
    let expected_tensors = match kind {
        0 => 2,
        1 => 4,
        other => {
            return Err(Error::ShapeMismatch {
                context: format!("unknown head kind {other} in {}", path_string(path)),
            });
        }
    };
    if tensor_count != expected_tensors {
        return Err(Error::ShapeMismatch {
            context: format!(
                "head kind {kind} carries {expected_tensors} tensors, header declares {tensor_count}"
            ),
        });
    }
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let rows = cursor.read_u32()? as usize;
        let cols = cursor.read_u32()? as usize;
        let values = rows.checked_mul(cols).ok_or_else(|| Error::ShapeMismatch {
            context: format!("implausible {rows}x{cols} tensor in {}", path_string(path)),
        })?;
        let payload = cursor.take(8 * values, values, 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("fixed chunk")));
        tensors.push(DMatrix::from_iterator(rows, cols, data));
    }
    let head = StudentHead::from_tensors(tensors)?;
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    Ok((head, meta))
}

/// File layout of one generated world, paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Teacher embeddings of the training samples.
    pub teacher: String,
    /// Raw student inputs of the training samples.
    pub student_raw: String,
    /// Raw student inputs of the evaluation queries.
    pub queries: String,
    /// Raw student inputs of the evaluation database.
    pub database: String,
    /// Raw student inputs reserved for learning whitening.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<String>,
    /// Per-query relevant database indices.
    pub ground_truth: String,
    /// Per-query difficulty tags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes `query_id: rel rel …`, one line per query.
pub fn write_ground_truth(path: &Path, relevance: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for (query, rels) in relevance.iter().enumerate() {
        out.push_str(&query.to_string());
        out.push(':');
        for rel in rels {
            out.push(' ');
            out.push_str(&rel.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses ground truth; query ids must cover `0..n` exactly once, and no
/// line may repeat a relevant index.
pub fn read_ground_truth(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    let malformed = |line: usize, reason: String| Error::MalformedRecord {
        path: path_string(path),
        line,
        reason,
    };
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id_part, rel_part) = line
            .split_once(':')
            .ok_or_else(|| malformed(line_no, "missing ':' separator".to_string()))?;
        let id: usize = id_part
            .trim()
            .parse()
            .map_err(|_| malformed(line_no, format!("bad query id {:?}", id_part.trim())))?;
        let mut rels = Vec::new();
        for token in rel_part.split_whitespace() {
            let rel: usize = token
                .parse()
                .map_err(|_| malformed(line_no, format!("bad relevant index {token:?}")))?;
            if rels.contains(&rel) {
                return Err(malformed(
                    line_no,
                    format!("duplicate relevant index {rel}"),
                ));
            }
            rels.push(rel);
        }
        records.push((id, rels, line_no));
    }
    let n = records.len();
    let mut relevance: Vec<Option<Vec<usize>>> = vec![None; n];
    for (id, rels, line_no) in records {
        if id >= n {
            return Err(malformed(
                line_no,
                format!("query id {id} out of range for {n} queries"),
            ));
        }
        if relevance[id].is_some() {
            return Err(malformed(line_no, format!("query id {id} repeated")));
        }
        relevance[id] = Some(rels);
    }
    Ok(relevance
        .into_iter()
        .map(|r| r.expect("all ids placed"))
        .collect())
}

/// Writes one difficulty tag per line, aligned with query order.
pub fn write_splits(path: &Path, splits: &[Split]) -> Result<()> {
    let mut out = String::new();
    for split in splits {
        out.push_str(split.as_str());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<Vec<Split>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(index, line)| {
            line.trim()
                .parse()
                .map_err(|reason| Error::MalformedRecord {
                    path: path_string(path),
                    line: index + 1,
                    reason,
                })
        })
        .collect()
}
