//! On-disk cache of a [`SystemModel`]: one JSON header line, then the CSR triplet
//! arrays as raw little-endian data (row offsets `u64`, column indices `u32`,
//! values `f64`). The header carries a SHA-256 of the binary payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CsrMatrix, GridSpec, SinogramSpec, SystemModel};
use crate::{Error, Result};

const FORMAT: &str = "petrecon-system-model-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModelHeader {
    pub format: String,
    pub grid: GridSpec,
    pub sino: SinogramSpec,
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub checksum_sha256: String,
}

fn payload(m: &CsrMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 * (m.rows() + 1) + 12 * m.nnz());
    for &o in m.row_offsets() {
        buf.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in m.col_indices() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for &v in m.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn save_system_model(model: &SystemModel, path: &Path) -> Result<()> {
    let m = model.matrix();
    let bytes = payload(m);
    let header = SystemModelHeader {
        format: FORMAT.into(),
        grid: *model.grid(),
        sino: *model.sino_spec(),
        rows: m.rows(),
        cols: m.cols(),
        nnz: m.nnz(),
        checksum_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_system_model(path: &Path) -> Result<SystemModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: SystemModelHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unknown system model format {}", header.format)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expected = 8 * (header.rows + 1) + 12 * header.nnz;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != header.checksum_sha256 {
        return Err(Error::Format("system model checksum mismatch".into()));
    }
    let (offs, rest) = bytes.split_at(8 * (header.rows + 1));
    let (cols, vals) = rest.split_at(4 * header.nnz);
    let row_offsets = offs
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let col_indices = cols
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let values = vals
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let matrix = CsrMatrix::from_parts(header.rows, header.cols, row_offsets, col_indices, values)
        .map_err(Error::Format)?;
    if header.cols != header.grid.n_pixels() || header.rows != header.sino.len() {
        return Err(Error::Format("matrix shape disagrees with the stored geometry".into()));
    }
    Ok(SystemModel::from_matrix(header.grid, header.sino, matrix))
}
