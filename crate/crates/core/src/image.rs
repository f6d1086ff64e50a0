//! Image and sinogram buffers plus the `.tensor` file format.
//!
//! A `.tensor` file is one line of JSON (the header) terminated by `\n`, followed by
//! the raw little-endian `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gradcore::Tensor;
use crate::{Error, Result};

/// Square activity map, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::Dimension(format!(
                "image of side {side} needs {} values, got {}",
                side * side,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self { side, data: vec![0.0; side * side] }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, data: vec![value; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { side: self.side, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Single-channel tensor view `(1, side, side)`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.side, self.side], self.data.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let n = (t.len() as f64).sqrt().round() as usize;
        Self::new(n, t.data().to_vec())
    }

    /// Rotate by `quarter_turns` x 90 degrees counter-clockwise (exact pixel permutation).
    pub fn rot90(&self, quarter_turns: i32) -> Self {
        let t = crate::gradcore::rot90(&self.to_tensor(), quarter_turns).expect("square image");
        Self { side: self.side, data: t.into_data() }
    }

    pub fn save(&self, path: &Path, role: &str, seed: Option<u64>) -> Result<()> {
        write_tensor(path, &TensorHeader::new(vec![self.side, self.side], role, seed), &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = read_tensor(path)?;
        if header.shape.len() != 2 || header.shape[0] != header.shape[1] {
            return Err(Error::Format(format!(
                "{}: expected a square image, header shape {:?}",
                path.display(),
                header.shape
            )));
        }
        Self::new(header.shape[0], data)
    }
}

/// Counts indexed by `(angle, radial bin)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_angles * n_bins {
            return Err(Error::Dimension(format!(
                "sinogram {n_angles}x{n_bins} needs {} values, got {}",
                n_angles * n_bins,
                data.len()
            )));
        }
        Ok(Self { n_angles, n_bins, data })
    }

    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Self::filled(n_angles, n_bins, 0.0)
    }

    pub fn filled(n_angles: usize, n_bins: usize, value: f64) -> Self {
        Self { n_angles, n_bins, data: vec![value; n_angles * n_bins] }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_angles, self.n_bins], self.data.clone()).expect("consistent sinogram")
    }

    pub fn from_tensor(t: &Tensor, n_angles: usize, n_bins: usize) -> Result<Self> {
        Self::new(n_angles, n_bins, t.data().to_vec())
    }

    pub fn save(&self, path: &Path, role: &str, seed: Option<u64>) -> Result<()> {
        write_tensor(path, &TensorHeader::new(vec![self.n_angles, self.n_bins], role, seed), &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = read_tensor(path)?;
        if header.shape.len() != 2 {
            return Err(Error::Format(format!(
                "{}: expected a 2-D sinogram, header shape {:?}",
                path.display(),
                header.shape
            )));
        }
        Self::new(header.shape[0], header.shape[1], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: String,
    pub seed: Option<u64>,
}

impl TensorHeader {
    pub fn new(shape: Vec<usize>, role: &str, seed: Option<u64>) -> Self {
        Self { shape, dtype: "f64le".into(), role: role.into(), seed }
    }
}

pub fn write_tensor(path: &Path, header: &TensorHeader, data: &[f64]) -> Result<()> {
    if header.shape.iter().product::<usize>() != data.len() {
        return Err(Error::Dimension(format!(
            "header shape {:?} does not match {} values",
            header.shape,
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    write_f64s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(TensorHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.dtype != "f64le" {
        return Err(Error::Format(format!("{}: unsupported dtype {}", path.display(), header.dtype)));
    }
    let n: usize = header.shape.iter().product();
    let data = read_f64s(&mut r, n)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok((header, data))
}

pub(crate) fn write_f64s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("payload shorter than {n} values: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
