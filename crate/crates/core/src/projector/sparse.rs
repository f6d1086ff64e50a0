use rayon::prelude::*;

/// Compressed sparse row matrix with nonnegative entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self, String> {
        if row_offsets.len() != rows + 1 {
            return Err(format!("expected {} row offsets, got {}", rows + 1, row_offsets.len()));
        }
        if col_indices.len() != values.len() || *row_offsets.last().unwrap_or(&0) != values.len() {
            return Err("row offsets, column indices and values disagree on nnz".into());
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err("row offsets are not monotone".into());
        }
        if col_indices.iter().any(|&c| c as usize >= cols) {
            return Err("column index out of range".into());
        }
        Ok(Self { rows, cols, row_offsets, col_indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        self.col_indices[lo..hi].iter().zip(&self.values[lo..hi]).map(|(&c, &v)| (c as usize, v))
    }

    /// `out = A x`
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        out.par_chunks_mut(256).enumerate().for_each(|(chunk, dst)| {
            for (k, o) in dst.iter_mut().enumerate() {
                let i = chunk * 256 + k;
                let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
                let mut acc = 0.0;
                for (c, v) in self.col_indices[lo..hi].iter().zip(&self.values[lo..hi]) {
                    acc += v * x[*c as usize];
                }
                *o = acc;
            }
        });
    }

    /// `out = A^T y`
    pub fn mul_transpose_vec(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows);
        assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
            for (c, v) in self.col_indices[lo..hi].iter().zip(&self.values[lo..hi]) {
                out[*c as usize] += v * yi;
            }
        }
    }
}
