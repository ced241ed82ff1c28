//! Dense block-matrix utilities and structure-preserving parametrizations.
//!
//! Everything is double precision and row-major. Matrices carry their block
//! partition so sparsity constraints can be expressed per block rather than
//! per scalar.

use crate::graph::BlockPattern;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Dense matrix with a block partition along rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    row_blocks: Vec<usize>,
    col_blocks: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn offsets(blocks: &[usize]) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(blocks.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for &b in blocks {
        acc += b;
        offs.push(acc);
    }
    (offs, acc)
}

impl BlockMatrix {
    pub fn zeros(row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Self {
        let (row_offsets, rows) = offsets(&row_blocks);
        let (col_offsets, cols) = offsets(&col_blocks);
        BlockMatrix {
            row_blocks,
            col_blocks,
            row_offsets,
            col_offsets,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(row_blocks: Vec<usize>, col_blocks: Vec<usize>, data: Vec<f64>) -> Self {
        let mut m = Self::zeros(row_blocks, col_blocks);
        assert_eq!(
            data.len(),
            m.rows * m.cols,
            "data length {} does not match {}x{}",
            data.len(),
            m.rows,
            m.cols
        );
        m.data = data;
        m
    }

    /// Single-block matrix (one node).
    pub fn single(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_data(vec![rows], vec![cols], data)
    }

    pub fn identity(blocks: Vec<usize>) -> Self {
        let mut m = Self::zeros(blocks.clone(), blocks);
        for i in 0..m.rows {
            m.data[i * m.cols + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_blocks(&self) -> &[usize] {
        &self.row_blocks
    }

    pub fn col_blocks(&self) -> &[usize] {
        &self.col_blocks
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Scalar offset of block row `i` / block column `j`.
    pub fn block_row_offset(&self, i: usize) -> usize {
        self.row_offsets[i]
    }

    pub fn block_col_offset(&self, j: usize) -> usize {
        self.col_offsets[j]
    }

    /// Copies block (i, j) out as a row-major vector.
    pub fn block(&self, i: usize, j: usize) -> Vec<f64> {
        let (r0, c0) = (self.row_offsets[i], self.col_offsets[j]);
        let (br, bc) = (self.row_blocks[i], self.col_blocks[j]);
        let mut out = Vec::with_capacity(br * bc);
        for r in 0..br {
            for c in 0..bc {
                out.push(self.get(r0 + r, c0 + c));
            }
        }
        out
    }

    pub fn set_block(&mut self, i: usize, j: usize, block: &[f64]) {
        let (r0, c0) = (self.row_offsets[i], self.col_offsets[j]);
        let (br, bc) = (self.row_blocks[i], self.col_blocks[j]);
        assert_eq!(block.len(), br * bc, "block size mismatch at ({i},{j})");
        for r in 0..br {
            for c in 0..bc {
                self.set(r0 + r, c0 + c, block[r * bc + c]);
            }
        }
    }

    /// Writes `other` into this matrix starting at scalar offsets (r0, c0).
    pub fn paste(&mut self, r0: usize, c0: usize, other: &BlockMatrix) {
        assert!(r0 + other.rows <= self.rows && c0 + other.cols <= self.cols);
        for r in 0..other.rows {
            for c in 0..other.cols {
                self.set(r0 + r, c0 + c, other.get(r, c));
            }
        }
    }

    pub fn transpose(&self) -> BlockMatrix {
        let mut t = BlockMatrix::zeros(self.col_blocks.clone(), self.row_blocks.clone());
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> BlockMatrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &BlockMatrix) -> BlockMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(&other.data) {
            *v += w;
        }
        out
    }

    pub fn sub(&self, other: &BlockMatrix) -> BlockMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(&other.data) {
            *v -= w;
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            out[r] = acc;
        }
        out
    }

    /// Transpose-vector product without materializing the transpose.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "t_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let vr = v[r];
            if vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &BlockMatrix) -> BlockMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = BlockMatrix::zeros(self.row_blocks.clone(), other.col_blocks.clone());
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = r * out.cols;
                let brow = k * other.cols;
                for c in 0..other.cols {
                    out.data[orow + c] += a * other.data[brow + c];
                }
            }
        }
        out
    }

    /// Rank-one update: self += s * u * v^T.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let su = s * u[r];
            if su == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, b) in row.iter_mut().zip(v) {
                *o += su * b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest entry of |W + W^T|; zero iff W is exactly skew.
    pub fn skewness_error(&self) -> f64 {
        assert!(self.is_square());
        let mut err: f64 = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                err = err.max((self.get(r, c) + self.get(c, r)).abs());
            }
        }
        err
    }

    pub fn symmetry_error(&self) -> f64 {
        assert!(self.is_square());
        let mut err: f64 = 0.0;
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                err = err.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        err
    }

    /// Zeroes every block at a zero position of the pattern. Idempotent.
    pub fn mask_apply(&self, p: &BlockPattern) -> Result<BlockMatrix, BlockError> {
        if p.row_blocks() != self.row_blocks.as_slice()
            || p.col_blocks() != self.col_blocks.as_slice()
        {
            return Err(BlockError::DimensionMismatch(format!(
                "pattern blocks {:?}x{:?} vs matrix blocks {:?}x{:?}",
                p.row_blocks(),
                p.col_blocks(),
                self.row_blocks,
                self.col_blocks
            )));
        }
        let mut out = self.clone();
        for i in 0..self.row_blocks.len() {
            for j in 0..self.col_blocks.len() {
                if !p.is_set(i, j) {
                    let (r0, c0) = (self.row_offsets[i], self.col_offsets[j]);
                    for r in 0..self.row_blocks[i] {
                        for c in 0..self.col_blocks[j] {
                            out.set(r0 + r, c0 + c, 0.0);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest singular value by power iteration on W^T W.
    ///
    /// Relative tolerance 1e-10 on the squared singular value, at most
    /// 10000 iterations. A zero matrix returns 0.
    pub fn spectral_norm(&self) -> f64 {
        if self.max_abs() == 0.0 {
            return 0.0;
        }
        // Deterministic, aperiodic start vector; almost never orthogonal to
        // the dominant right singular vector.
        let mut v: Vec<f64> = (0..self.cols)
            .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.7391).sin())
            .collect();
        normalize(&mut v);
        let mut lambda_prev = 0.0f64;
        for _ in 0..10_000 {
            let u = self.matvec(&v);
            let lambda: f64 = u.iter().map(|x| x * x).sum();
            if lambda == 0.0 {
                return 0.0;
            }
            let mut next = self.t_matvec(&u);
            normalize(&mut next);
            v = next;
            if (lambda - lambda_prev).abs() <= 1e-10 * lambda.max(1e-300) {
                return lambda.sqrt();
            }
            lambda_prev = lambda;
        }
        lambda_prev.sqrt()
    }

    /// Smallest eigenvalue of a symmetric matrix via the shifted power
    /// iteration lambda_min = c - lambda_max(c I - S) with c = ||S||.
    pub fn min_eigenvalue_sym(&self) -> f64 {
        assert!(self.is_square());
        let c = self.spectral_norm();
        if c == 0.0 {
            return 0.0;
        }
        let mut shifted = self.scale(-1.0);
        for i in 0..self.rows {
            let d = shifted.get(i, i);
            shifted.set(i, i, d + c);
        }
        c - shifted.spectral_norm()
    }

    /// Reinterprets a single-block square matrix under a finer partition.
    pub fn into_blocks(self, blocks: Vec<usize>) -> BlockMatrix {
        assert_eq!(blocks.iter().sum::<usize>(), self.rows);
        assert_eq!(self.rows, self.cols);
        let (offs, _) = offsets(&blocks);
        BlockMatrix {
            row_blocks: blocks.clone(),
            col_blocks: blocks,
            row_offsets: offs.clone(),
            col_offsets: offs,
            rows: self.rows,
            cols: self.cols,
            data: self.data,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Elementwise antisymmetrization J = A - A^T; exactly skew in floating
/// arithmetic since J(i,j) and J(j,i) are computed from the same two reads.
pub fn make_skew(a: &BlockMatrix) -> Result<BlockMatrix, BlockError> {
    if !a.is_square() || a.row_blocks() != a.col_blocks() {
        return Err(BlockError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut j = BlockMatrix::zeros(a.row_blocks().to_vec(), a.col_blocks().to_vec());
    for r in 0..a.rows() {
        j.set(r, r, 0.0);
        for c in r + 1..a.cols() {
            let v = a.get(r, c) - a.get(c, r);
            j.set(r, c, v);
            j.set(c, r, -v);
        }
    }
    Ok(j)
}

/// Block-diagonal PSD matrix with i-th block L_i L_i^T.
pub fn make_psd_blockdiag(factors: &[BlockMatrix]) -> Result<BlockMatrix, BlockError> {
    let mut dims = Vec::with_capacity(factors.len());
    for f in factors {
        if !f.is_square() {
            return Err(BlockError::NotSquare {
                rows: f.rows(),
                cols: f.cols(),
            });
        }
        dims.push(f.rows());
    }
    let mut out = BlockMatrix::zeros(dims.clone(), dims);
    let mut off = 0;
    for f in factors {
        let n = f.rows();
        for r in 0..n {
            for c in 0..n {
                // (L L^T)(r,c) = sum_k L(r,k) L(c,k)
                let mut acc = 0.0;
                for k in 0..n {
                    acc += f.get(r, k) * f.get(c, k);
                }
                out.set(off + r, off + c, acc);
            }
        }
        off += n;
    }
    Ok(out)
}
