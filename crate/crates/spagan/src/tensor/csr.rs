//! Compressed sparse row matrices.
//!
//! Used for the node-feature matrix, which on citation graphs is more than
//! 98% zeros. Features never require gradients, so the tape only needs a
//! constant-sparse times dense product with a gradient for the dense side.

use crate::error::{Error, Result};
use crate::tensor::dense::DenseMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut indptr = Vec::with_capacity(dense.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..dense.rows() {
            for (c, &v) in dense.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            rows: dense.rows(),
            cols: dense.cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1
            || indptr.windows(2).any(|w| w[0] > w[1])
            || *indptr.last().unwrap_or(&0) != indices.len()
            || indices.len() != values.len()
        {
            return Err(Error::dim("csr_from_parts", "inconsistent CSR arrays"));
        }
        if indices.iter().any(|&c| c >= cols) {
            return Err(Error::dim("csr_from_parts", "column index out of range"));
        }
        Ok(CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern with entry-wise transformed values.
    pub fn map_values(&self, f: impl FnMut(f64) -> f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values = self.values.iter().copied().map(f).collect();
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for i in self.indptr[r]..self.indptr[r + 1] {
                out.set(r, self.indices[i], self.values[i]);
            }
        }
        out
    }

    /// out = self * dense
    pub fn matmul_dense(&self, dense: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != dense.rows() {
            return Err(Error::dim(
                "csr_matmul",
                format!(
                    "{}x{} by {}x{}",
                    self.rows,
                    self.cols,
                    dense.rows(),
                    dense.cols()
                ),
            ));
        }
        let n = dense.cols();
        let mut out = DenseMatrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let out_row = out.row_mut(r);
            for i in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[i];
                let d_row = dense.row(self.indices[i]);
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }

    /// out += self^T * dense, without materializing the transpose.
    pub fn matmul_t_dense_into(&self, dense: &DenseMatrix, out: &mut DenseMatrix) {
        debug_assert_eq!(self.rows, dense.rows());
        debug_assert_eq!((out.rows(), out.cols()), (self.cols, dense.cols()));
        let n = dense.cols();
        for r in 0..self.rows {
            let d_row = dense.row(r);
            for i in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[i];
                let c = self.indices[i];
                let out_row = &mut out.values_mut()[c * n..(c + 1) * n];
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
    }
}
