use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use crate::error::{Result, SarError};

/// General compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicate entries are summed; explicit zeros are kept out.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return Err(SarError::Dimension(format!("entry ({i}, {j}) outside {nrows}x{ncols}")));
            }
            if !v.is_finite() {
                return Err(SarError::NonFinite(format!("sparse entry ({i}, {j})")));
            }
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            scratch.clear();
            scratch.extend((counts[i]..counts[i + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < scratch.len() {
                let j = scratch[k].0;
                let mut v = 0.0;
                while k < scratch.len() && scratch[k].0 == j {
                    v += scratch[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { nrows, ncols, row_ptr, col_idx, values })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t).expect("dense entries are in range")
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map_or(0.0, |k| v[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (i, o) in out.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            let mut s = 0.0;
            for (&j, &a) in c.iter().zip(v) {
                s += a * x[j];
            }
            *o = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                col_idx[next[j]] = i;
                values[next[j]] = a;
                next[j] += 1;
            }
        }
        Self { nrows: self.ncols, ncols: self.nrows, row_ptr: counts, col_idx, values }
    }

    /// Sparse product, Gustavson's row-by-row accumulation.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(SarError::Dimension(format!(
                "{}x{} times {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..self.nrows {
            touched.clear();
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                for (&j, &b) in cb.iter().zip(vb) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                if acc[j] != 0.0 {
                    col_idx.push(j);
                    values.push(acc[j]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { nrows: self.nrows, ncols: other.ncols, row_ptr, col_idx, values })
    }

    /// a A + b B
    pub fn lin_comb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        if x.nrows != y.nrows || x.ncols != y.ncols {
            return Err(SarError::Dimension("adding sparse matrices of different shape".into()));
        }
        let mut t: Vec<(usize, usize, f64)> = x.triplets().map(|(i, j, v)| (i, j, a * v)).collect();
        t.extend(y.triplets().map(|(i, j, v)| (i, j, b * v)));
        Self::from_triplets(x.nrows, x.ncols, &t)
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// tr(A B) = Σ_ij A_ij B_ji
    pub fn trace_of_product(&self, other: &Self) -> f64 {
        self.triplets().map(|(i, j, a)| a * other.get(j, i)).sum()
    }

    /// Σ_ij A_ij M_ij against a dense matrix.
    pub fn inner_dense(&self, m: &DenseMatrix) -> f64 {
        self.triplets().map(|(i, j, a)| a * m[(i, j)]).sum()
    }

    pub fn mul_dense(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        if self.ncols != m.nrows() {
            return Err(SarError::Dimension("sparse times dense".into()));
        }
        let mut out = DenseMatrix::zeros(self.nrows, m.ncols());
        for j in 0..m.ncols() {
            let x = m.col(j);
            self.matvec_into(x, out.col_mut(j));
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] = v;
        }
        out
    }

    /// εᵀ A ε
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let (c, v) = self.row(i);
            let mut r = 0.0;
            for (&j, &a) in c.iter().zip(v) {
                r += a * x[j];
            }
            s += xi * r;
        }
        s
    }
}

/// Spatial weights: square CSR with zero diagonal plus a cached transpose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseWeights {
    csr: CsrMatrix,
    csr_t: CsrMatrix,
    row_normalized: bool,
}

/// Result of row normalisation; rows without neighbours stay zero.
#[derive(Clone, Debug)]
pub struct RowNormalized {
    pub weights: SparseWeights,
    pub zero_rows: Vec<usize>,
}

impl SparseWeights {
    pub fn new(csr: CsrMatrix) -> Result<Self> {
        if csr.nrows() != csr.ncols() {
            return Err(SarError::Dimension(format!("weights are {}x{}", csr.nrows(), csr.ncols())));
        }
        if let Some(i) = (0..csr.nrows()).find(|&i| csr.get(i, i) != 0.0) {
            return Err(SarError::InvalidInput(format!("weights have a nonzero diagonal at row {i}")));
        }
        let row_normalized = Self::rows_sum_to_one(&csr);
        let csr_t = csr.transpose();
        Ok(Self { csr, csr_t, row_normalized })
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        Self::new(CsrMatrix::from_triplets(n, n, triplets)?)
    }

    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        Self::new(CsrMatrix::from_dense(m))
    }

    /// Unit-weight adjacency from directed edges; self loops and duplicates are dropped.
    pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut e: Vec<(usize, usize)> = edges.iter().copied().filter(|(i, j)| i != j).collect();
        e.sort_unstable();
        e.dedup();
        let t: Vec<(usize, usize, f64)> = e.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
        Self::from_triplets(n, &t)
    }

    fn rows_sum_to_one(csr: &CsrMatrix) -> bool {
        csr.nnz() > 0
            && (0..csr.nrows()).all(|i| {
                let (_, v) = csr.row(i);
                v.is_empty() || (v.iter().sum::<f64>() - 1.0).abs() < 1e-12
            })
    }

    pub fn n(&self) -> usize {
        self.csr.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.csr.nnz()
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.csr
    }

    pub fn csr_transpose(&self) -> &CsrMatrix {
        &self.csr_t
    }

    /// W x
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.csr.matvec(x)
    }

    /// Wᵀ x
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.csr_t.matvec(x)
    }

    pub fn row_normalize(&self) -> RowNormalized {
        let mut t = Vec::with_capacity(self.nnz());
        let mut zero_rows = Vec::new();
        for i in 0..self.n() {
            let (c, v) = self.csr.row(i);
            let s: f64 = v.iter().sum();
            if c.is_empty() || s == 0.0 {
                zero_rows.push(i);
                continue;
            }
            t.extend(c.iter().zip(v).map(|(&j, &a)| (i, j, a / s)));
        }
        let csr = CsrMatrix::from_triplets(self.n(), self.n(), &t).expect("indices come from a valid matrix");
        let csr_t = csr.transpose();
        let row_normalized = Self::rows_sum_to_one(&csr);
        RowNormalized { weights: Self { csr, csr_t, row_normalized }, zero_rows }
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.csr.row(i).0.len()).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        self.csr.to_dense()
    }
}
