//! Compressed sparse row storage with deterministic construction from
//! assembly triplets.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsrError {
    #[error("triplet index ({row},{col}) out of bounds for {n}x{m} matrix")]
    IndexOutOfBounds { row: usize, col: usize, n: usize, m: usize },
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets. Duplicates are summed in their
    /// order of appearance, so assembly is bit-reproducible.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, CsrError> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(CsrError::IndexOutOfBounds { row: r, col: c, n: n_rows, m: n_cols });
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        // stable sort: duplicates keep insertion order, so they sum deterministically
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut rows = Vec::new();
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c, v) = triplets[k];
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                col_indices.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &r in &rows {
            row_offsets[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(CsrMatrix { n_rows, n_cols, row_offsets, col_indices, values })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        y
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute asymmetry `max |A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(*c, r)).abs());
            }
        }
        worst
    }

    /// Matrix Market coordinate format, for offline inspection.
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "%%MatrixMarket matrix coordinate real general");
        let _ = writeln!(s, "{} {} {}", self.n_rows, self.n_cols, self.nnz());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let _ = writeln!(s, "{} {} {:.17e}", r + 1, c + 1, v);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_summed_in_order() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 2.0), (0, 0, 0.5)]).unwrap();
        assert_eq!(a.get(0, 0), 1.5);
        assert_eq!(a.get(1, 1), 2.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn sorted_columns_and_matvec() {
        let a = CsrMatrix::from_triplets(2, 3, &[(0, 2, 3.0), (0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        let (cols, _) = a.row(0);
        assert_eq!(cols, &[0, 2]);
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]), vec![4.0, -1.0]);
    }

    #[test]
    fn empty_rows_have_consistent_offsets() {
        let a = CsrMatrix::from_triplets(4, 4, &[(0, 0, 1.0), (3, 3, 1.0)]).unwrap();
        assert_eq!(a.row(1).0.len(), 0);
        assert_eq!(a.row(2).0.len(), 0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }
}
