//! Small sparse matrices with exact rational entries.
//!
//! Only what the compression/expansion construction needs: block assembly,
//! Kronecker products, products and transposes.

use nalgebra::DMatrix;
use num_rational::Rational64;
use num_traits::{One, ToPrimitive, Zero};

/// Row-major sparse matrix; each row holds `(column, value)` pairs sorted by
/// column with no explicit zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Vec<(usize, Rational64)>>,
}

impl RationalMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Vec::new(); rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for (i, row) in m.data.iter_mut().enumerate() {
            row.push((i, Rational64::one()));
        }
        m
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, Rational64)>,
    ) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            m.data[r].push((c, v));
        }
        for row in &mut m.data {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, Rational64)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match merged.last_mut() {
                    Some((lc, lv)) if *lc == c => *lv += v,
                    _ => merged.push((c, v)),
                }
            }
            merged.retain(|(_, v)| !v.is_zero());
            *row = merged;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[(usize, Rational64)] {
        &self.data[r]
    }

    pub fn get(&self, r: usize, c: usize) -> Rational64 {
        self.data[r]
            .binary_search_by_key(&c, |&(col, _)| col)
            .map(|i| self.data[r][i].1)
            .unwrap_or_else(|_| Rational64::zero())
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    fn triplets(&self) -> impl Iterator<Item = (usize, usize, Rational64)> + '_ {
        self.data
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(
            self.cols,
            self.rows,
            self.triplets().map(|(r, c, v)| (c, r, v)),
        )
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "product dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        let mut acc = vec![Rational64::zero(); rhs.cols];
        let mut touched = Vec::new();
        for (r, row) in self.data.iter().enumerate() {
            for &(k, a) in row {
                for &(c, b) in &rhs.data[k] {
                    if acc[c].is_zero() {
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for &c in &touched {
                if !acc[c].is_zero() {
                    out.data[r].push((c, acc[c]));
                }
                acc[c] = Rational64::zero();
            }
            touched.clear();
        }
        out
    }

    pub fn kron(&self, rhs: &Self) -> Self {
        let trips = self.triplets().flat_map(|(r1, c1, a)| {
            rhs.triplets()
                .map(move |(r2, c2, b)| (r1 * rhs.rows + r2, c1 * rhs.cols + c2, a * b))
        });
        Self::from_triplets(self.rows * rhs.rows, self.cols * rhs.cols, trips.collect::<Vec<_>>())
    }

    /// `[self, rhs]`
    pub fn hstack(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "hstack row mismatch");
        let off = self.cols;
        Self::from_triplets(
            self.rows,
            self.cols + rhs.cols,
            self.triplets()
                .chain(rhs.triplets().map(|(r, c, v)| (r, c + off, v))),
        )
    }

    /// `[self; rhs]`
    pub fn vstack(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "vstack column mismatch");
        let off = self.rows;
        Self::from_triplets(
            self.rows + rhs.rows,
            self.cols,
            self.triplets()
                .chain(rhs.triplets().map(|(r, c, v)| (r + off, c, v))),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && self
                .data
                .iter()
                .enumerate()
                .all(|(r, row)| row.len() == 1 && row[0].0 == r && row[0].1.is_one())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v.to_f64().expect("rational entry fits in f64");
        }
        m
    }

    /// Sparse rows converted to floating point.
    pub fn to_f64_rows(&self) -> Vec<Vec<(usize, f64)>> {
        self.data
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(c, v)| (c, v.to_f64().expect("rational entry fits in f64")))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64) -> Rational64 {
        Rational64::from_integer(n)
    }

    #[test]
    fn kron_matches_block_definition() {
        let a = RationalMatrix::from_triplets(2, 2, [(0, 0, r(1)), (0, 1, r(2)), (1, 1, r(3))]);
        let b = RationalMatrix::from_triplets(1, 2, [(0, 0, r(5)), (0, 1, r(-1))]);
        let k = a.kron(&b);
        assert_eq!((k.rows(), k.cols()), (2, 4));
        assert_eq!(k.get(0, 0), r(5));
        assert_eq!(k.get(0, 1), r(-1));
        assert_eq!(k.get(0, 2), r(10));
        assert_eq!(k.get(0, 3), r(-2));
        assert_eq!(k.get(1, 2), r(15));
        assert_eq!(k.get(1, 0), r(0));
    }

    #[test]
    fn product_with_transpose() {
        let a = RationalMatrix::from_triplets(2, 3, [(0, 0, r(1)), (1, 2, r(1)), (1, 1, r(1))]);
        let ata = a.transpose().mul(&a);
        assert_eq!(ata.get(0, 0), r(1));
        assert_eq!(ata.get(1, 2), r(1));
        assert_eq!(ata.get(2, 2), r(1));
        assert!(RationalMatrix::identity(3).mul(&a.transpose()) == a.transpose());
    }

    #[test]
    fn duplicate_triplets_cancel() {
        let m = RationalMatrix::from_triplets(1, 1, [(0, 0, r(2)), (0, 0, r(-2))]);
        assert_eq!(m.nnz(), 0);
    }
}
