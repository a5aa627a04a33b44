//! Small dense matrix and 4-tensor containers.
//!
//! These deliberately stay minimal: the sensitivity matrices handled here are
//! at most `L×L` with `L ≤ 16`, and the only algebra the crate needs on them is
//! elementwise (Hadamard) arithmetic, outer products and a handful of norms.
//! Anything heavier (Gram factorizations, large contractions) happens on
//! `faer` types inside [`crate::surrogate`] and [`crate::moments`].
//!
//! CSV serialization writes decimals with 17 significant digits, which is
//! exactly enough for `f64` values to round-trip bit-for-bit.

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits (bit-exact round-trip).
pub(crate) fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// The `rows × cols` zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Returns a shape error if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} elements", rows * cols),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// The outer product `a ⊗ b`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    /// Row count.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Column count.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Checks `self` and `other` share a shape.
    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard_mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Elementwise division, inverting [`Self::hadamard_mul`].
    ///
    /// A zero anywhere in `b` is reported with its coordinates: in this crate a
    /// zero denominator always means some output has zero variance.
    pub fn hadamard_div(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let mut data = Vec::with_capacity(self.data.len());
        for (k, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if *b == 0.0 {
                return Err(Error::DivisionByZero { l: k / self.cols, lp: k % self.cols });
            }
            data.push(a / b);
        }
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Scalar multiple.
    pub fn scale(&self, factor: f64) -> Self {
        let data = self.data.iter().map(|a| a * factor).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// The transpose.
    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Largest absolute entry (`‖·‖∞` over elements); 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Largest absolute entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// True when `‖self − selfᵀ‖∞ ≤ tol` (requires a square matrix).
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Serializes as one CSV line per row, 17 significant digits per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&fmt_g17(self[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format produced by [`Self::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows_data: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
            let row = row.map_err(|_| {
                Error::InvalidArgument(format!("unparseable CSV matrix row {}", lineno + 1))
            })?;
            rows_data.push(row);
        }
        let rows = rows_data.len();
        let cols = rows_data.first().map_or(0, Vec::len);
        if rows_data.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged CSV matrix".into()));
        }
        Ok(Self { rows, cols, data: rows_data.into_iter().flatten().collect() })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// A dense 4-tensor of `f64`, indexed `[a, b, c, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    /// The zero tensor of the given shape.
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    /// Shape as `[a, b, c, d]` extents.
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    fn offset(&self, idx: [usize; 4]) -> usize {
        debug_assert!(idx.iter().zip(&self.dims).all(|(i, d)| i < d));
        ((idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]) * self.dims[3] + idx[3]
    }

    /// Largest absolute entry; 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Largest absolute entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.dims),
                got: format!("{:?}", other.dims),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs())))
    }

    /// Serializes one entry per CSV line as `a,b,c,d,value` in lexicographic
    /// index order, 17 significant digits for the value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let [da, db, dc, dd] = self.dims;
        for a in 0..da {
            for b in 0..db {
                for c in 0..dc {
                    for d in 0..dd {
                        out.push_str(&format!(
                            "{a},{b},{c},{d},{}\n",
                            fmt_g17(self[[a, b, c, d]])
                        ));
                    }
                }
            }
        }
        out
    }
}

impl std::ops::Index<[usize; 4]> for Tensor4 {
    type Output = f64;
    fn index(&self, idx: [usize; 4]) -> &f64 {
        &self.data[self.offset(idx)]
    }
}

impl std::ops::IndexMut<[usize; 4]> for Tensor4 {
    fn index_mut(&mut self, idx: [usize; 4]) -> &mut f64 {
        let k = self.offset(idx);
        &mut self.data[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hadamard_div_self_is_ones() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = a.hadamard_div(&a).unwrap();
        assert!(q.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn hadamard_div_zero_numerator() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(a.hadamard_div(&b).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn hadamard_div_reports_zero_location() {
        let a = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            a.hadamard_div(&b),
            Err(Error::DivisionByZero { l: 1, lp: 0 })
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let m = Matrix::from_vec(
            2,
            3,
            vec![1.0 / 3.0, -2.5e-17, 0.0, f64::MIN_POSITIVE, 12345.678901234567, -1.0],
        )
        .unwrap();
        let back = Matrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn tensor4_indexing_and_csv_prefix() {
        let mut t = Tensor4::zeros([2, 2, 2, 2]);
        t[[1, 0, 1, 1]] = 7.0;
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 16);
        assert!(csv.lines().any(|l| l.starts_with("1,0,1,1,7.")));
    }

    proptest! {
        /// hadamard_div inverts hadamard_mul within 4 ulp when the divisor is
        /// bounded away from zero.
        #[test]
        fn division_inverts_multiplication(
            a in proptest::collection::vec(-1e3f64..1e3, 9),
            b in proptest::collection::vec(0.1f64..1e3, 9),
        ) {
            let am = Matrix::from_vec(3, 3, a).unwrap();
            let bm = Matrix::from_vec(3, 3, b).unwrap();
            let q = am.hadamard_mul(&bm).unwrap().hadamard_div(&bm).unwrap();
            for (x, y) in q.as_slice().iter().zip(am.as_slice()) {
                let ulp = y.abs().max(f64::MIN_POSITIVE) * f64::EPSILON;
                prop_assert!((x - y).abs() <= 4.0 * ulp, "x={x} y={y}");
            }
        }

        #[test]
        fn csv_round_trip_random(
            data in proptest::collection::vec(-1e6f64..1e6, 12),
        ) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            prop_assert_eq!(Matrix::from_csv(&m.to_csv()).unwrap(), m);
        }
    }
}
