//! Dense row-major matrix.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = T> + Clone + '_ {
        (0..self.rows).map(move |i| self.data[i * self.cols + j])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| crate::scalar::dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * yi;
            }
        }
        out
    }

    /// Adds `scale · a bᵀ` in place.
    pub fn add_outer(&mut self, scale: T, a: &[T], b: &[T]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            for (m, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *m = *m + s * bj;
            }
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o = *o + x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self[(perm[i], j)])
    }

    /// Reorders columns so that column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, perm[j])])
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect() }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.t_matvec(&[1.0, 1.0]), m.transpose().matvec(&[1.0, 1.0]));
        assert_eq!(m.row_sums(), vec![6.0, 15.0]);
        assert_eq!(m.col_sums(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn permutations_move_entries() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.permute_rows(&[1, 0]).row(0), &[3.0, 4.0]);
        assert_eq!(m.permute_cols(&[1, 0]).row(0), &[2.0, 1.0]);
    }
}
