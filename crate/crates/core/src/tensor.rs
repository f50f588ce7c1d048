//! Row-major dense matrices and a strided GEMM wrapper.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// A read-only strided view: element (i, j) lives at `ptr[i*rs + j*cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self { data: &m.data, offset: 0, rows: m.rows, cols: m.cols, rs: m.cols as isize, cs: 1 }
    }

    /// Column block `[c0, c0+ncols)` of rows `[r0, r0+nrows)`.
    pub fn block(m: &'a Mat, r0: usize, nrows: usize, c0: usize, ncols: usize) -> Self {
        debug_assert!(r0 + nrows <= m.rows && c0 + ncols <= m.cols);
        Self { data: &m.data, offset: r0 * m.cols + c0, rows: nrows, cols: ncols, rs: m.cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        (self.offset as isize + (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs) as usize
    }
}

/// Mutable strided destination, same layout convention as [`View`].
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> Self {
        let (rows, cols) = (m.rows, m.cols);
        Self { data: &mut m.data, offset: 0, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn block(m: &'a mut Mat, r0: usize, nrows: usize, c0: usize, ncols: usize) -> Self {
        debug_assert!(r0 + nrows <= m.rows && c0 + ncols <= m.cols);
        let cols = m.cols;
        Self { data: &mut m.data, offset: r0 * cols + c0, rows: nrows, cols: ncols, rs: cols as isize, cs: 1 }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len());
    if c.rows > 0 && c.cols > 0 {
        let last = (c.offset as isize + (c.rows as isize - 1) * c.rs + (c.cols as isize - 1) * c.cs) as usize;
        assert!(last < c.data.len());
    }
    // SAFETY: every index reachable through the three views was bounds-checked
    // above, and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, ViewMut::of(&mut c));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).data, vec![58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_block_views() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let mut c = Mat::zeros(2, 2);
        // a[:, 1..3] * a[:, 1..3]^T
        let v = View::block(&a, 0, 2, 1, 2);
        gemm(1.0, v, v.t(), 0.0, ViewMut::of(&mut c));
        assert_eq!(c.data, vec![13., 28., 28., 61.]);
    }
}
