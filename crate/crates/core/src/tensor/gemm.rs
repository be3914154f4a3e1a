use crate::scalar::Scalar;

/// Read-only strided 2-D view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major contiguous view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Column block `[c0, c0 + width)` of every row.
    pub fn cols_slice(self, c0: usize, width: usize) -> Self {
        assert!(c0 + width <= self.cols);
        Self { data: &self.data[c0 * self.cs..], rows: self.rows, cols: width, rs: self.rs, cs: self.cs }
    }

    /// Row block `[r0, r0 + height)`.
    pub fn rows_slice(self, r0: usize, height: usize) -> Self {
        assert!(r0 + height <= self.rows);
        Self { data: &self.data[r0 * self.rs..], rows: height, cols: self.cols, rs: self.rs, cs: self.cs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Mutable counterpart of [`MatRef`].
pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols_slice(self, c0: usize, width: usize) -> Self {
        assert!(c0 + width <= self.cols);
        let cs = self.cs;
        Self { data: &mut self.data[c0 * cs..], rows: self.rows, cols: width, rs: self.rs, cs }
    }

    pub fn rows_slice(self, r0: usize, height: usize) -> Self {
        assert!(r0 + height <= self.rows);
        let rs = self.rs;
        Self { data: &mut self.data[r0 * rs..], rows: height, cols: self.cols, rs, cs: self.cs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a·b + beta * c`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dims");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.max_index() <= a.data.len());
    assert!(b.max_index() <= b.data.len());
    assert!(c.max_index() <= c.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every reachable index by the slice lengths.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2],[3,4]], aᵀ·a = [[10,14],[14,20]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        let v = MatRef::new(&a, 2, 2);
        gemm(1.0, v.t(), v, 0.0, MatMut::new(&mut c, 2, 2));
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn column_block_accumulates() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [1.0f32; 2];
        // second column of a 2x3 matrix, transposed, times itself: 2*2 + 5*5
        let col = MatRef::new(&a, 2, 3).cols_slice(1, 1);
        gemm(1.0, col.t(), col, 1.0, MatMut::new(&mut c[..1], 1, 1));
        assert_eq!(c[0], 30.0);
    }
}
