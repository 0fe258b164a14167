/// Row-major matrix view: a slice plus (row stride, column stride).
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn t(self) -> Self {
        Self { data: self.data, rs: self.cs, cs: self.rs }
    }
}

/// `c = alpha * a * b + beta * c` where `a` is m×k, `b` is k×n and `c` is a
/// contiguous row-major m×n buffer.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        let a_need = (m - 1) * a.rs + (k - 1) * a.cs + 1;
        let b_need = (k - 1) * b.rs + (n - 1) * b.cs + 1;
        assert!(a.data.len() >= a_need && b.data.len() >= b_need);
    }
    // SAFETY: bounds of every accessed element were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
