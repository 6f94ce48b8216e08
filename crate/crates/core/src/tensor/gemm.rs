//! Strided dense matrix products backed by `matrixmultiply`.

/// Read-only strided view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` block starting at `offset` with row stride `ld`.
    pub fn rows(data: &'a [f64], offset: usize, ld: usize) -> Self {
        View {
            data,
            offset,
            rs: ld as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major block.
    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, where `c` is row-major
/// with leading dimension `ldc` starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index(m, k) < a.data.len().max(1));
    assert!(b.max_index(k, n) < b.data.len().max(1));
    assert!(c_off + (m - 1) * ldc + n - 1 < c.len());
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_off + i * ldc..c_off + i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by the kernel was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}
