//! Thin wrapper over `matrixmultiply::sgemm` for row-major operands.

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// Transposed operands are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    gemm_strided(m, k, n, a, a_strides, b, b_strides, c, n, accumulate);
}

/// [`gemm`] writing into rows `c_row_stride` apart, so `c` may be a column
/// band of a wider matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    c_row_stride: usize,
    accumulate: bool,
) {
    debug_assert!(m == 0 || c.len() >= (m - 1) * c_row_stride + n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers size `a`, `b` and `c` from the same m, k, n used for
    // the strides below, so every index the kernel forms is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}
