//! Row-major dense matrix products backed by `matrixmultiply`.

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `op(a)` is `m×k`; when `ta` is set, `a` is stored as `k×m`. Likewise `op(b)`
/// is `k×n`, stored `n×k` when `tb` is set. `c` is `m×n`. With `beta == 0`
/// the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds asserted above cover every element addressed by the
    // given strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
