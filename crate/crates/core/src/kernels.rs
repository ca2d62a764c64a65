use crate::tensor::Layout;

/// `c = a · b + beta · c` where `a` is logically `m×k` and `b` is `k×n`.
///
/// A `Transposed` operand is stored as the transpose of its logical shape
/// (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match a_layout {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the length assertions above guarantee every strided access of
    // an m×k, k×n and m×n operand stays in bounds.
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
