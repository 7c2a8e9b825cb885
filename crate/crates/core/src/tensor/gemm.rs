/// Panics unless every strided access of a GEMM call stays inside its buffer.
#[allow(clippy::too_many_arguments)]
pub(super) fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (isize, isize),
    b_len: usize,
    b_strides: (isize, isize),
    c_len: usize,
) {
    fn last_index(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
        assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * rs as usize + (cols - 1) * cs as usize
    }
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_len >= m * n, "gemm output buffer too small");
    if k == 0 {
        return;
    }
    assert!(last_index(m, k, a_strides) < a_len, "gemm lhs out of bounds");
    assert!(last_index(k, n, b_strides) < b_len, "gemm rhs out of bounds");
}
