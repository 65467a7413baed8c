/// Strided row-major view of a matrix operand: `(row stride, column stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub isize, pub isize);

impl Strides {
    /// Row-major `rows x cols` matrix.
    pub fn rows(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// Transpose of a row-major matrix whose stored rows have `cols` entries.
    pub fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    let extent = |rows: usize, cols: usize, s: Strides| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, sa), "gemm lhs out of bounds");
    assert!(b.len() >= extent(k, n, sb), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        // [1 2; 3 4] * [5; 6]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(
            2,
            2,
            1,
            &a,
            Strides::rows(2),
            &b,
            Strides::rows(1),
            0.0,
            &mut c,
        );
        assert_eq!(c, [17.0, 39.0]);

        // a^T * a accumulated onto ones
        let mut c = [1.0; 4];
        gemm(
            2,
            2,
            2,
            &a,
            Strides::transposed(2),
            &a,
            Strides::rows(2),
            1.0,
            &mut c,
        );
        assert_eq!(c, [11.0, 15.0, 15.0, 21.0]);
    }
}
