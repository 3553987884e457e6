//! Safe wrappers over the `matrixmultiply` kernels.

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! wrap {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $t,
            a: &[$t],
            a_strides: (isize, isize),
            b: &[$t],
            b_strides: (isize, isize),
            beta: $t,
            c: &mut [$t],
            c_strides: (isize, isize),
        ) {
            assert!(span(m, k, a_strides) <= a.len(), "gemm: A out of bounds");
            assert!(span(k, n, b_strides) <= b.len(), "gemm: B out of bounds");
            assert!(span(m, n, c_strides) <= c.len(), "gemm: C out of bounds");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: every index touched by the kernel lies within the spans
            // checked above, and `c` is uniquely borrowed.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    alpha,
                    a.as_ptr(),
                    a_strides.0,
                    a_strides.1,
                    b.as_ptr(),
                    b_strides.0,
                    b_strides.1,
                    beta,
                    c.as_mut_ptr(),
                    c_strides.0,
                    c_strides.1,
                );
            }
        }
    };
}

wrap!(sgemm, f32, matrixmultiply::sgemm);
wrap!(dgemm, f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product_matches_hand_result() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        dgemm(2, 2, 2, 1.0, &a, (2, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transposed A via strides
        let mut ct = [0.0f64; 4];
        dgemm(2, 2, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut ct, (2, 1));
        assert_eq!(ct, [26.0, 30.0, 38.0, 44.0]);
    }
}
