// Row-major GEMM on top of `matrixmultiply`, expressing transposes as strides.

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // `rows x cols` is the logical (post-op) shape.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            trans_a: bool,
            trans_b: bool,
            m: usize,
            n: usize,
            k: usize,
            alpha: $t,
            a: &[$t],
            b: &[$t],
            beta: $t,
            c: &mut [$t],
        ) {
            assert!(a.len() >= m * k, "gemm: lhs holds {} < {}", a.len(), m * k);
            assert!(b.len() >= k * n, "gemm: rhs holds {} < {}", b.len(), k * n);
            assert!(c.len() >= m * n, "gemm: out holds {} < {}", c.len(), m * n);
            if m == 0 || n == 0 {
                return;
            }
            let (rsa, csa) = strides(trans_a, m, k);
            let (rsb, csb) = strides(trans_b, k, n);
            // SAFETY: the asserts above guarantee every index reachable through
            // the given shapes and strides lies inside the borrowed slices, and
            // `c` is uniquely borrowed.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    alpha,
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
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
