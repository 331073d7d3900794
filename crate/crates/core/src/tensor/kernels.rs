use super::Scalar;

const SMALL_GEMM: usize = 2048;

/// `c (+)= op(a)·op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` the buffer `a` holds a row-major `k×m` matrix, likewise `tb`
/// means `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= SMALL_GEMM {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        for i in 0..m {
            for p in 0..k {
                let av = a[i * rsa as usize + p * csa as usize];
                if av == T::zero() {
                    continue;
                }
                let row = &mut c[i * n..(i + 1) * n];
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[p * rsb as usize + j * csb as usize];
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}
