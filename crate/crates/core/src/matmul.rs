//! Blocked matrix-multiply kernel shared by every convolution path.
//!
//! All matrices are dense row-major `f32`. For each output element the
//! reduction runs over `k` in ascending order, so results are independent
//! of blocking and identical from run to run.

/// Width of the column tile. Four output rows of this tile plus one
/// streamed `b` row stay resident in L1.
const NB: usize = 512;

/// `c += a * b` with `a: m x k`, `b: k x n`, `c: m x n`.
pub fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "matmul: a buffer");
    assert_eq!(b.len(), k * n, "matmul: b buffer");
    assert_eq!(c.len(), m * n, "matmul: c buffer");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let mut j0 = 0;
    while j0 < n {
        let jw = NB.min(n - j0);
        let mut rows = &mut c[..];
        let mut i0 = 0;
        while i0 + 4 <= m {
            let (r0, rest) = rows.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, rest) = rest.split_at_mut(n);
            let (r3, rest) = rest.split_at_mut(n);
            rows = rest;
            band4(
                &mut r0[j0..j0 + jw],
                &mut r1[j0..j0 + jw],
                &mut r2[j0..j0 + jw],
                &mut r3[j0..j0 + jw],
                &a[i0 * k..(i0 + 4) * k],
                b,
                k,
                n,
                j0,
                jw,
            );
            i0 += 4;
        }
        while i0 < m {
            let (r0, rest) = rows.split_at_mut(n);
            rows = rest;
            band1(&mut r0[j0..j0 + jw], &a[i0 * k..(i0 + 1) * k], b, k, n, j0, jw);
            i0 += 1;
        }
        j0 += NB;
    }
}

/// `c = a * b`, overwriting `c`.
pub fn matmul_set(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    matmul_acc(c, a, b, m, k, n);
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn band4(
    r0: &mut [f32],
    r1: &mut [f32],
    r2: &mut [f32],
    r3: &mut [f32],
    a: &[f32],
    b: &[f32],
    k: usize,
    n: usize,
    j0: usize,
    jw: usize,
) {
    for kk in 0..k {
        let a0 = a[kk];
        let a1 = a[k + kk];
        let a2 = a[2 * k + kk];
        let a3 = a[3 * k + kk];
        let br = &b[kk * n + j0..kk * n + j0 + jw];
        for j in 0..jw {
            let bv = br[j];
            r0[j] += a0 * bv;
            r1[j] += a1 * bv;
            r2[j] += a2 * bv;
            r3[j] += a3 * bv;
        }
    }
}

#[inline]
fn band1(r0: &mut [f32], a: &[f32], b: &[f32], k: usize, n: usize, j0: usize, jw: usize) {
    for kk in 0..k {
        let a0 = a[kk];
        let br = &b[kk * n + j0..kk * n + j0 + jw];
        for j in 0..jw {
            r0[j] += a0 * br[j];
        }
    }
}

/// Row-major transpose: `dst` becomes `n x m` for `src: m x n`.
pub fn transpose_into(dst: &mut [f32], src: &[f32], m: usize, n: usize) {
    assert_eq!(src.len(), m * n);
    assert_eq!(dst.len(), m * n);
    // Tiled to keep both access patterns cache-friendly.
    const T: usize = 32;
    let mut i0 = 0;
    while i0 < m {
        let ih = T.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let jh = T.min(n - j0);
            for i in i0..i0 + ih {
                for j in j0..j0 + jh {
                    dst[j * m + i] = src[i * n + j];
                }
            }
            j0 += T;
        }
        i0 += T;
    }
}
