//! Dense loops behind the tape ops. All reductions run in a fixed order so
//! results never depend on scheduling.

use crate::tensor::Real;

const LANES: usize = 8;

/// Dot product with eight fixed accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * LANES..c * LANES + LANES], &b[c * LANES..c * LANES + LANES]);
        for l in 0..LANES {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Four `axpy`s sharing one pass over `x`.
#[inline]
fn axpy4<T: Real>(alpha: [T; 4], x: &[T], y: [&mut [T]; 4]) {
    let [y0, y1, y2, y3] = y;
    let rows = y0.iter_mut().zip(y1.iter_mut()).zip(y2.iter_mut().zip(y3.iter_mut()));
    for (((v0, v1), (v2, v3)), &xv) in rows.zip(x) {
        *v0 += alpha[0] * xv;
        *v1 += alpha[1] * xv;
        *v2 += alpha[2] * xv;
        *v3 += alpha[3] * xv;
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
///
/// Rows of `c` are processed four at a time so each row of `b` is streamed
/// once per block. Every output still accumulates over `p` in ascending order.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let b = &b[..k * n];
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            axpy4([a0, a1, a2, a3], brow, [&mut *c0, &mut *c1, &mut *c2, &mut *c3]);
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut p = 0;
    while p + 4 <= k {
        let (c0, rest) = c[p * n..(p + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for i in 0..m {
            let arow = &a[i * k + p..i * k + p + 4];
            let (a0, a1, a2, a3) = (arow[0], arow[1], arow[2], arow[3]);
            let brow = &b[i * n..(i + 1) * n];
            axpy4([a0, a1, a2, a3], brow, [&mut *c0, &mut *c1, &mut *c2, &mut *c3]);
        }
        p += 4;
    }
    for p in p..k {
        let crow = &mut c[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(a[i * k + p], &b[i * n..(i + 1) * n], crow);
        }
    }
}

/// Unfold one image `[cin, h, w]` into `[cin*k*k, h*w]` with "same" padding.
pub fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + dxo;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy as usize * w + sx as usize] += src[y * w + xo];
                    }
                }
            }
        }
    }
}

/// Source taps for a 2x bilinear upsample along one axis (half-pixel
/// centers, edge clamped).
pub fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
