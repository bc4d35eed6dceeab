//! Raw numeric kernels on contiguous row-major buffers.

use crate::real::Real;

/// `c[m,n] = op(a)[m,k] * op(b)[k,n] + (accumulate ? c : 0)`.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `trans_a`), `b` is stored `[k,n]`
/// (or `[n,k]` when `trans_b`); `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
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

/// Output extent of a convolution along one axis.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    pub fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad` lies
/// inside `0..w`.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C,H,W]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, o: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let k = g.cols_rows();
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.cols_len()]
    };
    let in_len = g.c * g.h * g.w;
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dst = &mut out[s * o * p..(s + 1) * o * p];
        for (oc, row) in dst.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[oc]);
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(o, k, p, w, false, src, false, dst, true);
    }
    out
}

/// Batched convolution backward; accumulates into whichever of the gradient
/// buffers are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    n: usize,
    o: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let p = g.ho * g.wo;
    let k = g.cols_rows();
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.cols_len() }];
    let mut dcols = vec![
        T::zero();
        if dx.is_some() && !g.is_pointwise() {
            g.cols_len()
        } else {
            0
        }
    ];
    for s in 0..n {
        let gs = &grad_out[s * o * p..(s + 1) * o * p];
        if let Some(db) = db.as_deref_mut() {
            for (oc, row) in gs.chunks(p).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
        let xs = &x[s * in_len..(s + 1) * in_len];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW[O,K] += g[O,P] * cols[K,P]^T
            gemm(o, p, k, gs, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, o, p, w, true, gs, false, dxs, true);
            } else {
                // dcols[K,P] = W[O,K]^T * g[O,P]
                gemm(k, o, p, w, true, gs, false, &mut dcols, false);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// Per-axis source taps for align-corners-false bilinear resampling.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
