//! Raw forward/backward kernels over row-major buffers. Shapes are
//! validated by the graph layer before these are called.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input matrix.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unfolded input matrix (all output pixels of the batch).
    pub fn l(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input index `o·stride + k − pad` falls
/// inside `0..len`.
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    // o·stride + k ≥ pad  and  o·stride + k < pad + len
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if pad + len > k {
        (pad + len - k).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `x` into a `[cin·kh·kw, n·ho·wo]` matrix.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let hw_out = g.ho * g.wo;
    let l = g.l();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut col[row * l..(row + 1) * l];
                let (x0, x1) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            out_row.fill(S::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        out_row[..x0].fill(S::zero());
                        out_row[x1..].fill(S::zero());
                        let base = x0 * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out_row[x0..x1].copy_from_slice(&src_row[base..base + (x1 - x0)]);
                        } else {
                            for (v, &s) in out_row[x0..x1]
                                .iter_mut()
                                .zip(src_row[base..].iter().step_by(g.stride))
                            {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped buffer.
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, dx: &mut [S]) {
    let hw_out = g.ho * g.wo;
    let l = g.l();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * l..(row + 1) * l];
                let (x0, x1) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                if x0 >= x1 {
                    continue;
                }
                let base = x0 * g.stride + kj - g.pad;
                for n in 0..g.n {
                    let dst =
                        &mut dx[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let s = &src[oy * g.wo + x0..oy * g.wo + x1];
                        if g.stride == 1 {
                            for (d, &v) in dst_row[base..base + s.len()].iter_mut().zip(s) {
                                *d = *d + v;
                            }
                        } else {
                            for (d, &v) in dst_row[base..].iter_mut().step_by(g.stride).zip(s) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[c, n·hw]` → `[n, c, hw]`
pub(crate) fn cl_to_nchw<S: Scalar>(src: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * c * hw];
    for ci in 0..c {
        for ni in 0..n {
            let s = &src[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw];
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// `[n, c, hw]` → `[c, n·hw]`
pub(crate) fn nchw_to_cl<S: Scalar>(src: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let s = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            out[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>) {
    let (k, l) = (g.k(), g.l());
    let mut col = vec![S::zero(); k * l];
    im2col(x, g, &mut col);
    let mut out_cl = vec![S::zero(); g.cout * l];
    S::gemm(g.cout, k, l, w, false, &col, false, &mut out_cl, false);
    if let Some(b) = b {
        for (co, row) in out_cl.chunks_mut(l).enumerate() {
            row.iter_mut().for_each(|v| *v = *v + b[co]);
        }
    }
    (cl_to_nchw(&out_cl, g.n, g.cout, g.ho * g.wo), col)
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

/// `col` is the forward pass's unfolded input, when it was kept.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    col: Option<&[S]>,
    w: &[S],
    gout: &[S],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let (k, l) = (g.k(), g.l());
    let g_cl = nchw_to_cl(gout, g.n, g.cout, g.ho * g.wo);
    let dw = need.1.then(|| {
        let fresh;
        let col = match col {
            Some(c) => c,
            None => {
                let mut c = vec![S::zero(); k * l];
                im2col(x, g, &mut c);
                fresh = c;
                &fresh
            }
        };
        let mut dw = vec![S::zero(); g.cout * k];
        S::gemm(g.cout, l, k, &g_cl, false, col, true, &mut dw, false);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![S::zero(); k * l];
        S::gemm(k, g.cout, l, w, true, &g_cl, false, &mut dcol, false);
        let mut dx = vec![S::zero(); g.n * g.cin * g.h * g.w];
        col2im(&dcol, g, &mut dx);
        dx
    });
    let db = need
        .2
        .then(|| g_cl.chunks(l).map(|row| row.iter().copied().sum()).collect());
    ConvGrads { dx, dw, db }
}

/// Half-open input window `[floor(i·len/out), ceil((i+1)·len/out))`.
pub(crate) fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub(crate) fn adaptive_avg_pool_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_window(j, w, ow);
                let mut acc = S::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + src[y * w + xx];
                    }
                }
                let count = S::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                out[(p * oh + i) * ow + j] = acc / count;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<S: Scalar>(
    gout: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_window(j, w, ow);
                let count = S::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let gv = gout[(p * oh + i) * ow + j] / count;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] = dst[y * w + xx] + gv;
                    }
                }
            }
        }
    }
    dx
}

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per output index,
/// source coordinate `(dst + 0.5)·in/out − 0.5` clamped to the valid range.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn bilinear_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = S::from_f64(wy0 * wx0) * src[y0 * w + x0]
                    + S::from_f64(wy0 * wx1) * src[y0 * w + x1]
                    + S::from_f64(wy1 * wx0) * src[y1 * w + x0]
                    + S::from_f64(wy1 * wx1) * src[y1 * w + x1];
                out[(p * oh + i) * ow + j] = v;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<S: Scalar>(
    gout: &[S],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gout[(p * oh + i) * ow + j];
                dst[y0 * w + x0] = dst[y0 * w + x0] + S::from_f64(wy0 * wx0) * gv;
                dst[y0 * w + x1] = dst[y0 * w + x1] + S::from_f64(wy0 * wx1) * gv;
                dst[y1 * w + x0] = dst[y1 * w + x0] + S::from_f64(wy1 * wx0) * gv;
                dst[y1 * w + x1] = dst[y1 * w + x1] + S::from_f64(wy1 * wx1) * gv;
            }
        }
    }
    dx
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<S: Scalar>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut mx = S::neg_infinity();
            for k in 0..len {
                mx = mx.max(x[idx(k)]);
            }
            let mut total = S::zero();
            for k in 0..len {
                let e = (x[idx(k)] - mx).exp();
                out[idx(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<S: Scalar>(
    y: &[S],
    gout: &[S],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: S = (0..len).map(|k| gout[idx(k)] * y[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = y[idx(k)] * (gout[idx(k)] - dot);
            }
        }
    }
    dx
}

/// Numerically stable `log(1 + exp(z))`.
#[inline]
pub(crate) fn softplus<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_windows_cover_input() {
        assert_eq!(pool_window(0, 5, 2), (0, 3));
        assert_eq!(pool_window(1, 5, 2), (2, 5));
        assert_eq!(pool_window(0, 4, 1), (0, 4));
    }

    #[test]
    fn bilinear_taps_identity_when_same_size() {
        for (i, &(i0, _, w0, _)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, i);
            assert_eq!(w0, 1.0);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            n: 2,
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..g.n * g.cin * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.k() * g.l()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; g.k() * g.l()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (stride, pad, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 3), (1, 2, 2)] {
            let (h, w) = (7, 6);
            let g = ConvGeom {
                n: 2,
                cin: 2,
                h,
                w,
                cout: 1,
                kh: k,
                kw: k,
                stride,
                pad,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..g.n * g.cin * h * w).map(|i| i as f64 + 1.0).collect();
            let mut col = vec![f64::NAN; g.k() * g.l()];
            im2col(&x, &g, &mut col);
            for ci in 0..g.cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        for n in 0..g.n {
                            for oy in 0..g.ho {
                                for ox in 0..g.wo {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                                    let expect = if inside {
                                        x[((n * g.cin + ci) * h + iy as usize) * w + ix as usize]
                                    } else {
                                        0.0
                                    };
                                    let got = col[row * g.l() + (n * g.ho + oy) * g.wo + ox];
                                    assert_eq!(got, expect, "stride {stride} pad {pad} k {k}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0f64), 0.0);
        assert_eq!(softplus(800.0f64), 800.0);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
    }
}
