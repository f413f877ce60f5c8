//! Raw slice kernels behind the differentiable operations.
//!
//! Every dot product and reduction accumulates in `f64` using eight
//! independent partial sums, so results are deterministic and independent of
//! storage precision up to the final rounding.

use crate::tensor::Element;

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].f64() * y[l].f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.f64() * y.f64();
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
pub fn sum<T: Element>(a: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] += x[l].f64();
        }
    }
    let tail: f64 = rest.iter().map(|x| x.f64()).sum();
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[i, j] = sum_p a[i, p] * bt[j, p]` for `a: m x k`, `bt: n x k`.
pub fn gemm_nt<T: Element>(a: &[T], bt: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(T::of(dot(row, &bt[j * k..(j + 1) * k])));
        }
    }
    out
}

/// Same as [`gemm_nt`] but adds into an `f64` accumulator.
pub fn gemm_nt_acc<T: Element>(a: &[T], bt: &[T], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (j, d) in dst.iter_mut().enumerate() {
            *d += dot(row, &bt[j * k..(j + 1) * k]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image into a `positions x patch` matrix (one patch per row).
pub fn im2col_t<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.positions() * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..(oy * g.wo + ox + 1) * patch];
            let mut idx = 0;
            for c in 0..g.cin {
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            row[idx] = plane[iy as usize * g.w + ix as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Folds a `positions x patch` gradient back onto one image, accumulating.
pub fn col2im_t_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..(oy * g.wo + ox + 1) * patch];
            let mut idx = 0;
            for c in 0..g.cin {
                let base = c * g.h * g.w;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            dx[base + iy as usize * g.w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_size = g.cin * g.h * g.w;
    let out_size = cout * g.positions();
    let mut out = Vec::with_capacity(batch * out_size);
    for b in 0..batch {
        let cols = im2col_t(&x[b * in_size..(b + 1) * in_size], g);
        let mut y = gemm_nt(w, &cols, cout, g.patch(), g.positions());
        if let Some(bias) = bias {
            for (o, chunk) in y.chunks_exact_mut(g.positions()).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        out.extend_from_slice(&y);
    }
    out
}

/// Returns `(dx, dw, dbias)`; each is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_size = g.cin * g.h * g.w;
    let npos = g.positions();
    let patch = g.patch();
    let out_size = cout * npos;
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_size]);
    let mut dw_acc = want_dw.then(|| vec![0.0f64; cout * patch]);
    let wt = want_dx.then(|| transpose(w, cout, patch));
    for b in 0..batch {
        let go = &gout[b * out_size..(b + 1) * out_size];
        if let Some(acc) = dw_acc.as_mut() {
            let cols_t = im2col_t(&x[b * in_size..(b + 1) * in_size], g);
            let cols = transpose(&cols_t, npos, patch);
            gemm_nt_acc(go, &cols, cout, npos, patch, acc);
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            let go_t = transpose(go, cout, npos);
            let dcols = gemm_nt(&go_t, wt, npos, cout, patch);
            col2im_t_add(&dcols, g, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
    let dw = dw_acc.map(|acc| acc.into_iter().map(T::of).collect());
    let db = want_db.then(|| {
        (0..cout)
            .map(|o| {
                T::of(
                    (0..batch)
                        .map(|b| sum(&gout[b * out_size + o * npos..b * out_size + (o + 1) * npos]))
                        .sum(),
                )
            })
            .collect()
    });
    (dx, dw, db)
}

/// Source coordinate and interpolation weight for align-corners-false
/// bilinear sampling.
#[inline]
pub fn bilinear_src(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = src - i0 as f64;
    (i0, i1, if i0 == i1 { 0.0 } else { frac })
}

pub fn resize_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ys: Vec<_> = (0..oh).map(|y| bilinear_src(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_src(x, w, ow)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v00 = src[y0 * w + x0].f64();
                let v01 = src[y0 * w + x1].f64();
                let v10 = src[y1 * w + x0].f64();
                let v11 = src[y1 * w + x1].f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(T::of(top + (bot - top) * fy));
            }
        }
    }
    out
}

pub fn resize_backward<T: Element>(gout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ys: Vec<_> = (0..oh).map(|y| bilinear_src(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_src(x, w, ow)).collect();
    let mut acc = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let dst = &mut acc[p * h * w..(p + 1) * h * w];
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        for (iy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ix, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = g[iy * ow + ix].f64();
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    acc.into_iter().map(T::of).collect()
}

/// `(outer, len, inner)` strides for iterating along `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[at(j)].f64() - max).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = T::of(b / total);
            }
        }
    }
    out
}

pub fn softmax_backward<T: Element>(y: &[T], gout: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let s: f64 = (0..len).map(|j| y[at(j)].f64() * gout[at(j)].f64()).sum();
            for j in 0..len {
                dx[at(j)] = T::of(y[at(j)].f64() * (gout[at(j)].f64() - s));
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..13).map(|x| x as f64).collect();
        let b = vec![1.0f64; 13];
        assert_eq!(dot(&a, &b), 78.0);
        assert_eq!(sum(&a), 78.0);
    }

    #[test]
    fn bilinear_src_matches_half_pixel_convention() {
        // 2 -> 4 upsampling: centres at -0.25 (clamped), 0.25, 0.75, 1.25.
        assert_eq!(bilinear_src(0, 2, 4), (0, 1, 0.0));
        assert_eq!(bilinear_src(1, 2, 4), (0, 1, 0.25));
        assert_eq!(bilinear_src(2, 2, 4), (0, 1, 0.75));
        assert_eq!(bilinear_src(3, 2, 4), (1, 1, 0.0));
    }
}
