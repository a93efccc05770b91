//! Raw loops behind the graph ops. Everything here works on contiguous
//! row-major slices; shape validation happens in the caller.

use crate::scalar::{gemm, Scalar};

/// Unfolds one `[c, h, w]` image into `[c*k*k, h*w]` patch columns with zero
/// padding `k/2`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
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

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Same-size convolution of `[b, ci, h, w]` with `[co, ci, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    weight: &[T],
    co: usize,
    k: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (b, ci, h, w) = dims;
    let hw = h * w;
    let ckk = ci * k * k;
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let xb = &x[bi * ci * hw..(bi + 1) * ci * hw];
        let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
        let src: &[T] = if k == 1 {
            xb
        } else {
            im2col(xb, ci, h, w, k, &mut cols);
            &cols
        };
        gemm::mm(co, ckk, hw, weight, false, src, false, T::zero(), ob);
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(hw).zip(bias) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]; accumulates into whichever buffers are given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    weight: &[T],
    co: usize,
    k: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (b, ci, h, w) = dims;
    let hw = h * w;
    let ckk = ci * k * k;
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let xb = &x[bi * ci * hw..(bi + 1) * ci * hw];
        let gb = &dout[bi * co * hw..(bi + 1) * co * hw];
        if let Some(db) = db.as_deref_mut() {
            for (d, g) in db.iter_mut().zip(gb.chunks(hw)) {
                *d += g.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if k == 1 {
                xb
            } else {
                im2col(xb, ci, h, w, k, &mut cols);
                &cols
            };
            gemm::mm(co, hw, ckk, gb, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[bi * ci * hw..(bi + 1) * ci * hw];
            if k == 1 {
                gemm::mm(ci, co, hw, weight, true, gb, false, T::one(), dxb);
            } else {
                gemm::mm(ckk, co, hw, weight, true, gb, false, T::zero(), &mut cols);
                col2im(&cols, ci, h, w, k, dxb);
            }
        }
    }
}

/// Per-channel same-size convolution. `weight` is `[wb, c, k, k]` where `wb`
/// is 1 (shared across the batch) or `b` (one kernel set per sample).
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    weight: &[T],
    wb: usize,
    k: usize,
    out: &mut [T],
) {
    let (b, c, h, w) = dims;
    let hw = h * w;
    for bi in 0..b {
        let kb = if wb == 1 { 0 } else { bi };
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let taps = &weight[(kb * c + ci) * k * k..(kb * c + ci + 1) * k * k];
            let o = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            o.iter_mut().for_each(|v| *v = T::zero());
            for ky in 0..k {
                for kx in 0..k {
                    let t = taps[ky * k + kx];
                    for_tap(h, w, k, ky, kx, |dst, src, len| {
                        for (d, &s) in o[dst..dst + len].iter_mut().zip(&plane[src..src + len]) {
                            *d += t * s;
                        }
                    });
                }
            }
        }
    }
}

/// Calls `f(dst, src, len)` for every output row segment whose source,
/// shifted by tap `(ky, kx)` of a zero-padded `k×k` window, lies inside the
/// `h×w` plane.
fn for_tap(h: usize, w: usize, k: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let pad = (k / 2) as isize;
    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize);
    if x1 <= x0 as isize {
        return;
    }
    let len = x1 as usize - x0;
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        f(y * w + x0, sy * w + (x0 as isize + dx) as usize, len);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    weight: &[T],
    wb: usize,
    k: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (b, c, h, w) = dims;
    let hw = h * w;
    for bi in 0..b {
        let kb = if wb == 1 { 0 } else { bi };
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let tbase = (kb * c + ci) * k * k;
            let g = &dout[base..base + hw];
            let plane = &x[base..base + hw];
            for ky in 0..k {
                for kx in 0..k {
                    let t = tbase + ky * k + kx;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = T::zero();
                        for_tap(h, w, k, ky, kx, |dst, src, len| {
                            acc += g[dst..dst + len].iter().zip(&plane[src..src + len]).map(|(&a, &b)| a * b).sum::<T>();
                        });
                        dw[t] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wt = weight[t];
                        let dxp = &mut dx[base..base + hw];
                        for_tap(h, w, k, ky, kx, |dst, src, len| {
                            for (d, &gv) in dxp[src..src + len].iter_mut().zip(&g[dst..dst + len]) {
                                *d += wt * gv;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `x` (with `shape`) into `out` laid out as `shape` permuted by `perm`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize], out: &mut [T]) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
