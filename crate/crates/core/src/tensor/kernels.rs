//! Raw numeric kernels over flat row-major slices.
//!
//! Parallel kernels split work by output rows only, so every output element
//! is produced by exactly one thread with a fixed summation order.

use rayon::prelude::*;

use super::Element;

const PAR_WORK: usize = 1 << 15;
const COL_TILE: usize = 512;

/// Row-major transpose of a `rows x cols` matrix.
pub(crate) fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    let lo = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let hi = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    lo + hi + s
}

/// `c[m x n] (+)= op(a) . op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `a_t` the slice `a` is stored `k x m`; with `b_t`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_owned;
    let a: &[T] = if a_t {
        a_owned = transpose(a, k, m);
        &a_owned
    } else {
        a
    };
    let parallel = m * k * n >= PAR_WORK && m > 1;
    if b_t {
        let row = |(i, c_row): (usize, &mut [T])| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, out) in c_row.iter_mut().enumerate() {
                *out = *out + dot(a_row, &b[j * k..(j + 1) * k]);
            }
        };
        if parallel {
            c.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            c.chunks_mut(n).enumerate().for_each(row);
        }
    } else {
        let row = |(i, c_row): (usize, &mut [T])| {
            let a_row = &a[i * k..(i + 1) * k];
            let mut j0 = 0;
            while j0 < n {
                let j1 = (j0 + COL_TILE).min(n);
                let c_tile = &mut c_row[j0..j1];
                for (p, &aip) in a_row.iter().enumerate() {
                    if aip == T::zero() {
                        continue;
                    }
                    let b_tile = &b[p * n + j0..p * n + j1];
                    for (o, &bv) in c_tile.iter_mut().zip(b_tile) {
                        *o = *o + aip * bv;
                    }
                }
                j0 = j1;
            }
        };
        if parallel {
            c.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            c.chunks_mut(n).enumerate().for_each(row);
        }
    }
}

/// Layout of one convolution, shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvLayout {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `x` (`channels x height x width`) into `rows() x cols()` patches.
pub(crate) fn im2col<T: Element>(x: &[T], l: &ConvLayout, cols: &mut [T]) {
    let p = l.cols();
    for c in 0..l.channels {
        let plane = &x[c * l.height * l.width..(c + 1) * l.height * l.width];
        for i in 0..l.kh {
            for j in 0..l.kw {
                let row = &mut cols[((c * l.kh + i) * l.kw + j) * p..][..p];
                for oh in 0..l.out_h {
                    let ih = (oh * l.stride + i) as isize - l.pad_h as isize;
                    let dst = &mut row[oh * l.out_w..(oh + 1) * l.out_w];
                    if ih < 0 || ih >= l.height as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * l.width..(ih as usize + 1) * l.width];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * l.stride + j) as isize - l.pad_w as isize;
                        *v = if iw < 0 || iw >= l.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add patch gradients back onto the input layout.
pub(crate) fn col2im<T: Element>(cols: &[T], l: &ConvLayout, dx: &mut [T]) {
    let p = l.cols();
    for c in 0..l.channels {
        let plane = &mut dx[c * l.height * l.width..(c + 1) * l.height * l.width];
        for i in 0..l.kh {
            for j in 0..l.kw {
                let row = &cols[((c * l.kh + i) * l.kw + j) * p..][..p];
                for oh in 0..l.out_h {
                    let ih = (oh * l.stride + i) as isize - l.pad_h as isize;
                    if ih < 0 || ih >= l.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * l.width..(ih as usize + 1) * l.width];
                    for ow in 0..l.out_w {
                        let iw = (ow * l.stride + j) as isize - l.pad_w as isize;
                        if iw >= 0 && (iw as usize) < l.width {
                            dst[iw as usize] = dst[iw as usize] + row[oh * l.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
