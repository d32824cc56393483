//! Convolution kernels (NCHW, im2col + GEMM).
//!
//! Weights follow the usual conventions: `[c_out, c_in, k, k]` for
//! convolution and `[c_in, c_out, k, k]` for transposed convolution.

use crate::tensor::{matmul_into, Float, Layout, Tensor};

/// Sliding-window geometry of a convolution from a `(c, h, w)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride > 0 && kernel > 0);
        assert!(
            h + 2 * pad >= kernel && w + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {h}x{w}"
        );
        Self {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose kernel tap `kj` lands inside the input row.
fn valid_span(g: &Geometry, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    // ox * s + kj >= p
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // ox * s + kj < w + p
    let hi = if g.w + p > kj { (g.w + p - kj - 1) / s + 1 } else { 0 };
    (lo.min(g.out_w), hi.min(g.out_w).max(lo.min(g.out_w)))
}

fn im2col<T: Float>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npix = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_span(g, kj);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * s + kj - g.pad;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<T: Float>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npix = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_span(g, kj);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - g.pad;
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if s == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Float>(grad_out: &[T], db: &mut [T], plane: usize) {
    for (c, acc) in db.iter_mut().enumerate() {
        *acc += grad_out[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(len: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (len - 1) * stride + kernel + out_pad - 2 * pad
}

pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2);
    let g = Geometry::new(cin, h, wd, k, stride, pad);
    let (rows, npix) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, cout, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * npix] };
    let in_sz = cin * h * wd;
    let out_sz = cout * npix;
    for i in 0..n {
        let xs = &x.data()[i * in_sz..(i + 1) * in_sz];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[i * out_sz..(i + 1) * out_sz];
        matmul_into(cout, rows, npix, w.data(), Layout::Normal, src, Layout::Normal, T::zero(), dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), npix);
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = Geometry::new(cin, h, wd, k, stride, pad);
    let (rows, npix) = (g.rows(), g.cols());
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let mut db = need[2].then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![T::zero(); rows * npix];
    let in_sz = cin * h * wd;
    let out_sz = cout * npix;
    for i in 0..n {
        let go = &grad_out.data()[i * out_sz..(i + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[i * in_sz..(i + 1) * in_sz];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            matmul_into(cout, npix, rows, go, Layout::Normal, src, Layout::Transposed, T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            accumulate_bias_grad(go, db.data_mut(), npix);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                matmul_into(rows, cout, npix, w.data(), Layout::Transposed, go, Layout::Normal, T::zero(), dxs);
            } else {
                matmul_into(rows, cout, npix, w.data(), Layout::Transposed, go, Layout::Normal, T::zero(), &mut cols);
                col2im(&g, &cols, dxs);
            }
        }
    }
    (dx, dw, db)
}

pub fn conv_transpose2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k, _) = w.dims4();
    assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
    let (oh, ow) = (
        conv_transpose_out(h, k, stride, pad, out_pad),
        conv_transpose_out(wd, k, stride, pad, out_pad),
    );
    // Geometry of the adjoint convolution mapping the output grid back to x.
    let g = Geometry::new(cout, oh, ow, k, stride, pad);
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    let rows = g.rows();
    let npix = h * wd;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut cols = vec![T::zero(); rows * npix];
    let in_sz = cin * npix;
    let out_sz = cout * oh * ow;
    for i in 0..n {
        let xs = &x.data()[i * in_sz..(i + 1) * in_sz];
        matmul_into(rows, cin, npix, w.data(), Layout::Transposed, xs, Layout::Normal, T::zero(), &mut cols);
        let dst = &mut out.data_mut()[i * out_sz..(i + 1) * out_sz];
        col2im(&g, &cols, dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), oh * ow);
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, k, _) = w.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let g = Geometry::new(cout, oh, ow, k, stride, pad);
    let rows = g.rows();
    let npix = h * wd;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let mut db = need[2].then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![T::zero(); rows * npix];
    let in_sz = cin * npix;
    let out_sz = cout * oh * ow;
    for i in 0..n {
        let go = &grad_out.data()[i * out_sz..(i + 1) * out_sz];
        if let Some(db) = db.as_mut() {
            accumulate_bias_grad(go, db.data_mut(), oh * ow);
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(&g, go, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * in_sz..(i + 1) * in_sz];
            matmul_into(cin, rows, npix, w.data(), Layout::Normal, &cols, Layout::Normal, T::zero(), dxs);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[i * in_sz..(i + 1) * in_sz];
            matmul_into(cin, npix, rows, xs, Layout::Normal, &cols, Layout::Transposed, T::one(), dw.data_mut());
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_nested_loops() {
        for &(k, s, p) in &[(3, 1, 1), (5, 2, 2), (1, 1, 0), (3, 2, 1)] {
            let x = pseudo(&[2, 3, 8, 6], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let fast = conv2d_forward(&x, &w, None, s, p);
            let slow = naive_conv(&x, &w, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for matching weights.
        let x = pseudo(&[1, 3, 8, 8], 3);
        let w = pseudo(&[4, 3, 5, 5], 4);
        let y = conv2d_forward(&x, &w, None, 2, 2);
        let r = pseudo(y.shape(), 5);
        // Transposed conv weight [c_in=4, c_out=3] is the conv weight reinterpreted.
        let back = conv_transpose2d_forward(&r, &w, None, 2, 2, 1);
        assert_eq!(back.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transpose_output_doubles_extent() {
        assert_eq!(conv_transpose_out(4, 5, 2, 2, 1), 8);
        assert_eq!(conv_transpose_out(1, 5, 2, 2, 1), 2);
    }
}
