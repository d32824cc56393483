use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (except `c`
    /// with itself) matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix view description for [`matmul_into`].
#[derive(Debug, Clone, Copy)]
pub enum Layout {
    /// Row-major as stored.
    Normal,
    /// Stored row-major, used transposed.
    Transposed,
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, where `a` and `b` are row-major
/// buffers optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: bounds asserted above; c does not alias a or b (distinct borrows).
    unsafe {
        T::gemm(
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
        )
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Shape as `(n, c, h, w)`; panics if the tensor is not 4-D.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-D tensor, got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Slice `[start, start+len)` along axis 1 of a tensor with rank ≥ 2.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Self {
        let outer = self.shape[0];
        let c = self.shape[1];
        assert!(start + len <= c, "narrow out of range");
        let inner: usize = self.shape[2..].iter().product();
        let mut shape = self.shape.clone();
        shape[1] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Self { shape, data }
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn cat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let outer = parts[0].shape[0];
        let rest = &parts[0].shape[2..];
        let inner: usize = rest.iter().product();
        for p in parts {
            assert_eq!(p.shape[0], outer, "concat: outer mismatch");
            assert_eq!(&p.shape[2..], rest, "concat: spatial mismatch");
        }
        let total_c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[1] = total_c;
        Self { shape, data }
    }

    /// Spatial crop of a 4-D tensor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(top + height <= h && left + width <= w, "crop out of range");
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            for y in top..top + height {
                let row = plane * h * w + y * w;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Self {
            shape: vec![n, c, height, width],
            data,
        }
    }

    /// Pad bottom/right of a 4-D tensor by mirroring interior rows/columns
    /// (edge sample not repeated); falls back to edge replication when the
    /// pad is not smaller than the extent.
    pub fn pad_reflect(&self, pad_bottom: usize, pad_right: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        let (nh, nw) = (h + pad_bottom, w + pad_right);
        let src_index = |i: usize, len: usize| -> usize {
            if i < len {
                i
            } else if len > 1 && i - len + 1 < len {
                2 * (len - 1) - i
            } else {
                len - 1
            }
        };
        let mut data = Vec::with_capacity(n * c * nh * nw);
        for plane in 0..n * c {
            for y in 0..nh {
                let sy = src_index(y, h);
                for x in 0..nw {
                    let sx = src_index(x, w);
                    data.push(self.data[plane * h * w + sy * w + sx]);
                }
            }
        }
        Self {
            shape: vec![n, c, nh, nw],
            data,
        }
    }
}
