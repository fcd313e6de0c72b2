use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{arg_err, Result};

/// Floating-point storage type for tensors; implemented for `f32` and `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` on strided row-major views
    /// (`A` is `m×k`, `B` is `k×n`, `C` is `m×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_strides: [isize; 2], b: &[Self], b_strides: [isize; 2], beta: Self, c: &mut [Self], c_row: isize);
}

fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: &[T], sa: [isize; 2], b: &[T], sb: [isize; 2], c: &[T], c_row: isize) {
    let reach = |rows: usize, cols: usize, s: [isize; 2]| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * s[0] + (cols as isize - 1) * s[1] + 1
        }
    };
    assert!(sa.iter().chain(&sb).all(|&s| s >= 0) && c_row >= n as isize);
    assert!(reach(m, k, sa) as usize <= a.len());
    assert!(reach(k, n, sb) as usize <= b.len());
    assert!(reach(m, n, [c_row, 1]) as usize <= c.len());
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], beta: Self, c: &mut [Self], c_row: isize) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, c_row);
        // SAFETY: every strided access stays inside the slices (checked above).
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], beta, c.as_mut_ptr(), c_row, 1);
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], beta: Self, c: &mut [Self], c_row: isize) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, c_row);
        // SAFETY: every strided access stays inside the slices (checked above).
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], beta, c.as_mut_ptr(), c_row, 1);
        }
    }
}

/// `(N, C, D, H, W)` extents of a batched, channelled volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5(pub [usize; 5]);

impl Shape5 {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5([n, c, d, h, w])
    }
    pub const fn n(&self) -> usize {
        self.0[0]
    }
    pub const fn c(&self) -> usize {
        self.0[1]
    }
    pub const fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }
    /// Voxels per channel plane.
    pub const fn plane(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }
    pub const fn numel(&self) -> usize {
        self.0[0] * self.0[1] * self.plane()
    }
    pub const fn with_channels(&self, c: usize) -> Self {
        Shape5([self.0[0], c, self.0[2], self.0[3], self.0[4]])
    }
}

/// A dense `(N, C, D, H, W)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(arg_err!(
                "tensor of shape {:?} needs {} values, got {}",
                shape.0,
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape5, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape5::new(1, 1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Slice of one `(n, c)` channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c() + c) * p;
        &self.data[off..off + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Copies sample `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.shape.numel() / self.shape.n().max(1);
        Tensor {
            shape: Shape5([1, self.shape.0[1], self.shape.0[2], self.shape.0[3], self.shape.0[4]]),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates equally-shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| arg_err!("cannot stack zero tensors"))?;
        let mut s = first.shape;
        let mut data = Vec::with_capacity(first.data.len() * parts.len());
        let mut n = 0;
        for p in parts {
            if p.shape.0[1..] != first.shape.0[1..] {
                return Err(arg_err!("stack shape mismatch {:?} vs {:?}", p.shape.0, first.shape.0));
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        s.0[0] = n;
        Ok(Tensor { shape: s, data })
    }
}
