//! Dense NCHW tensors and the matrix-multiply kernel everything else sits on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{bail, Result};
use crate::par;

/// Floating-point element type. Training runs in `f32`; gradient checks
/// run the identical code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, with `c` not aliasing `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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

impl Scalar for f64 {
    unsafe fn gemm_raw(
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

/// Layout of a row-major matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Use as stored.
    N,
    /// Use transposed.
    T,
}

/// Work (m·n·k) above which the output rows are split across workers.
const PAR_GEMM_WORK: usize = 1 << 21;

/// `C = op(A)·op(B) + beta·C`, all row-major and densely packed.
///
/// `op(A)` is `m×k`, `op(B)` is `k×n`. Large products split `C` into row
/// blocks computed independently; each element sees the same reduction
/// order either way, so results do not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let workers = par::worker_count();
    let rows_per = if workers > 1 && m * n * k >= PAR_GEMM_WORK && m >= 2 * workers {
        m.div_ceil(workers)
    } else {
        m
    };
    // Raw pointers are not Send; pass addresses instead.
    let a_addr = a.as_ptr() as usize;
    let b_addr = b.as_ptr() as usize;
    par::for_each_chunk_mut(c, rows_per * n, |ci, chunk| {
        let r0 = ci * rows_per;
        let rows = chunk.len() / n;
        // SAFETY: the chunk covers rows r0..r0+rows of C; A's row r0 starts at
        // offset r0*rsa, and all strides stay inside the asserted lengths.
        unsafe {
            let a_ptr = (a_addr as *const T).offset(r0 as isize * rsa);
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_ptr,
                rsa,
                csa,
                b_addr as *const T,
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Dense 4D tensor in (batch, channel, row, col) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            bail!(
                Shape,
                "tensor data has {} elements, shape {:?} needs {}",
                data.len(),
                shape,
                len
            );
        }
        Ok(Self { shape, data })
    }

    /// Concatenates equally shaped (1, C, H, W) tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            bail!(Shape, "cannot stack an empty list");
        };
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                bail!(Shape, "stack: {:?} vs {:?}", t.shape, first.shape);
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Elementwise `self += other * s`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, s: T) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> Tensor<T> {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }
    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let off = (n * self.shape[1] + c) * p;
        &self.data[off..off + p]
    }
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let off = (n * self.shape[1] + c) * p;
        &mut self.data[off..off + p]
    }
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> &T {
        let [_, cc, h, w] = self.shape;
        &self.data[((n * cc + c) * h + y) * w + x]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from per-sample buffers of equal (C, H, W) shape.
    pub(crate) fn from_samples(chw: [usize; 3], samples: Vec<Vec<T>>) -> Self {
        let [c, h, w] = chw;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in &samples {
            debug_assert_eq!(s.len(), c * h * w);
            data.extend_from_slice(s);
        }
        Self {
            shape: [samples.len(), c, h, w],
            data,
        }
    }
}
