//! Small NCHW tensor library with reverse-mode differentiation.

mod check;
mod conv;
mod graph;
mod optim;

pub use check::{grad_check, grad_check_with_step, GradCheckReport};
pub use conv::{conv2d, conv_transpose2d, strict_past_mask};
pub use graph::{Graph, Var};
pub use optim::{adam_step, uniform_init, AdamState, ParamStore, Parameter};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Floating-point element type. Transcendentals go through `libm` so the
/// same inputs give the same bits on every platform.
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn round_even(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self >= o {
            self
        } else {
            o
        }
    }

    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $exp:path, $ln:path, $ln1p:path, $sqrt:path, $round:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }
            #[inline]
            fn ln_1p(self) -> Self {
                $ln1p(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn round_even(self) -> Self {
                $round(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_real!(f32, matrixmultiply::sgemm, libm::expf, libm::logf, libm::log1pf, libm::sqrtf, f32::round_ties_even);
impl_real!(f64, matrixmultiply::dgemm, libm::exp, libm::log, libm::log1p, libm::sqrt, f64::round_ties_even);

/// Same contract as [`Real::gemm`] for row-major contiguous `B` and `C`,
/// accumulating each output in a fixed order with no fused multiply-add so
/// results are reproducible across machines.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_portable<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::ZERO);
        }
        for p in 0..k {
            let w = a[i * rsa + p * csa];
            if w == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &x) in row.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
}

/// Dense 4-D tensor in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Tensor { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::ShapeError(format!("{:?} does not hold {} values", shape, data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.to_f64() * b.to_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial slice `[h0, h0+h) × [w0, w0+w)` of every channel.
    pub fn crop(&self, h0: usize, w0: usize, h: usize, w: usize) -> Self {
        let [n, c, hh, ww] = self.shape;
        assert!(h0 + h <= hh && w0 + w <= ww, "crop out of bounds");
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    let src = self.index(b, ch, h0 + i, w0);
                    let dst = out.index(b, ch, i, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    /// Zero-pads on the bottom and right to `h × w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Self {
        let [n, c, hh, ww] = self.shape;
        assert!(h >= hh && w >= ww);
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..hh {
                    let src = self.index(b, ch, i, 0);
                    let dst = out.index(b, ch, i, 0);
                    out.data[dst..dst + ww].copy_from_slice(&self.data[src..src + ww]);
                }
            }
        }
        out
    }
}
