//! Floating point abstraction shared by the autodiff tape, the hash grid and
//! the entropy model.
//!
//! Transcendental functions go through `libm` rather than the platform math
//! library so that encoder and decoder evaluate context networks to the same
//! bits on every target.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn exp_(self) -> Self;
    fn ln_(self) -> Self;
    fn ln_1p_(self) -> Self;
    fn tanh_(self) -> Self;
    fn erfc_(self) -> Self;

    /// `C = A · B` for strided `m × k` and `k × n` operands into a
    /// row-major `C`. Only used for gradients, whose low bits may depend on
    /// the host's vector units.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: &mut [Self],
    );

    #[inline]
    fn from_f64_(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any scalar")
    }

    #[inline]
    fn to_f64_(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64_(v)
    }

    fn sigmoid_(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp_())
        } else {
            let e = self.exp_();
            e / (Self::one() + e)
        }
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus_(self) -> Self {
        if self > Self::c(20.0) {
            self
        } else if self < Self::c(-20.0) {
            self.exp_()
        } else {
            self.exp_().ln_1p_()
        }
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: callers pass operands whose strides stay inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    #[inline]
    fn exp_(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn ln_(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn ln_1p_(self) -> Self {
        libm::log1pf(self)
    }
    #[inline]
    fn tanh_(self) -> Self {
        libm::tanhf(self)
    }
    #[inline]
    fn erfc_(self) -> Self {
        libm::erfcf(self)
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: callers pass operands whose strides stay inside the slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    #[inline]
    fn exp_(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln_(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn ln_1p_(self) -> Self {
        libm::log1p(self)
    }
    #[inline]
    fn tanh_(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn erfc_(self) -> Self {
        libm::erfc(self)
    }
}
