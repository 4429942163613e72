//! Field abstraction shared by the floating-point and exact rational paths.
//!
//! The Faddeev–LeVerrier recursion and the power-series cumulant recursion are
//! written once against [`Scalar`]. `f64` and `Complex64` accumulate sums with
//! Neumaier compensation; the rational types are exact.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_complex::{Complex, Complex64};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub type ExactComplex = Complex<BigRational>;

pub trait Scalar:
    Clone
    + Debug
    + PartialEq
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Exact conversion for the rational types.
    fn from_f64(x: f64) -> Self;

    /// `None` when the type cannot represent a nonzero imaginary part.
    fn from_parts(re: f64, im: f64) -> Option<Self>;

    fn from_usize(k: usize) -> Self;

    /// Sum of a sequence; floating-point types use compensated summation.
    fn sum_all<I: IntoIterator<Item = Self>>(items: I) -> Self {
        items.into_iter().fold(Self::zero(), |acc, x| acc + x)
    }
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        (im == 0.0).then_some(re)
    }

    fn from_usize(k: usize) -> Self {
        k as f64
    }

    fn sum_all<I: IntoIterator<Item = Self>>(items: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in items {
            acc.add(x);
        }
        acc.value()
    }
}

impl Scalar for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        Some(Complex64::new(re, im))
    }

    fn from_usize(k: usize) -> Self {
        Complex64::new(k as f64, 0.0)
    }

    fn sum_all<I: IntoIterator<Item = Self>>(items: I) -> Self {
        let mut re = CompensatedSum::default();
        let mut im = CompensatedSum::default();
        for z in items {
            re.add(z.re);
            im.add(z.im);
        }
        Complex64::new(re.value(), im.value())
    }
}

fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input validated upstream")
}

impl Scalar for BigRational {
    fn from_f64(x: f64) -> Self {
        rational_from_f64(x)
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        (im == 0.0).then(|| rational_from_f64(re))
    }

    fn from_usize(k: usize) -> Self {
        BigRational::from_integer(BigInt::from(k))
    }
}

impl Scalar for ExactComplex {
    fn from_f64(x: f64) -> Self {
        Complex::new(rational_from_f64(x), BigRational::zero())
    }

    fn from_parts(re: f64, im: f64) -> Option<Self> {
        Some(Complex::new(rational_from_f64(re), rational_from_f64(im)))
    }

    fn from_usize(k: usize) -> Self {
        Complex::new(BigRational::from_usize(k), BigRational::zero())
    }
}

/// Lossy conversion of an exact rational for reporting.
pub fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
