//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;

/// Real scalar usable as tensor element: `f32` for training and benchmarks,
/// `f64` for verification.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + SampleUniform
    + Send
    + Sync
    + 'static
{
    /// Short precision tag used in reports ("f32" / "f64").
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `exp(x) - 1` without a library call where precision allows, so hot
    /// loops vectorize. `f64` keeps the libm routine.
    fn expm1_fast(self) -> Self;

    /// `exp(x)` counterpart of [`Scalar::expm1_fast`]; `f32` inputs are
    /// clamped to `[-87, 88]`.
    fn exp_fast(self) -> Self;

    /// Row-major `c = a·b (+ c)`, where `a` is `m×k` (or `k×m` when
    /// `trans_a`) and `b` is `k×n` (or `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

/// Branch-free `exp` for `f32` over `[-87, 88]` (inputs are clamped there):
/// Cody-Waite reduction `x = n·ln2 + r`, then a polynomial for `e^r`.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5·2^23
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let er = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    er * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

/// Branch-free `expm1` for `f32`: Taylor series for `|x| < 0.5`, where
/// `exp(x) - 1` would cancel, otherwise [`exp_f32`].
#[inline(always)]
fn expm1_f32(x: f32) -> f32 {
    let series = x
        * (1.0
            + x * (1.0 / 2.0
                + x * (1.0 / 6.0
                    + x * (1.0 / 24.0
                        + x * (1.0 / 120.0
                            + x * (1.0 / 720.0 + x * (1.0 / 5040.0 + x * (1.0 / 40320.0))))))));
    let reduced = exp_f32(x) - 1.0;
    if x.abs() < 0.5 {
        series
    } else {
        reduced
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $exp:expr, $expm1:expr) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn expm1_fast(self) -> Self {
                $expm1(self)
            }

            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the length assertion above covers every index the
                // strides can reach for an m×k by k×n product into m×n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, exp_f32, expm1_f32);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, f64::exp, f64::exp_m1);
