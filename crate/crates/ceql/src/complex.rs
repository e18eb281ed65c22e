//! Complex scalar arithmetic and the surrogate operator library.
//!
//! All signals and weights in the network are `Complex` values. Multi-valued
//! functions (log, sqrt) are evaluated on the principal branch with
//! `arg ∈ (−π, π]`; the branch cut lies along `(−∞, 0]` and values on the cut
//! are defined by the limit from the upper half-plane.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use thiserror::Error;

/// Magnitude guard below which division and log inputs are treated as
/// genuine degeneracies and the sample is flagged instead of producing
/// infinities.
pub const POLE_EPS: f64 = 1e-30;

/// A complex scalar: pair of double-precision real and imaginary parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };
    pub const ONE: Complex = Complex { re: 1.0, im: 0.0 };
    pub const I: Complex = Complex { re: 0.0, im: 1.0 };

    #[inline]
    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    #[inline]
    pub const fn from_real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }

    /// Modulus |z|.
    #[inline]
    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// Squared modulus, avoids the square root when only comparing.
    #[inline]
    pub fn abs_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    /// Principal argument in (−π, π].
    ///
    /// A zero imaginary part (either sign of zero) on the negative real axis
    /// maps to +π: the value on the cut is the limit from the upper
    /// half-plane.
    #[inline]
    pub fn arg(self) -> f64 {
        if self.im == 0.0 {
            if self.re < 0.0 {
                PI
            } else {
                0.0
            }
        } else {
            self.im.atan2(self.re)
        }
    }

    #[inline]
    pub fn conj(self) -> Complex {
        Complex::new(self.re, -self.im)
    }

    #[inline]
    pub fn exp(self) -> Complex {
        let r = self.re.exp();
        Complex::new(r * self.im.cos(), r * self.im.sin())
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// Multiplicative inverse 1/z. Caller guards |z| > 0.
    #[inline]
    pub fn recip(self) -> Complex {
        let d = self.abs_sq();
        Complex::new(self.re / d, -self.im / d)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Complex {
        Complex::new(self.re * s, self.im * s)
    }
}

impl Add for Complex {
    type Output = Complex;
    #[inline]
    fn add(self, rhs: Complex) -> Complex {
        Complex::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl AddAssign for Complex {
    #[inline]
    fn add_assign(&mut self, rhs: Complex) {
        self.re += rhs.re;
        self.im += rhs.im;
    }
}

impl Sub for Complex {
    type Output = Complex;
    #[inline]
    fn sub(self, rhs: Complex) -> Complex {
        Complex::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    #[inline]
    fn mul(self, rhs: Complex) -> Complex {
        Complex::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}

impl Div for Complex {
    type Output = Complex;
    #[inline]
    fn div(self, rhs: Complex) -> Complex {
        self * rhs.recip()
    }
}

impl Neg for Complex {
    type Output = Complex;
    #[inline]
    fn neg(self) -> Complex {
        Complex::new(-self.re, -self.im)
    }
}

impl fmt::Display for Complex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.im >= 0.0 {
            write!(f, "{}+{}i", self.re, self.im)
        } else {
            write!(f, "{}{}i", self.re, self.im)
        }
    }
}

/// Operator evaluation failures. The training loop flags the offending
/// sample instead of propagating infinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("division by near-zero denominator")]
    DivisionNearZero,
    #[error("log of a near-zero argument")]
    LogOfZero,
}

/// The fixed operator library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    Identity,
    Constant,
    Square,
    Multiply,
    Divide,
    Log,
    Sqrt,
}

impl OperatorKind {
    /// Number of summation-node inputs the operator consumes.
    /// `Constant` is arity 1: it occupies a summation node whose value it
    /// ignores, emitting the weight of a dedicated bias edge instead.
    pub fn arity(self) -> usize {
        match self {
            OperatorKind::Multiply | OperatorKind::Divide => 2,
            _ => 1,
        }
    }

    pub fn is_binary(self) -> bool {
        self.arity() == 2
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperatorKind::Identity => "id",
            OperatorKind::Constant => "const",
            OperatorKind::Square => "square",
            OperatorKind::Multiply => "mul",
            OperatorKind::Divide => "div",
            OperatorKind::Log => "log",
            OperatorKind::Sqrt => "sqrt",
        };
        f.write_str(s)
    }
}

/// Surrogate division `Re(Re(x)/y)` embedded back into ℂ with zero
/// imaginary part. The numerator is projected onto the real axis while the
/// denominator keeps its full complex value.
#[inline]
pub fn surrogate_div(x: Complex, y: Complex) -> Result<Complex, OpError> {
    if y.abs() < POLE_EPS {
        return Err(OpError::DivisionNearZero);
    }
    let d = y.abs_sq();
    Ok(Complex::from_real(x.re * y.re / d))
}

/// Complex natural logarithm on the principal branch:
/// `ln|z| + i·arg(z)` with `arg ∈ (−π, π]`.
#[inline]
pub fn principal_log(z: Complex) -> Result<Complex, OpError> {
    if z.abs() < POLE_EPS {
        return Err(OpError::LogOfZero);
    }
    Ok(Complex::new(z.abs().ln(), z.arg()))
}

/// Principal square root via `exp(½·ln z)`. Zero maps to zero exactly,
/// bypassing the log; the result has non-negative real part.
#[inline]
pub fn principal_sqrt(z: Complex) -> Result<Complex, OpError> {
    if z == Complex::ZERO {
        return Ok(Complex::ZERO);
    }
    let l = principal_log(z)?;
    Ok(l.scale(0.5).exp())
}

/// Real-projected unary surrogate `u*(x) = u(Re x) + 0i` for Identity and
/// Square.
#[inline]
pub fn real_projected_unary(kind: OperatorKind, x: Complex) -> Complex {
    match kind {
        OperatorKind::Identity => Complex::from_real(x.re),
        OperatorKind::Square => Complex::from_real(x.re * x.re),
        other => panic!("real_projected_unary called with {other}"),
    }
}

/// Real-projected binary surrogate `b*(x,y) = b(Re x, Re y) + 0i` for
/// Multiply.
#[inline]
pub fn real_projected_binary(kind: OperatorKind, x: Complex, y: Complex) -> Complex {
    match kind {
        OperatorKind::Multiply => Complex::from_real(x.re * y.re),
        other => panic!("real_projected_binary called with {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex, b: Complex, tol: f64) -> bool {
        (a.re - b.re).abs() <= tol && (a.im - b.im).abs() <= tol
    }

    #[test]
    fn surrogate_div_examples() {
        // Re(2/(1+i)) = Re(1-i) = 1
        let r = surrogate_div(Complex::new(2.0, 3.0), Complex::new(1.0, 1.0)).unwrap();
        assert_eq!(r, Complex::new(1.0, 0.0));
        let r = surrogate_div(Complex::new(1.0, 0.0), Complex::new(2.0, 0.0)).unwrap();
        assert_eq!(r, Complex::new(0.5, 0.0));
        // Re(x) = 0 forces a zero numerator.
        let r = surrogate_div(Complex::new(0.0, 5.0), Complex::new(3.0, 4.0)).unwrap();
        assert_eq!(r, Complex::ZERO);
    }

    #[test]
    fn surrogate_div_guard() {
        let e = surrogate_div(Complex::ONE, Complex::ZERO);
        assert_eq!(e, Err(OpError::DivisionNearZero));
        let e = surrogate_div(Complex::ONE, Complex::new(1e-31, 0.0));
        assert_eq!(e, Err(OpError::DivisionNearZero));
    }

    #[test]
    fn principal_log_examples() {
        assert_eq!(principal_log(Complex::ONE).unwrap(), Complex::ZERO);
        let r = principal_log(Complex::new(-1.0, 0.0)).unwrap();
        assert_eq!(r, Complex::new(0.0, PI));
        let r = principal_log(Complex::I).unwrap();
        assert!(close(r, Complex::new(0.0, PI / 2.0), 1e-15));
        assert_eq!(principal_log(Complex::ZERO), Err(OpError::LogOfZero));
    }

    #[test]
    fn log_cut_is_upper_half_plane_limit() {
        // Negative real axis with a negative-zero imaginary part still maps
        // to arg = +π.
        let z = Complex::new(-2.0, -0.0);
        let r = principal_log(z).unwrap();
        assert_eq!(r.im, PI);
    }

    #[test]
    fn principal_sqrt_examples() {
        let r = principal_sqrt(Complex::new(4.0, 0.0)).unwrap();
        assert!(close(r, Complex::new(2.0, 0.0), 1e-15));
        let r = principal_sqrt(Complex::new(-1.0, 0.0)).unwrap();
        assert!(close(r, Complex::I, 1e-15));
        // (1+i)^2 = 2i
        let r = principal_sqrt(Complex::new(0.0, 2.0)).unwrap();
        assert!(close(r, Complex::new(1.0, 1.0), 1e-15));
        assert_eq!(principal_sqrt(Complex::ZERO).unwrap(), Complex::ZERO);
    }

    #[test]
    fn sqrt_has_nonnegative_real_part() {
        for &(re, im) in &[
            (-3.0, 0.5),
            (-3.0, -0.5),
            (-1.0, 0.0),
            (2.0, -7.0),
            (0.0, -1.0),
        ] {
            let r = principal_sqrt(Complex::new(re, im)).unwrap();
            assert!(r.re >= 0.0, "sqrt({re}+{im}i) = {r}");
        }
    }

    #[test]
    fn real_projections() {
        let r = real_projected_unary(OperatorKind::Square, Complex::new(3.0, 7.0));
        assert_eq!(r, Complex::new(9.0, 0.0));
        let r = real_projected_unary(OperatorKind::Identity, Complex::new(-2.0, 0.5));
        assert_eq!(r, Complex::new(-2.0, 0.0));
        let r = real_projected_unary(OperatorKind::Square, Complex::new(0.0, 4.0));
        assert_eq!(r, Complex::ZERO);
        let r = real_projected_binary(
            OperatorKind::Multiply,
            Complex::new(2.0, 9.0),
            Complex::new(3.0, -4.0),
        );
        assert_eq!(r, Complex::new(6.0, 0.0));
        let r = real_projected_binary(OperatorKind::Multiply, Complex::I, Complex::new(5.0, 0.0));
        assert_eq!(r, Complex::ZERO);
        let r = real_projected_binary(
            OperatorKind::Multiply,
            Complex::new(-1.5, 0.0),
            Complex::new(2.0, 0.0),
        );
        assert_eq!(r, Complex::new(-3.0, 0.0));
    }

    #[test]
    fn positive_real_axis_agrees_with_real_functions() {
        for &x in &[1e-6, 0.1, 1.0, 7.5, 1e6] {
            let z = Complex::from_real(x);
            let l = principal_log(z).unwrap();
            assert!((l.re - x.ln()).abs() <= 4.0 * f64::EPSILON * x.ln().abs().max(1.0));
            assert_eq!(l.im, 0.0);
            let s = principal_sqrt(z).unwrap();
            assert!((s.re - x.sqrt()).abs() <= 4.0 * f64::EPSILON * x.sqrt());
            assert_eq!(s.im, 0.0);
        }
    }

    #[test]
    fn arity_table() {
        use OperatorKind::*;
        for op in [Identity, Constant, Square, Log, Sqrt] {
            assert_eq!(op.arity(), 1);
        }
        for op in [Multiply, Divide] {
            assert_eq!(op.arity(), 2);
        }
    }
}
