//! Working-precision policy shared by every multiprecision evaluator.
//!
//! Scalars are MPFR floats ([`BigReal`]) and MPC complexes ([`BigComplex`]);
//! every arithmetic operation is correctly rounded at the precision the value
//! was created with. A [`PrecisionContext`] carries the target precision, the
//! absolute truncation tolerance and whether results must be confirmed by a
//! re-evaluation at doubled precision.

use rug::{Complex, Float};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BigReal = Float;
pub type BigComplex = Complex;

/// Maximum number of precision doublings before giving up.
pub const MAX_DOUBLINGS: u32 = 16;

/// Extra bits carried above the cancellation estimate.
pub(crate) const GUARD_BITS: u32 = 24;

/// Hard ceiling on any working precision; far above anything the evaluators need.
const MAX_WORKING_BITS: u32 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionContext {
    /// Target binary precision in bits, at least 53.
    pub bits: u32,
    /// Absolute truncation tolerance for series and products.
    pub series_tol: f64,
    /// Confirm results at doubled precision before returning.
    pub adaptive: bool,
}

impl Default for PrecisionContext {
    fn default() -> Self {
        PrecisionContext {
            bits: 128,
            series_tol: 1e-30,
            adaptive: true,
        }
    }
}

impl PrecisionContext {
    pub fn new(bits: u32, series_tol: f64, adaptive: bool) -> Result<Self> {
        if bits < 53 {
            return Err(Error::domain(format!("precision {bits} < 53 bits")));
        }
        if !(series_tol > 0.0 && series_tol.is_finite()) {
            return Err(Error::domain(format!(
                "series tolerance must be positive and finite, got {series_tol}"
            )));
        }
        Ok(PrecisionContext {
            bits,
            series_tol,
            adaptive,
        })
    }

    /// Fixed-precision context (no doubling confirmation).
    pub fn fixed(bits: u32, series_tol: f64) -> Result<Self> {
        Self::new(bits, series_tol, false)
    }

    pub fn with_bits(&self, bits: u32) -> Self {
        PrecisionContext { bits, ..*self }
    }

    pub fn with_tol(&self, series_tol: f64) -> Self {
        PrecisionContext { series_tol, ..*self }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        Self::new(self.bits, self.series_tol, self.adaptive).map(|_| ())
    }

    /// log2 of the tolerance.
    pub(crate) fn log2_tol(&self) -> f64 {
        self.series_tol.log2()
    }

    /// Precision needed so that rounding noise on `terms` summands of
    /// magnitude up to `2^log2_scale` stays well below the tolerance, and
    /// never below the context precision.
    pub(crate) fn working_bits(&self, log2_scale: f64, terms: usize) -> u32 {
        let noise = log2_scale - self.log2_tol() + (terms.max(1) as f64).log2();
        let need = if noise.is_finite() { noise.ceil().max(0.0) as u32 } else { 0 };
        (self.bits.max(need) + GUARD_BITS).min(MAX_WORKING_BITS)
    }

    /// Runs `eval` at the context precision and, when adaptive, again at
    /// doubled precision until two successive results agree to `series_tol`.
    pub fn refine<T, F>(&self, mut eval: F) -> Result<T>
    where
        T: Refinable,
        F: FnMut(&PrecisionContext) -> Result<T>,
    {
        self.validate()?;
        let mut prev = eval(self)?;
        if !self.adaptive {
            return Ok(prev);
        }
        let mut bits = self.bits;
        for _ in 0..MAX_DOUBLINGS {
            bits = bits.saturating_mul(2);
            let next = eval(&self.with_bits(bits))?;
            if prev.distance(&next) <= self.series_tol {
                return Ok(next);
            }
            prev = next;
        }
        Err(Error::PrecisionExhausted {
            doublings: MAX_DOUBLINGS,
            bits,
        })
    }
}

/// Values whose successive refinements can be compared.
pub trait Refinable {
    /// Absolute discrepancy between two evaluations of the same quantity.
    fn distance(&self, other: &Self) -> f64;
}

impl Refinable for Float {
    fn distance(&self, other: &Self) -> f64 {
        if self.is_nan() || other.is_nan() {
            return f64::INFINITY;
        }
        Float::with_val(self.prec().max(other.prec()), self - other)
            .abs()
            .to_f64()
    }
}

impl Refinable for Complex {
    fn distance(&self, other: &Self) -> f64 {
        let prec = self.prec().0.max(other.prec().0);
        let diff = Complex::with_val(prec, self - other);
        Float::with_val(prec, diff.abs_ref()).to_f64()
    }
}

impl<A: Refinable, B: Refinable> Refinable for (A, B) {
    fn distance(&self, other: &Self) -> f64 {
        self.0.distance(&other.0).max(self.1.distance(&other.1))
    }
}

/// log2 |x|, or -inf for zero.
pub(crate) fn log2_abs(x: &Float) -> f64 {
    if x.is_zero() {
        return f64::NEG_INFINITY;
    }
    if !x.is_finite() {
        return f64::INFINITY;
    }
    let (m, e) = x.to_f64_exp();
    e as f64 + m.abs().log2()
}

/// log2 |z| (up to half a bit), or -inf for zero.
pub(crate) fn log2_abs_c(z: &Complex) -> f64 {
    log2_abs(z.real()).max(log2_abs(z.imag()))
}

/// |z| as f64.
pub fn cabs(z: &Complex) -> f64 {
    Float::with_val(64, z.abs_ref()).to_f64()
}
