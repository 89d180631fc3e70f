//! Saddle-point approximations of `F` near zero, the elementary large-`n`
//! mean, and the height / saturation level predictors.

use std::f64::consts::{E, LN_2};

use rug::float::{Constant, Round};
use rug::{Complex, Float, Rational};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{internal_mean_exact, mean_closed_exact, variance_exact_rational, EXACT_CLOSED_CAP};
use crate::precision::{cabs, PrecisionContext, GUARD_BITS};
use crate::qseries::{periodic_fluctuation, q_finite};

/// Default half-angle of the sector `|arg z| <= eps` accepted by [`saddle_solve`].
pub const DEFAULT_SADDLE_EPS: f64 = 0.3;
/// Newton iteration cap.
pub const MAX_NEWTON_ITERATIONS: u32 = 200;

/// Solution `rho` of `rho / log rho = 1 / (z log 2)` on the branch with
/// `|rho| -> infinity` as `z -> 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleResult {
    pub rho: Complex,
    pub log_rho: Complex,
    /// `|rho / log rho - X| / |X|` at the returned point, `X = 1/(z log 2)`.
    pub residual: f64,
    pub iterations: u32,
}

pub fn saddle_solve(z: &Complex, ctx: &PrecisionContext) -> Result<SaddleResult> {
    saddle_solve_in_sector(z, DEFAULT_SADDLE_EPS, ctx)
}

/// Newton iteration on `R = log rho` for `R - log R = log X`, `X = 1/(z log 2)`,
/// started from `log(X (log X + log log X))`.
///
/// Real `z > 1/(e log 2)` has no real saddle point (the minimum of
/// `R - log R` is 1, at `R = 1`) and is rejected.
pub fn saddle_solve_in_sector(z: &Complex, eps: f64, ctx: &PrecisionContext) -> Result<SaddleResult> {
    ctx.validate()?;
    if !z.real().is_finite() || !z.imag().is_finite() {
        return Err(Error::domain("z must be finite"));
    }
    let abs_z = cabs(z);
    if !(abs_z > 0.0 && abs_z <= 1.0) {
        return Err(Error::domain(format!("saddle point needs 0 < |z| <= 1, got |z| = {abs_z}")));
    }
    let arg = Float::with_val(64, z.arg_ref()).to_f64();
    if arg.abs() > eps {
        return Err(Error::domain(format!("|arg z| = {arg} exceeds the sector half-angle {eps}")));
    }
    let wp = ctx.bits + GUARD_BITS + 16;
    let ln2 = Float::with_val(wp, Constant::Log2);
    if z.imag().is_zero() {
        let e = Float::with_val(wp, 1).exp();
        let scaled = Float::with_val(wp, z.real() * &e) * &ln2;
        let slack = Float::with_val(wp, 1) + (Float::with_val(wp, 1) >> (ctx.bits - 8));
        if scaled > slack {
            return Err(Error::domain(format!(
                "real z = {} exceeds 1/(e log 2) = {:.6}; no real saddle point",
                z.real().to_f64(),
                1.0 / (E * LN_2)
            )));
        }
    }
    let zw = Complex::with_val(wp, z);
    let big_x = Complex::with_val(wp, Complex::with_val(wp, &zw * &ln2).recip_ref());
    let log_x = Complex::with_val(wp, big_x.ln_ref());
    let abs_big_x = cabs(&big_x);
    let loglog_x = Complex::with_val(wp, log_x.ln_ref());
    let mut r = Complex::with_val(wp, Complex::with_val(wp, &big_x * Complex::with_val(wp, &log_x + &loglog_x)).ln_ref());

    let residual_at = |r: &Complex| -> f64 {
        let rho = Complex::with_val(wp, r.exp_ref());
        let ratio = Complex::with_val(wp, &rho / r);
        cabs(&Complex::with_val(wp, ratio - &big_x)) / abs_big_x
    };
    let target = ctx.series_tol.max(2f64.powi(-(ctx.bits as i32)));
    let mut residual = residual_at(&r);
    let mut iterations = 0;
    while residual > target {
        if iterations == MAX_NEWTON_ITERATIONS {
            return Err(Error::NoConvergence { iterations, residual });
        }
        iterations += 1;
        // f = R - log R - log X, f' = 1 - 1/R
        let f = Complex::with_val(wp, &r - Complex::with_val(wp, r.ln_ref())) - &log_x;
        let fp = Complex::with_val(wp, 1 - Complex::with_val(wp, r.recip_ref()));
        if fp.real().is_zero() && fp.imag().is_zero() {
            break;
        }
        r -= f / fp;
        residual = residual_at(&r);
    }
    let rho = Complex::with_val(wp, r.exp_ref());
    let abs_rho = cabs(&rho);
    if abs_rho < E * (1.0 - 1e-6) {
        return Err(Error::domain(format!(
            "Newton iteration settled on |rho| = {abs_rho} < e, off the small-z branch"
        )));
    }
    Ok(SaddleResult {
        rho: Complex::with_val(ctx.bits, rho),
        log_rho: Complex::with_val(ctx.bits, r),
        residual,
        iterations,
    })
}

/// Saddle-point approximation of `F^{(m)}(z)`:
/// `rho^{m+1/2+1/log 2} / sqrt(2 pi log2 rho) exp(-(log rho)^2/(2 log 2) - P(log2 rho))`.
pub fn f_saddle(z: &Complex, m: u32, ctx: &PrecisionContext) -> Result<Complex> {
    let s = saddle_solve(z, ctx)?;
    let wp = ctx.bits + GUARD_BITS;
    let ln2 = Float::with_val(wp, Constant::Log2);
    let pi = Float::with_val(wp, Constant::Pi);
    let r = Complex::with_val(wp, &s.log_rho);
    let log2_rho = Complex::with_val(wp, &r / &ln2);
    // rho^a = exp(a R)
    let a = Float::with_val(wp, m) + Float::with_val(wp, 0.5) + Float::with_val(wp, ln2.recip_ref());
    let mut expo = Complex::with_val(wp, &r * &a);
    expo -= Complex::with_val(wp, r.square_ref()) / Float::with_val(wp, &ln2 * 2u32);
    let (p, _) = periodic_fluctuation(&log2_rho, &ctx.with_bits(wp))?;
    expo -= p;
    let denom = Complex::with_val(wp, log2_rho * Float::with_val(wp, &pi * 2u32)).sqrt();
    let v = expo.exp() / denom;
    Ok(Complex::with_val(ctx.bits, v))
}

/// [`f_saddle`] on the positive real axis.
pub fn f_saddle_real(x: &Float, m: u32, ctx: &PrecisionContext) -> Result<Float> {
    let z = Complex::with_val(x.prec().max(ctx.bits), (x, 0));
    Ok(f_saddle(&z, m, ctx)?.into_real_imag().0)
}

/// Explicit small-`x` form of `F` in `X = 1/(x log 2)`:
/// `sqrt(log 2/(2 pi)) X^{1/2+1/log 2} exp(-(log(X log X))^2/(2 log 2) - P(log2(X log X)))`.
pub fn f_small_explicit(x: &Float, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    if !(x.is_finite() && *x > 0) {
        return Err(Error::domain("x must be positive and finite"));
    }
    let wp = ctx.bits + GUARD_BITS;
    let ln2 = Float::with_val(wp, Constant::Log2);
    let pi = Float::with_val(wp, Constant::Pi);
    let big_x = Float::with_val(wp, Float::with_val(wp, x * &ln2).recip_ref());
    let log_x = Float::with_val(wp, big_x.ln_ref());
    if log_x <= 0 {
        return Err(Error::domain("X = 1/(x log 2) must exceed 1"));
    }
    let l = Float::with_val(wp, &log_x + Float::with_val(wp, log_x.ln_ref()));
    let a = Float::with_val(wp, 0.5) + Float::with_val(wp, ln2.recip_ref());
    let mut expo = Float::with_val(wp, &log_x * &a);
    expo -= Float::with_val(wp, l.square_ref()) / Float::with_val(wp, &ln2 * 2u32);
    let t = Complex::with_val(wp, (Float::with_val(wp, &l / &ln2), 0));
    let (p, _) = periodic_fluctuation(&t, &ctx.with_bits(wp))?;
    expo -= p.real();
    let pref = Float::with_val(wp, &ln2 / Float::with_val(wp, &pi * 2u32)).sqrt();
    Ok(Float::with_val(ctx.bits, expo.exp() * pref))
}

/// `(2^k / Q_k) (1 - 2^{-k})^n`.
pub fn mean_elementary(n: u64, k: u32, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    let wp = ctx.bits + GUARD_BITS;
    let base = Float::with_val(wp, 1) - (Float::with_val(wp, 1) >> k);
    let mut v = Float::with_val(wp, rug::ops::Pow::pow(&base, &rug::Integer::from(n)));
    v /= Float::with_val(wp, &q_finite(k));
    v <<= k;
    Ok(Float::with_val(ctx.bits, v))
}

fn require_n(n: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain(format!("level predictors need n >= 2, got {n}")));
    }
    Ok(n as f64)
}

/// `(k_s, k_h)`, the lower and upper ends of the central range.
pub fn central_range(n: u64) -> Result<(f64, f64)> {
    let nf = require_n(n)?;
    let ln_n = nf.ln();
    let lg_n = nf.log2();
    let k_s = lg_n - ln_n.log2() + 1.0 + ln_n.log2() / ln_n;
    let k_h = lg_n + (2.0 * lg_n).sqrt() - 0.5 * lg_n.log2() + 1.0 / LN_2
        - 3.0 * ln_n.ln() / (4.0 * (2.0 * ln_n * LN_2).sqrt());
    Ok((k_s, k_h))
}

/// `log2 n + sqrt(2 log2 n) - log2 log2 n / 2 + 1/log 2`.
fn height_anchor(nf: f64) -> f64 {
    let lg_n = nf.log2();
    lg_n + (2.0 * lg_n).sqrt() - 0.5 * lg_n.log2() + 1.0 / LN_2
}

/// `(k_H, theta)`: the floor and fractional part of the height anchor.
pub fn predict_height_level(n: u64) -> Result<(i64, f64)> {
    let a = height_anchor(require_n(n)?);
    let k = a.floor();
    Ok((k as i64, a - k))
}

/// `k_S = ceil(log2 n - log2 log n)`.
pub fn predict_saturation_level(n: u64) -> Result<i64> {
    let nf = require_n(n)?;
    Ok((nf.log2() - nf.ln().log2()).ceil() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPredictions {
    pub n: u64,
    pub k_s: f64,
    pub k_h: f64,
    #[serde(rename = "k_H")]
    pub k_height: i64,
    pub theta: f64,
    #[serde(rename = "k_S")]
    pub k_saturation: i64,
}

pub fn predict_levels(n: u64) -> Result<LevelPredictions> {
    let (k_s, k_h) = central_range(n)?;
    let (k_height, theta) = predict_height_level(n)?;
    Ok(LevelPredictions {
        n,
        k_s,
        k_h,
        k_height,
        theta,
        k_saturation: predict_saturation_level(n)?,
    })
}

/// First- and second-moment bounds on `P(H_n <= k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightBounds {
    pub lower: Rational,
    pub upper: Rational,
}

impl HeightBounds {
    /// Lower bound rounded down to `f64`.
    pub fn lower_f64(&self) -> f64 {
        Float::with_val_round(53, &self.lower, Round::Down).0.to_f64()
    }

    /// Upper bound rounded up to `f64`.
    pub fn upper_f64(&self) -> f64 {
        Float::with_val_round(53, &self.upper, Round::Up).0.to_f64()
    }
}

/// `lower = max(0, 1 - sum_{l>=1} 2^{-l} mu_{n,k+l})`,
/// `upper = min(1, sigma^2_{n,k+1} / mu^2_{n,k+1})` (1 when `mu_{n,k+1} = 0`),
/// computed exactly for `n <= 200`.
pub fn height_probability_bounds(n: u64, k: u32, ctx: &PrecisionContext) -> Result<HeightBounds> {
    ctx.validate()?;
    if n > EXACT_CLOSED_CAP {
        return Err(Error::CapExceeded {
            what: "height probability bounds",
            n,
            cap: EXACT_CLOSED_CAP,
        });
    }
    let one = Rational::from(1);
    let lower = (Rational::from(1) - internal_mean_exact(n, k)?).max(Rational::new());
    let mu = mean_closed_exact(n, k + 1)?;
    let upper = if mu == 0 {
        one
    } else {
        let var = variance_exact_rational(n, k + 1)?;
        (var / mu.square()).min(one)
    };
    Ok(HeightBounds { lower, upper })
}
