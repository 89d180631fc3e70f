//! q-Pochhammer quantities at q = 1/2.
//!
//! `Q(z) = prod_{l>=1} (1 - 2^-l z)`, `Q_n = prod_{1<=l<=n} (1 - 2^-l)` and
//! `Q_inf = Q(1)`, plus the exact reflection identity
//!
//! ```text
//! log Q(-2s) = (log s)^2 / (2 log 2) + (log s)/2 + P(log2 s) - log Q(-1/s)
//! ```
//!
//! valid for every `s` off the closed negative real axis.

use std::f64::consts::{LN_2, PI};

use rug::float::Constant;
use rug::{Complex, Float, Rational};

use crate::error::{Error, Result};
use crate::precision::{log2_abs, log2_abs_c, PrecisionContext, GUARD_BITS};

/// Default half-angle `eps` of the sector `|arg s| <= pi - eps` accepted by
/// [`q_log_asymptotic`].
pub const DEFAULT_SECTOR_EPS: f64 = 0.1;

/// `Q_n` as an exact rational.
pub fn q_finite(n: u32) -> Rational {
    let mut q = Rational::from(1);
    for l in 1..=n {
        let pow = rug::Integer::from(1) << l;
        q *= Rational::from((pow.clone() - 1u32, pow));
    }
    q
}

/// Exact `Q_0..=Q_{n_max}` together with `Q_inf` at context precision.
#[derive(Debug, Clone)]
pub struct QTable {
    qn: Vec<Rational>,
    q_infinity: Float,
    q_infinity_tail: f64,
}

impl QTable {
    pub fn new(n_max: u32, ctx: &PrecisionContext) -> Result<Self> {
        let mut qn = Vec::with_capacity(n_max as usize + 1);
        let mut q = Rational::from(1);
        qn.push(q.clone());
        for l in 1..=n_max {
            let pow = rug::Integer::from(1) << l;
            q *= Rational::from((pow.clone() - 1u32, pow));
            qn.push(q.clone());
        }
        let (q_infinity, q_infinity_tail) = q_product_real_with_tail(&Float::with_val(ctx.bits, 1), ctx)?;
        Ok(QTable {
            qn,
            q_infinity,
            q_infinity_tail,
        })
    }

    pub fn n_max(&self) -> u32 {
        self.qn.len() as u32 - 1
    }

    /// `Q_n`, exact.
    pub fn q(&self, n: u32) -> &Rational {
        &self.qn[n as usize]
    }

    pub fn qn(&self) -> &[Rational] {
        &self.qn
    }

    /// `Q_inf = Q(1)`.
    pub fn q_infinity(&self) -> &Float {
        &self.q_infinity
    }

    /// Certified relative truncation error of [`QTable::q_infinity`].
    pub fn q_infinity_tail(&self) -> f64 {
        self.q_infinity_tail
    }
}

/// `1/Q_j` for `j = 0..=n_max` and `Q_inf`, as floats at `bits` of precision.
///
/// Relative error of each entry is below `2^(8 - bits)`.
#[derive(Debug, Clone)]
pub(crate) struct QFloats {
    pub inv_q: Vec<Float>,
    pub q_inf: Float,
}

impl QFloats {
    pub fn new(bits: u32, n_max: usize) -> Self {
        let wp = bits + 16;
        let mut q = Vec::with_capacity(n_max + 1);
        let mut acc = Float::with_val(wp, 1);
        q.push(acc.clone());
        for l in 1..=n_max {
            let f = Float::with_val(wp, 1) - (Float::with_val(wp, 1) >> l as u32);
            acc *= f;
            q.push(acc.clone());
        }
        // Tail of prod_{l > L} (1 - 2^-l) is below 2^(1 - L) in log.
        let mut q_inf = acc.clone();
        for l in (n_max + 1)..=(wp as usize + 8) {
            let f = Float::with_val(wp, 1) - (Float::with_val(wp, 1) >> l as u32);
            q_inf *= f;
        }
        let inv_q = q.iter().map(|x| Float::with_val(wp, 1) / x).collect();
        let round = |v: Vec<Float>| v.into_iter().map(|x| Float::with_val(bits, x)).collect();
        QFloats {
            inv_q: round(inv_q),
            q_inf: Float::with_val(bits, q_inf),
        }
    }
}

/// Number of factors `L` such that `2^-L |z| < tol / 4` and `2^-L |z| < 1/2`.
fn truncation_index(log2_z: f64, tol: f64) -> u32 {
    let target = (tol / 4.0).log2().min(-1.0);
    let l = (log2_z - target).ceil();
    l.max(1.0) as u32 + 1
}

/// `Q(z)` for complex `z`, truncated once the multiplicative tail is below
/// `series_tol`; the result carries relative error at most `series_tol`.
pub fn q_product(z: &Complex, ctx: &PrecisionContext) -> Result<Complex> {
    ctx.refine(|c| Ok(q_product_fixed(z, c).0))
}

/// `Q(x)` for real `x`.
pub fn q_product_real(x: &Float, ctx: &PrecisionContext) -> Result<Float> {
    ctx.refine(|c| Ok(q_product_real_fixed(x, c).0))
}

fn q_product_real_with_tail(x: &Float, ctx: &PrecisionContext) -> Result<(Float, f64)> {
    let (v, tail) = q_product_real_fixed(x, ctx);
    let v = ctx.refine(|c| Ok(q_product_real_fixed(x, c).0)).unwrap_or(v);
    Ok((v, tail))
}

/// Returns the truncated product and the bound `2^(1-L)|z|` on the log of
/// the dropped tail.
fn q_product_fixed(z: &Complex, ctx: &PrecisionContext) -> (Complex, f64) {
    let log2_z = log2_abs_c(z);
    if log2_z == f64::NEG_INFINITY {
        return (Complex::with_val(ctx.bits, (1, 0)), 0.0);
    }
    let l_max = truncation_index(log2_z, ctx.series_tol);
    let wp = ctx.bits + GUARD_BITS + 32 - l_max.leading_zeros();
    let mut acc = Complex::with_val(wp, (1, 0));
    for l in 1..=l_max {
        let w = Complex::with_val(wp, z) >> l;
        let factor = Complex::with_val(wp, 1 - w);
        acc *= factor;
    }
    let tail = (1.0 - l_max as f64 + log2_z).exp2();
    (Complex::with_val(ctx.bits, acc), tail)
}

fn q_product_real_fixed(x: &Float, ctx: &PrecisionContext) -> (Float, f64) {
    let log2_x = log2_abs(x);
    if log2_x == f64::NEG_INFINITY {
        return (Float::with_val(ctx.bits, 1), 0.0);
    }
    let l_max = truncation_index(log2_x, ctx.series_tol);
    let wp = ctx.bits + GUARD_BITS + 32 - l_max.leading_zeros();
    let mut acc = Float::with_val(wp, 1);
    for l in 1..=l_max {
        let w = Float::with_val(wp, x) >> l;
        acc *= Float::with_val(wp, 1 - w);
    }
    let tail = (1.0 - l_max as f64 + log2_x).exp2();
    (Float::with_val(ctx.bits, acc), tail)
}

/// `log Q(-2s) = sum_{j>=0} log(1 + 2^-j s)` summed directly with principal
/// logarithms.
pub fn q_log_direct(s: &Complex, ctx: &PrecisionContext) -> Result<Complex> {
    check_off_cut(s)?;
    ctx.refine(|c| Ok(log_one_plus_scaled_sum(s, 0, c)))
}

/// `sum_{j >= j0} log(1 + 2^-j w)`, truncated where `2^(1-j)|w| < tol/4`
/// (valid since `|log(1+u)| <= 2|u|` once `|u| <= 1/2`).
fn log_one_plus_scaled_sum(w: &Complex, j0: u32, ctx: &PrecisionContext) -> Complex {
    let log2_w = log2_abs_c(w);
    if log2_w == f64::NEG_INFINITY {
        return Complex::with_val(ctx.bits, (0, 0));
    }
    let l_max = truncation_index(log2_w, ctx.series_tol).max(j0);
    let wp = ctx.bits + GUARD_BITS + 32 - l_max.leading_zeros();
    let mut acc = Complex::with_val(wp, (0, 0));
    for j in j0..=l_max {
        let u = Complex::with_val(wp, w) >> j;
        acc += Complex::with_val(wp, 1 + u).ln();
    }
    Complex::with_val(ctx.bits, acc)
}

fn check_off_cut(s: &Complex) -> Result<()> {
    if s.imag().is_zero() && *s.real() <= 0 {
        return Err(Error::domain(format!(
            "s = {} lies on the branch cut (-inf, 0]",
            s.real().to_f64()
        )));
    }
    if !s.real().is_finite() || !s.imag().is_finite() {
        return Err(Error::domain("s must be finite"));
    }
    Ok(())
}

/// `log Q(-2s)` through the exact reflection identity, for `|arg s| <= pi - 0.1`.
pub fn q_log_asymptotic(s: &Complex, ctx: &PrecisionContext) -> Result<Complex> {
    q_log_asymptotic_in_sector(s, DEFAULT_SECTOR_EPS, ctx)
}

/// As [`q_log_asymptotic`] with an explicit sector half-angle `eps`.
pub fn q_log_asymptotic_in_sector(s: &Complex, eps: f64, ctx: &PrecisionContext) -> Result<Complex> {
    check_off_cut(s)?;
    if !(eps > 0.0 && eps < PI) {
        return Err(Error::domain(format!("sector half-angle {eps} outside (0, pi)")));
    }
    let arg = Float::with_val(64, s.arg_ref()).to_f64();
    if arg.abs() > PI - eps {
        return Err(Error::domain(format!(
            "|arg s| = {:.6} exceeds pi - eps = {:.6}",
            arg.abs(),
            PI - eps
        )));
    }
    ctx.refine(|c| {
        let parts = reflection_parts(s, c)?;
        Ok(parts.total(c.bits))
    })
}

/// The four pieces of the reflection identity for `log Q(-2s)`.
pub(crate) struct ReflectionParts {
    pub quadratic: Complex,
    pub half_log: Complex,
    pub periodic: Complex,
    pub remainder: Complex,
}

impl ReflectionParts {
    fn total(&self, bits: u32) -> Complex {
        let mut t = Complex::with_val(bits + GUARD_BITS, &self.quadratic);
        t += &self.half_log;
        t += &self.periodic;
        t += &self.remainder;
        Complex::with_val(bits, t)
    }
}

pub(crate) fn reflection_parts(s: &Complex, ctx: &PrecisionContext) -> Result<ReflectionParts> {
    let log2_s = log2_abs_c(s).abs();
    let wp = ctx.bits + GUARD_BITS + (2.0 * log2_s.max(1.0).log2()).ceil() as u32;
    let ln2 = Float::with_val(wp, Constant::Log2);
    let log_s = Complex::with_val(wp, s.ln_ref());
    let mut quadratic = Complex::with_val(wp, log_s.square_ref());
    quadratic /= Float::with_val(wp, &ln2 * 2u32);
    let half_log = Complex::with_val(wp, &log_s / 2u32);
    let t = Complex::with_val(wp, &log_s / &ln2);
    let inner = ctx.with_bits(wp).with_tol(ctx.series_tol / 4.0);
    let (periodic, _) = periodic_fluctuation(&t, &inner)?;
    let inv_s = Complex::with_val(wp, s.recip_ref());
    let remainder = -log_one_plus_scaled_sum(&inv_s, 1, &inner);
    Ok(ReflectionParts {
        quadratic,
        half_log,
        periodic,
        remainder,
    })
}

/// `2 pi^2 / log 2`, the decay rate of the Fourier coefficients of `P`.
pub(crate) const P_DECAY: f64 = 2.0 * PI * PI / LN_2;

/// The 1-periodic function
/// `P(u) = log2/12 + pi^2/(6 log 2) - sum_{j>=1} cos(2 j pi u) / (j sinh(2 j pi^2/log 2))`
/// for complex `u` with `|Im u| < pi / log 2`.
///
/// Returns the value and a bound on the dropped Fourier tail. The real part
/// of `u` is reduced modulo 1 before evaluation, so `P(u + 1)` and `P(u)` are
/// computed from identical inputs.
pub(crate) fn periodic_fluctuation(u: &Complex, ctx: &PrecisionContext) -> Result<(Complex, f64)> {
    let im = Float::with_val(64, u.imag()).to_f64().abs();
    let rate = P_DECAY - 2.0 * PI * im;
    if !(rate > 0.0) {
        return Err(Error::domain(format!(
            "|Im u| = {im} outside the strip of convergence of P"
        )));
    }
    // |cos(2 j pi u)| / (j sinh(j c)) <= (2 + 1e-9) e^{-j rate} / j
    let c0 = 2.0 + 1e-9;
    let geometric = 1.0 / (1.0 - (-rate).exp());
    let tail_after = |j: u32| c0 * (-(j as f64 + 1.0) * rate).exp() * geometric;
    let mut terms = ((ctx.bits as f64 * LN_2) / 28.5).ceil() as u32 + 2;
    if im > 0.0 {
        terms = 1;
    }
    while tail_after(terms) > ctx.series_tol / 4.0 {
        terms += 1;
    }
    let wp = ctx.bits + GUARD_BITS + (2.0 * PI * im * terms as f64 / LN_2).ceil() as u32;

    let mut reduced = Complex::with_val(wp, u);
    let frac = Float::with_val(wp, reduced.real().fract_ref());
    *reduced.mut_real() = frac;

    let pi = Float::with_val(wp, Constant::Pi);
    let ln2 = Float::with_val(wp, Constant::Log2);
    let decay = Float::with_val(wp, pi.square_ref()) * 2u32 / &ln2;
    let mut sum = Complex::with_val(wp, (0, 0));
    let two_pi_u = Complex::with_val(wp, &reduced * Float::with_val(wp, &pi * 2u32));
    for j in 1..=terms {
        let arg = Complex::with_val(wp, &two_pi_u * j);
        let cos = arg.cos();
        let denom = Float::with_val(wp, &decay * j).sinh() * j;
        sum += cos / denom;
    }
    let mut value = Complex::with_val(wp, (Float::with_val(wp, &ln2 / 12u32), 0));
    *value.mut_real() += Float::with_val(wp, pi.square_ref()) / (ln2 * 6u32);
    value -= sum;
    Ok((Complex::with_val(ctx.bits, value), tail_after(terms)))
}

/// Constant term `log2/12 + pi^2/(6 log 2)` of `P`.
pub fn periodic_mean(bits: u32) -> Float {
    let pi = Float::with_val(bits + 8, Constant::Pi);
    let ln2 = Float::with_val(bits + 8, Constant::Log2);
    let mut m = Float::with_val(bits + 8, &ln2 / 12u32);
    m += Float::with_val(bits + 8, pi.square_ref()) / (ln2 * 6u32);
    Float::with_val(bits, m)
}

/// Partial Euler series `sum_{j<=J} (-1)^j 2^-C(j,2) z^j / Q_j` for `prod_{l>=0} (1 - 2^-l z)`.
pub fn euler_partial_sum(z: &Complex, terms: u32, bits: u32) -> Complex {
    let qf = QFloats::new(bits, terms as usize);
    let mut acc = Complex::with_val(bits + GUARD_BITS, (0, 0));
    let mut zj = Complex::with_val(bits + GUARD_BITS, (1, 0));
    for j in 0..=terms {
        let c2 = (j as i64) * (j as i64 - 1) / 2;
        let mut t = Complex::with_val(bits + GUARD_BITS, &zj * &qf.inv_q[j as usize]);
        t >>= c2 as u32;
        if j % 2 == 1 {
            acc -= t;
        } else {
            acc += t;
        }
        zj *= z;
    }
    Complex::with_val(bits, acc)
}

/// Bound on the tail `sum_{j>J}` of the Euler series at `|z|`.
pub fn euler_tail_bound(abs_z: f64, terms: u32) -> f64 {
    let q_inf = 0.288_788_095_086_602_4_f64;
    let mut total = 0.0;
    let mut j = terms as f64 + 1.0;
    loop {
        let t = (-(j * (j - 1.0) / 2.0) * LN_2 + j * abs_z.max(1e-300).ln()).exp() / q_inf;
        total += t;
        if t < total * 1e-18 || t == 0.0 {
            break;
        }
        j += 1.0;
        if j > terms as f64 + 4096.0 {
            break;
        }
    }
    total * 2.0
}
