//! Limit functions of the mean and variance profiles.
//!
//! ```text
//! F(z)   = sum_j (-1)^j 2^-C(j,2) e^{-2^j z} / (Q_j Q_inf)
//! F_I(x) = 1 - sum_j (-1)^j 2^-C(j+1,2) e^{-2^j x} / (Q_j Q_inf)
//! G(x)   = sum_{j,r>=0} sum_{h,l<=j} (-1)^{r+h+l} 2^{-j-C(r,2)-C(h,2)-C(l,2)+2h+2l}
//!          / (Q_inf Q_r Q_h Q_{j-h} Q_l Q_{j-l}) phi(2^{r+j}, 2^h+2^l; x)
//! ```
//!
//! `G_I` replaces `2h+2l` by `h+l`. Every evaluator returns a certified bound
//! on the mass it dropped.

use std::f64::consts::LN_2;

use rug::{Assign, Complex, Float};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::{log2_abs, PrecisionContext, Refinable, GUARD_BITS};
use crate::qseries::{periodic_fluctuation, QFloats};

/// log2(1 / Q_inf).
pub(crate) const LOG2_INV_Q_INF: f64 = 1.791_916_824_159_612_4;
const LOG2_E: f64 = std::f64::consts::LOG2_E;

/// How a series was cut off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailStrategy {
    /// Single sum whose term bounds shrink at least geometrically after the cut.
    GeometricCoefficient,
    /// Fourier series with exponentially decaying coefficients.
    FourierGeometric,
    /// Quadruple sum cut to a box in `(j, r, h, l)` with small terms skipped;
    /// the bound covers the box complement and every skipped term.
    PrunedBox { r_max: u32, h_max: u32, skipped: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesTruncation {
    /// Largest outer index summed.
    pub max_index: u32,
    pub strategy: TailStrategy,
}

/// A limit-function value with its certified truncation error.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitFnValue<T = Float> {
    pub value: T,
    /// Absolute bound on the dropped series mass.
    pub tail_bound: f64,
    pub terms_used: u64,
    pub truncation: SeriesTruncation,
}

impl<T: Refinable> Refinable for LimitFnValue<T> {
    fn distance(&self, other: &Self) -> f64 {
        self.value.distance(&other.value)
    }
}

impl LimitFnValue<Complex> {
    /// Real part, for evaluations on the real axis.
    pub fn into_real(self) -> LimitFnValue<Float> {
        LimitFnValue {
            value: self.value.into_real_imag().0,
            tail_bound: self.tail_bound,
            terms_used: self.terms_used,
            truncation: self.truncation,
        }
    }
}

impl LimitFnValue<Float> {
    pub fn to_f64(&self) -> f64 {
        self.value.to_f64()
    }
}

/// Which of the limit functions to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitFn {
    F,
    FI,
    G,
    GI,
    P,
}

impl std::str::FromStr for LimitFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(LimitFn::F),
            "FI" => Ok(LimitFn::FI),
            "G" => Ok(LimitFn::G),
            "GI" => Ok(LimitFn::GI),
            "P" => Ok(LimitFn::P),
            other => Err(Error::domain(format!("unknown limit function {other:?}"))),
        }
    }
}

/// Evaluates `which` at real `x`; `deriv` applies to `F` only.
pub fn eval_limit_fn(which: LimitFn, x: &Float, deriv: u32, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    if deriv > 0 && which != LimitFn::F {
        return Err(Error::domain("derivatives are available for F only"));
    }
    match which {
        LimitFn::F => f_eval_real(x, deriv, ctx),
        LimitFn::FI => f_i_eval(x, ctx),
        LimitFn::G => g_eval(x, ctx),
        LimitFn::GI => g_i_eval(x, ctx),
        LimitFn::P => p_eval(x, ctx),
    }
}

fn check_real_arg(x: &Float) -> Result<()> {
    if !x.is_finite() || *x < 0 {
        return Err(Error::domain(format!("argument must be finite and >= 0, got {}", x.to_f64())));
    }
    Ok(())
}

fn c2(j: u32) -> u64 {
    j as u64 * (j as u64).saturating_sub(1) / 2
}

/// Signed power of two as a float.
fn pow2(bits: u32, e: i64) -> Float {
    let one = Float::with_val(bits, 1);
    if e >= 0 {
        one << e as u32
    } else {
        one >> (-e) as u32
    }
}

// ---------------------------------------------------------------------------
// F and F_I

#[derive(Clone, Copy)]
enum FKind {
    /// `F^{(m)}`.
    Mean(u32),
    /// The sum in `F_I`.
    Internal,
}

impl FKind {
    /// log2 of the coefficient magnitude of term `j` without the `1/(Q_j Q_inf)`.
    fn log2_coef(self, j: u32) -> f64 {
        match self {
            FKind::Mean(m) => -(c2(j) as f64) + (j as f64) * m as f64,
            FKind::Internal => -(c2(j + 1) as f64),
        }
    }

    /// Index after which successive term bounds at least halve.
    fn halving_from(self) -> u32 {
        match self {
            FKind::Mean(m) => m + 1,
            FKind::Internal => 0,
        }
    }
}

/// Truncation for a single exponential sum at `Re z = xr`: returns the last
/// index summed, the tail bound and log2 of the largest term bound.
fn f_plan(kind: FKind, xr: f64, tol: f64) -> (u32, f64, f64) {
    let log2_bound = |j: u32| {
        kind.log2_coef(j) - (j as f64).exp2() * xr * LOG2_E + 2.0 * LOG2_INV_Q_INF
    };
    let target = (tol / 2.0).log2();
    let mut j = kind.halving_from();
    let mut max_term = f64::NEG_INFINITY;
    for i in 0..=j {
        max_term = max_term.max(log2_bound(i));
    }
    // From `halving_from` on, the ratio of consecutive term bounds is at most
    // 2^(m-j) e^{-2^j xr} <= 1/2, so the tail after j is at most twice term j+1.
    while 1.0 + log2_bound(j + 1) > target {
        j += 1;
        max_term = max_term.max(log2_bound(j));
    }
    (j, (1.0 + log2_bound(j + 1)).exp2(), max_term)
}

fn f_sum_fixed(z: &Complex, kind: FKind, ctx: &PrecisionContext) -> LimitFnValue<Complex> {
    let xr = z.real().to_f64();
    let (last, tail, max_term) = f_plan(kind, xr, ctx.series_tol);
    let wp = ctx.working_bits(max_term, last as usize + 1);
    let qf = QFloats::new(wp, last as usize);
    let mut acc = Complex::with_val(wp, (0, 0));
    let mut t = Complex::new(wp);
    for j in 0..=last {
        let scaled = Complex::with_val(wp, z << j);
        t.assign(-scaled);
        t.exp_mut();
        t *= &qf.inv_q[j as usize];
        let sign_neg = match kind {
            FKind::Mean(m) => {
                // (-1)^j (-2^j)^m
                t <<= j * m;
                (j + m) % 2 == 1
            }
            FKind::Internal => j % 2 == 1,
        };
        let shift = match kind {
            FKind::Mean(_) => c2(j),
            FKind::Internal => c2(j + 1),
        };
        t >>= shift as u32;
        if sign_neg {
            acc -= &t;
        } else {
            acc += &t;
        }
    }
    acc /= &qf.q_inf;
    if let FKind::Internal = kind {
        acc = Complex::with_val(wp, 1 - acc);
    }
    LimitFnValue {
        value: Complex::with_val(ctx.bits, acc),
        tail_bound: tail,
        terms_used: last as u64 + 1,
        truncation: SeriesTruncation {
            max_index: last,
            strategy: TailStrategy::GeometricCoefficient,
        },
    }
}

/// `F^{(m)}(z)` for `Re z >= 0`.
pub fn f_eval(z: &Complex, m: u32, ctx: &PrecisionContext) -> Result<LimitFnValue<Complex>> {
    if !z.real().is_finite() || !z.imag().is_finite() || *z.real() < 0 {
        return Err(Error::domain("F requires finite z with Re z >= 0"));
    }
    ctx.refine(|c| Ok(f_sum_fixed(z, FKind::Mean(m), c)))
}

/// `F^{(m)}(x)` on the real axis.
pub fn f_eval_real(x: &Float, m: u32, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    check_real_arg(x)?;
    let z = Complex::with_val(x.prec(), (x, 0));
    f_eval(&z, m, ctx).map(LimitFnValue::into_real)
}

/// `F_I(x)`, the antiderivative of `F` vanishing at 0.
pub fn f_i_eval(x: &Float, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    check_real_arg(x)?;
    let z = Complex::with_val(x.prec(), (x, 0));
    ctx.refine(|c| Ok(f_sum_fixed(&z, FKind::Internal, c).into_real()))
}

// ---------------------------------------------------------------------------
// phi

/// `phi(u, v; x) = int_0^x t e^{-v t - u (x - t)} dt`, i.e.
/// `(e^{-ux} + ((u-v)x - 1) e^{-vx}) / (u-v)^2`, or `x^2 e^{-ux} / 2` when
/// `u = v` exactly. Returned at the largest input precision.
pub fn phi_eval(u: &Float, v: &Float, x: &Float) -> Result<Float> {
    if !(u.is_finite() && v.is_finite() && x.is_finite()) || *u <= 0 || *v <= 0 || *x < 0 {
        return Err(Error::domain("phi requires u, v > 0 and x >= 0"));
    }
    let bits = u.prec().max(v.prec()).max(x.prec());
    if x.is_zero() {
        return Ok(Float::with_val(bits, 0));
    }
    if u == v {
        let mut r = Float::with_val(bits + 8, x.square_ref());
        r *= (-Float::with_val(bits + 8, u * x)).exp();
        r >>= 1;
        return Ok(Float::with_val(bits, r));
    }
    // The numerator loses about 2 log2(1/|d x|) bits when |d x| is small.
    let d_exact_bits = bits + u.get_exp().unwrap_or(0).max(v.get_exp().unwrap_or(0)).unsigned_abs() + 8;
    let d = Float::with_val(d_exact_bits, u - v);
    let dx = log2_abs(&d) + log2_abs(x);
    let extra = if dx < 0.0 { (-2.0 * dx).ceil() as u32 } else { 0 };
    let wp = d_exact_bits + extra + GUARD_BITS;
    Ok(Float::with_val(bits, phi_at(wp, u, v, &d, x)))
}

fn phi_at(wp: u32, u: &Float, v: &Float, d: &Float, x: &Float) -> Float {
    let eu = (-Float::with_val(wp, u * x)).exp();
    let ev = (-Float::with_val(wp, v * x)).exp();
    let mut num = Float::with_val(wp, d * x);
    num -= 1u32;
    num *= ev;
    num += eu;
    num / Float::with_val(wp, d.square_ref())
}

/// Upper bound for `log2 phi(u, v; x)`; `phi` is positive.
fn log2_phi_bound(log2_u: f64, log2_v: f64, x: f64) -> f64 {
    let lx = x.log2();
    let min_uv = log2_u.min(log2_v).exp2();
    let a = 2.0 * lx - 1.0 - min_uv * x * LOG2_E;
    let b = lx - log2_u;
    let c = -2.0 * log2_v;
    a.min(b).min(c)
}

// ---------------------------------------------------------------------------
// G and G_I

#[derive(Clone, Copy, PartialEq, Eq)]
enum GKind {
    External,
    Internal,
}

impl GKind {
    /// Exponent multiplier `s` in `2^{-C(h,2) + s h}`.
    fn s(self) -> i64 {
        match self {
            GKind::External => 2,
            GKind::Internal => 1,
        }
    }
}

/// `log2` of `2^{-C(h,2) + s h} / Q_inf^2`, the bound on the `h` factor.
fn log2_alpha(s: i64, h: u32) -> f64 {
    -(c2(h) as f64) + (s * h as i64) as f64 + 2.0 * LOG2_INV_Q_INF
}

/// `log2` of `2^{-C(r,2)} / Q_inf`.
fn log2_rho(r: u32) -> f64 {
    -(c2(r) as f64) + LOG2_INV_Q_INF
}

/// Sum of `2^{f(i)}` for `i >= from` where `f` eventually decreases
/// superlinearly; summed until terms are negligible.
fn tail_sum(from: u32, f: impl Fn(u32) -> f64) -> f64 {
    let mut total = 0.0;
    let mut i = from;
    loop {
        let t = f(i).exp2();
        total += t;
        if (t <= total * 1e-17 && i > from + 4) || i > from + 4000 {
            return total * (1.0 + 1e-12);
        }
        i += 1;
    }
}

struct GPlan {
    j_max: u32,
    r_max: u32,
    h_max: u32,
    outer_tail: f64,
}

/// Chooses the box so that each of the three complement pieces is below tol/8.
///
/// Outside the box at least one of `j, r, h, l` is positive, hence `u, v >= 2`
/// and `phi <= min(x / u, x^2 e^{-2x} / 2)`; in the `h > H` piece additionally
/// `u, v >= 2^{H+1}`.
fn g_plan(kind: GKind, x: f64, tol: f64) -> GPlan {
    let s = kind.s();
    let a_total = tail_sum(0, |h| log2_alpha(s, h));
    let s_w = tail_sum(0, |r| log2_rho(r) - r as f64); // sum rho(r) 2^-r
    let s_p = tail_sum(0, log2_rho);
    let inv_q = LOG2_INV_Q_INF.exp2();
    let target = tol / 8.0;
    let lin = x;
    let quad = |m: f64| x * x / 2.0 * (-m * x).exp();

    let piece_j = |j_max: u32| {
        let a = lin * (4.0 / 3.0) * 0.25f64.powi(j_max as i32 + 1) * s_w * a_total * a_total;
        let b = quad(2.0) * 2.0 * 0.5f64.powi(j_max as i32 + 1) * s_p * a_total * a_total;
        inv_q * a.min(b)
    };
    let piece_r = |r_max: u32| {
        let rest_w = tail_sum(r_max + 1, |r| log2_rho(r) - r as f64);
        let rest_p = tail_sum(r_max + 1, log2_rho);
        let a = lin * (4.0 / 3.0) * rest_w * a_total * a_total;
        let b = quad(2.0) * 2.0 * rest_p * a_total * a_total;
        inv_q * a.min(b)
    };
    let piece_h = |h_max: u32| {
        let t_alpha = tail_sum(h_max + 1, |h| log2_alpha(s, h));
        let a = lin * (4.0 / 3.0) * s_w * 2.0 * a_total * t_alpha;
        let b = quad((h_max as f64 + 1.0).exp2()) * 2.0 * s_p * 2.0 * a_total * t_alpha;
        inv_q * a.min(b)
    };
    let mut j_max = 1;
    while piece_j(j_max) > target {
        j_max += 1;
    }
    let mut r_max = 1;
    while piece_r(r_max) > target {
        r_max += 1;
    }
    let mut h_max = 1;
    while piece_h(h_max) > target {
        h_max += 1;
    }
    GPlan {
        j_max,
        r_max,
        h_max,
        outer_tail: piece_j(j_max) + piece_r(r_max) + piece_h(h_max),
    }
}

struct GTerm {
    j: u32,
    r: u32,
    h: u32,
    l: u32,
    /// 2 when `h < l` (the mirrored term is folded in), else 1.
    mult: u32,
}

fn g_sum_fixed(x: &Float, kind: GKind, ctx: &PrecisionContext) -> LimitFnValue {
    let xf = x.to_f64();
    if x.is_zero() {
        return LimitFnValue {
            value: Float::with_val(ctx.bits, 0),
            tail_bound: 0.0,
            terms_used: 0,
            truncation: SeriesTruncation {
                max_index: 0,
                strategy: TailStrategy::PrunedBox {
                    r_max: 0,
                    h_max: 0,
                    skipped: 0,
                },
            },
        };
    }
    let s = kind.s();
    let plan = g_plan(kind, xf, ctx.series_tol);
    let qf64: Vec<f64> = {
        let mut q = vec![1.0f64];
        for l in 1..=(plan.j_max.max(plan.r_max) as usize) {
            let prev = q[l - 1];
            q.push(prev * (1.0 - 0.5f64.powi(l as i32)));
        }
        q.iter().map(|v| -v.log2()).collect()
    };

    // Pass 1: term bounds, pruning.
    let mut threshold = (ctx.series_tol.log2() - 30.0).min(-60.0);
    let (terms, skipped_mass, skipped, max_log2) = loop {
        let mut terms = Vec::new();
        let mut skipped_mass = 0.0f64;
        let mut skipped = 0u64;
        let mut max_log2 = f64::NEG_INFINITY;
        for j in 0..=plan.j_max {
            let hl = j.min(plan.h_max);
            for r in 0..=plan.r_max {
                let log2_u = (r + j) as f64;
                let base = -(j as f64) - c2(r) as f64 + qf64[r as usize] + LOG2_INV_Q_INF;
                for h in 0..=hl {
                    let ah = -(c2(h) as f64) + (s * h as i64) as f64 + qf64[h as usize] + qf64[(j - h) as usize];
                    for l in h..=hl {
                        // u = v only for h = l with r + j = h + 1; those terms cancel in pairs.
                        if h == l && r + j == h + 1 {
                            continue;
                        }
                        let al = -(c2(l) as f64) + (s * l as i64) as f64 + qf64[l as usize] + qf64[(j - l) as usize];
                        let log2_v = ((h as f64).exp2() + (l as f64).exp2()).log2();
                        let mult = if h < l { 2 } else { 1 };
                        let b = base + ah + al + (mult as f64).log2() + log2_phi_bound(log2_u, log2_v, xf);
                        if b < threshold {
                            skipped_mass += b.exp2();
                            skipped += 1;
                        } else {
                            max_log2 = max_log2.max(b);
                            terms.push(GTerm { j, r, h, l, mult });
                        }
                    }
                }
            }
        }
        if skipped_mass <= ctx.series_tol / 4.0 {
            break (terms, skipped_mass, skipped, max_log2);
        }
        threshold -= 20.0;
    };

    // Pass 2: evaluation. Each phi loses up to 2 log2(1/x) bits to cancellation.
    let extra = if xf < 1.0 { (-2.0 * xf.log2()).ceil() as u32 + 8 } else { 8 };
    let m_max = plan.j_max + plan.r_max + 1;
    let wp = ctx.working_bits(max_log2, terms.len().max(1)) + extra + m_max;
    let qf = QFloats::new(wp, plan.j_max.max(plan.r_max) as usize);
    let xw = Float::with_val(wp, x);
    let e: Vec<Float> = (0..=m_max)
        .map(|m| Float::with_val(wp, -Float::with_val(wp, &xw << m)).exp())
        .collect();
    let mut acc = Float::with_val(wp, 0);
    let mut coef = Float::new(wp);
    let mut ev = Float::new(wp);
    let mut num = Float::new(wp);
    let mut d = Float::new(wp);
    let mut d2 = Float::new(wp);
    for t in &terms {
        let (j, r, h, l) = (t.j, t.r, t.h, t.l);
        coef.assign(&qf.inv_q[r as usize] * &qf.inv_q[h as usize]);
        coef *= &qf.inv_q[(j - h) as usize];
        coef *= &qf.inv_q[l as usize];
        coef *= &qf.inv_q[(j - l) as usize];
        let e2 = -(j as i64) - c2(r) as i64 - c2(h) as i64 - c2(l) as i64 + s * (h + l) as i64;
        if e2 >= 0 {
            coef <<= e2 as u32;
        } else {
            coef >>= (-e2) as u32;
        }
        if t.mult == 2 {
            coef <<= 1u32;
        }
        // phi(2^{r+j}, 2^h + 2^l; x)
        d.assign(pow2(wp, (r + j) as i64));
        d -= pow2(wp, h as i64);
        d -= pow2(wp, l as i64);
        ev.assign(&e[h as usize] * &e[l as usize]);
        num.assign(&d * &xw);
        num -= 1u32;
        num *= &ev;
        num += &e[(r + j) as usize];
        d2.assign(d.square_ref());
        num /= &d2;
        num *= &coef;
        if (r + h + l) % 2 == 1 {
            acc -= &num;
        } else {
            acc += &num;
        }
    }
    acc /= &qf.q_inf;
    LimitFnValue {
        value: Float::with_val(ctx.bits, acc),
        tail_bound: plan.outer_tail + skipped_mass,
        terms_used: terms.len() as u64,
        truncation: SeriesTruncation {
            max_index: plan.j_max,
            strategy: TailStrategy::PrunedBox {
                r_max: plan.r_max,
                h_max: plan.h_max,
                skipped,
            },
        },
    }
}

/// `G(x)`, the variance limit function.
pub fn g_eval(x: &Float, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    check_real_arg(x)?;
    ctx.refine(|c| Ok(g_sum_fixed(x, GKind::External, c)))
}

/// `G_I(x)`, the internal-profile variance limit function.
pub fn g_i_eval(x: &Float, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    check_real_arg(x)?;
    ctx.refine(|c| Ok(g_sum_fixed(x, GKind::Internal, c)))
}

// ---------------------------------------------------------------------------
// P

/// The 1-periodic fluctuation
/// `P(t) = log 2/12 + pi^2/(6 log 2) - sum_{j>=1} cos(2 j pi t) / (j sinh(2 j pi^2 / log 2))`.
pub fn p_eval(t: &Float, ctx: &PrecisionContext) -> Result<LimitFnValue> {
    if !t.is_finite() {
        return Err(Error::domain("P requires a finite argument"));
    }
    ctx.refine(|c| {
        let u = Complex::with_val(c.bits.max(t.prec()), (t, 0));
        let (v, tail) = periodic_fluctuation(&u, c)?;
        let terms = fourier_terms(c);
        Ok(LimitFnValue {
            value: v.into_real_imag().0,
            tail_bound: tail,
            terms_used: terms as u64,
            truncation: SeriesTruncation {
                max_index: terms,
                strategy: TailStrategy::FourierGeometric,
            },
        })
    })
}

/// Number of Fourier terms used at this context: `ceil(p log 2 / 28.5) + 2`,
/// raised if needed to meet the tolerance.
pub(crate) fn fourier_terms(ctx: &PrecisionContext) -> u32 {
    let rate = crate::qseries::P_DECAY;
    let geometric = 1.0 / (1.0 - (-rate).exp());
    let mut terms = ((ctx.bits as f64 * LN_2) / 28.5).ceil() as u32 + 2;
    while (2.0 + 1e-9) * (-(terms as f64 + 1.0) * rate).exp() * geometric > ctx.series_tol / 4.0 {
        terms += 1;
    }
    terms
}
