//! Exact finite-n moments of the external and internal profiles.
//!
//! Recurrences (`n >= 1`, `k >= 1`):
//!
//! ```text
//! mu_{n,k} = 2^{2-n} sum_j C(n-1,j) mu_{j,k-1}
//! nu_{n,k} = 2^{2-n} sum_j C(n-1,j) (nu_{j,k-1} + mu_{j,k-1} mu_{n-1-j,k-1})
//! ```
//!
//! with `mu_{0,0} = 1`, `mu_{n,0} = 0` for the external profile and
//! `mu_{n,0} = 1` (`n >= 1`), `mu_{0,k} = 0` for the internal one. The closed
//! forms below are checked against these tables in the tests.

use std::collections::HashMap;

use rug::ops::Pow;
use rug::{Complex, Float, Integer, Rational};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::{log2_abs, log2_abs_c, PrecisionContext, GUARD_BITS};
use crate::qseries::{q_finite, QFloats};

/// Largest `n` for exact-rational mean tables.
pub const MU_TABLE_CAP: u64 = 200;
/// Largest `n` for exact-rational second-moment tables.
pub const NU_TABLE_CAP: u64 = 64;
/// Largest `n` for the exact-rational closed forms.
pub const EXACT_CLOSED_CAP: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    External,
    Internal,
}

/// Triangular tables of exact first and second moments.
///
/// `mu[n][k]` is stored for `k <= n` (every moment vanishes beyond). `nu` and
/// `var` are present only when `n_max <= NU_TABLE_CAP`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub kind: ProfileKind,
    pub n_max: u64,
    pub mu: Vec<Vec<Rational>>,
    pub nu: Option<Vec<Vec<Rational>>>,
    pub var: Option<Vec<Vec<Rational>>>,
}

impl MomentTable {
    pub fn mu(&self, n: u64, k: u64) -> Rational {
        self.mu
            .get(n as usize)
            .and_then(|row| row.get(k as usize))
            .cloned()
            .unwrap_or_default()
    }

    pub fn nu(&self, n: u64, k: u64) -> Option<Rational> {
        let t = self.nu.as_ref()?;
        Some(t.get(n as usize)?.get(k as usize).cloned().unwrap_or_default())
    }

    pub fn var(&self, n: u64, k: u64) -> Option<Rational> {
        let t = self.var.as_ref()?;
        Some(t.get(n as usize)?.get(k as usize).cloned().unwrap_or_default())
    }
}

fn binomial_row(m: u64) -> Vec<Integer> {
    (0..=m).map(|j| Integer::from(m).binomial(j as u32)).collect()
}

/// Builds the tables by the recurrences. `n_max` is capped at
/// [`MU_TABLE_CAP`]; second moments are included up to [`NU_TABLE_CAP`].
pub fn recurrence_tables(kind: ProfileKind, n_max: u64) -> Result<MomentTable> {
    if n_max > MU_TABLE_CAP {
        return Err(Error::CapExceeded {
            what: "exact mean table",
            n: n_max,
            cap: MU_TABLE_CAP,
        });
    }
    let with_nu = n_max <= NU_TABLE_CAP;
    let nm = n_max as usize;
    let mut mu: Vec<Vec<Rational>> = Vec::with_capacity(nm + 1);
    let mut nu: Vec<Vec<Rational>> = Vec::new();
    for n in 0..=nm {
        let mut row_mu = vec![Rational::new(); n + 1];
        let mut row_nu = vec![Rational::new(); if with_nu { n + 1 } else { 0 }];
        let boundary = match (kind, n) {
            (_, 0) => kind == ProfileKind::External,
            (ProfileKind::External, _) => false,
            (ProfileKind::Internal, _) => true,
        };
        if boundary {
            row_mu[0] = Rational::from(1);
            if with_nu {
                row_nu[0] = Rational::from(1);
            }
        }
        if n >= 1 {
            let binom = binomial_row(n as u64 - 1);
            for k in 1..=n {
                let mut s = Rational::new();
                let mut c = Rational::new();
                // mu_{j,k-1} vanishes for j < k-1.
                for j in (k - 1)..n {
                    let m_j = &mu[j][k - 1];
                    if *m_j == 0 {
                        continue;
                    }
                    s += Rational::from(m_j * &binom[j]);
                    if with_nu {
                        s_nu_add(&mut c, &binom[j], &nu[j][k - 1], m_j, mu[n - 1 - j].get(k - 1));
                    }
                }
                // The cross term and nu_{n-1-j} appear symmetrically; only j >= k-1 terms are nonzero.
                row_mu[k] = s >> (n as i32 - 2);
                if with_nu {
                    row_nu[k] = c >> (n as i32 - 2);
                }
            }
        }
        mu.push(row_mu);
        if with_nu {
            nu.push(row_nu);
        }
    }
    let (nu, var) = if with_nu {
        let var = mu
            .iter()
            .zip(&nu)
            .map(|(m, v)| m.iter().zip(v).map(|(m, v)| Rational::from(v - m.clone().square())).collect())
            .collect();
        (Some(nu), Some(var))
    } else {
        (None, None)
    };
    Ok(MomentTable {
        kind,
        n_max,
        mu,
        nu,
        var,
    })
}

/// Adds `C (nu_{j,k-1} + mu_{j,k-1} mu_{n-1-j,k-1})` to `acc`.
fn s_nu_add(acc: &mut Rational, binom: &Integer, nu_j: &Rational, mu_j: &Rational, mu_other: Option<&Rational>) {
    let mut t = nu_j.clone();
    if let Some(o) = mu_other {
        t += Rational::from(mu_j * o);
    }
    *acc += t * binom;
}

// ---------------------------------------------------------------------------
// Sums with cancellation control

/// Evaluates an alternating sum at increasing precision until the working
/// precision covers the observed cancellation `log2(max term / |sum|)`.
///
/// `eval(wp)` returns the sum and log2 of its largest term. With
/// `Accuracy::Absolute` cancellation is credited only down to the tolerance
/// level, so sums that may vanish exactly are certified in absolute terms;
/// `Accuracy::Relative` keeps `ctx.bits` significant bits of nonzero sums.
fn cancelling_sum<T, F>(ctx: &PrecisionContext, terms: usize, acc: Accuracy, mut eval: F) -> Result<T>
where
    F: FnMut(u32) -> Result<(T, f64)>,
    T: Magnitude,
{
    let base = ctx.bits + GUARD_BITS + (terms.max(1) as f64).log2().ceil() as u32;
    let mut wp = base;
    for _ in 0..=crate::precision::MAX_DOUBLINGS {
        let (s, lmax) = eval(wp)?;
        let ls = s.log2_mag();
        let cap = (lmax - ctx.log2_tol()).max(0.0)
            + match acc {
                Accuracy::Absolute => 0.0,
                Accuracy::Relative => RELATIVE_EXTRA_BITS,
            };
        let cancel = if ls.is_finite() { (lmax - ls).clamp(0.0, cap) } else { cap };
        let need = base + cancel.ceil() as u32;
        if wp >= need {
            return Ok(s);
        }
        wp = need.max(wp + 32);
    }
    Err(Error::PrecisionExhausted {
        doublings: crate::precision::MAX_DOUBLINGS,
        bits: wp,
    })
}

#[derive(Clone, Copy)]
enum Accuracy {
    Absolute,
    Relative,
}

/// How far below the tolerance level a relative-accuracy sum may chase its value.
const RELATIVE_EXTRA_BITS: f64 = 8192.0;

trait Magnitude {
    fn log2_mag(&self) -> f64;
}

impl Magnitude for Float {
    fn log2_mag(&self) -> f64 {
        log2_abs(self)
    }
}

impl Magnitude for Complex {
    fn log2_mag(&self) -> f64 {
        log2_abs_c(self)
    }
}

fn c2(j: u32) -> u32 {
    j * j.saturating_sub(1) / 2
}

/// `x^n` for a float.
fn fpow(x: &Float, n: u64, wp: u32) -> Float {
    Float::with_val(wp, x.pow(&Integer::from(n)))
}

// ---------------------------------------------------------------------------
// Mean

/// `mu_{n,k}` from the closed form, as an exact rational.
pub fn mean_closed_exact(n: u64, k: u32) -> Result<Rational> {
    if n > EXACT_CLOSED_CAP {
        return Err(Error::CapExceeded {
            what: "exact-rational mean",
            n,
            cap: EXACT_CLOSED_CAP,
        });
    }
    if k as u64 > n {
        return Ok(Rational::new());
    }
    let q: Vec<Rational> = (0..=k).map(q_finite).collect();
    let denom_k = Integer::from(1) << k;
    let mut s = Rational::new();
    for j in 0..=k {
        // (1 - 2^{j-k})^n = ((2^k - 2^j) / 2^k)^n
        let base = Integer::from(&denom_k - (Integer::from(1) << j));
        let num = base.pow(n as u32);
        let mut t = Rational::from((num, Integer::from(1) << (k as u64 * n) as u32));
        t /= Rational::from(&q[j as usize] * &q[(k - j) as usize]);
        t >>= c2(j) as i32;
        if j % 2 == 1 {
            s -= t;
        } else {
            s += t;
        }
    }
    Ok(s << k as i32)
}

/// `mu_{n,k}` from the closed form at context precision.
pub fn mean_closed(n: u64, k: u32, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    if k as u64 > n {
        return Ok(Float::with_val(ctx.bits, 0));
    }
    ctx.refine(|c| cancelling_sum(c, k as usize + 1, Accuracy::Relative, |wp| Ok(mean_terms(n, k, wp))).map(|v| Float::with_val(c.bits, v)))
}

fn mean_terms(n: u64, k: u32, wp: u32) -> (Float, f64) {
    let qf = QFloats::new(wp, k as usize);
    let mut s = Float::with_val(wp, 0);
    let mut lmax = f64::NEG_INFINITY;
    for j in 0..=k {
        let base = Float::with_val(wp, 1) - (Float::with_val(wp, 1) >> (k - j));
        let mut t = fpow(&base, n, wp);
        t *= &qf.inv_q[j as usize];
        t *= &qf.inv_q[(k - j) as usize];
        t >>= c2(j);
        lmax = lmax.max(log2_abs(&t));
        if j % 2 == 1 {
            s -= t;
        } else {
            s += t;
        }
    }
    (s << k, lmax + k as f64)
}

// ---------------------------------------------------------------------------
// Second moment

/// One term of the second-moment sum: coefficient data and the `delta` arguments
/// `u = U / 2^k`, `v = V / 2^k`.
struct NuTerm {
    j: u32,
    r: u32,
    h: u32,
    l: u32,
    mult: u32,
    big_u: u64,
    big_v: u64,
}

fn nu_terms(k: u32) -> Vec<NuTerm> {
    let mut out = Vec::new();
    for j in 0..k {
        for r in 0..(k - j) {
            for h in 0..=j {
                for l in h..=j {
                    out.push(NuTerm {
                        j,
                        r,
                        h,
                        l,
                        mult: if h < l { 2 } else { 1 },
                        big_u: 1 << (r + 1 + j),
                        big_v: (1 << h) + (1 << l),
                    });
                }
            }
        }
    }
    out
}

/// `nu_{n,k} = E(B_{n,k}^2)` from the closed form, as an exact rational.
pub fn second_moment_closed_exact(n: u64, k: u32) -> Result<Rational> {
    let mean = mean_closed_exact(n, k)?;
    if k as u64 > n || k == 0 {
        return Ok(mean);
    }
    let q: Vec<Rational> = (0..=k).map(q_finite).collect();
    let two_k = Integer::from(1) << k;
    let mut pows: HashMap<u64, Integer> = HashMap::new();
    let mut pow_of = |big: u64, e: u64| -> Integer {
        pows.entry(big * 1_000_003 + e)
            .or_insert_with(|| Integer::from(&two_k - big).pow(e as u32))
            .clone()
    };
    let mut s = mean;
    for t in nu_terms(k) {
        // delta(u, v; n) * 2^{k(n-1)}
        let scaled_delta = if t.big_u == t.big_v {
            Rational::from(pow_of(t.big_u, n - 1) * n)
        } else {
            let diff = pow_of(t.big_u, n) - pow_of(t.big_v, n);
            Rational::from((diff, Integer::from(t.big_v as i128 - t.big_u as i128)))
        };
        let mut coef = Rational::from(t.mult);
        coef /= Rational::from(&q[t.r as usize] * &q[(k - 1 - t.j - t.r) as usize]);
        coef /= Rational::from(&q[t.h as usize] * &q[(t.j - t.h) as usize]);
        coef /= Rational::from(&q[t.l as usize] * &q[(t.j - t.l) as usize]);
        let shift = (2 * t.j + 1) as i64 - (c2(t.r) + c2(t.h) + c2(t.l)) as i64 - (k as i64) * (n as i64 - 1);
        let term = if shift >= 0 {
            coef * scaled_delta << shift as u32
        } else {
            coef * scaled_delta >> (-shift) as u32
        };
        if (t.r + t.h + t.l) % 2 == 1 {
            s -= term;
        } else {
            s += term;
        }
    }
    Ok(s)
}

/// `nu_{n,k}` from the closed form at context precision.
pub fn second_moment_closed(n: u64, k: u32, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    if k as u64 > n || k == 0 {
        return mean_closed(n, k, ctx);
    }
    let terms = nu_terms(k);
    ctx.refine(|c| {
        cancelling_sum(c, terms.len() + k as usize + 1, Accuracy::Relative, |wp| Ok(second_moment_terms(n, k, &terms, wp)))
            .map(|v| Float::with_val(c.bits, v))
    })
}

/// `delta(u, v; n)` for `u = U/2^k`, `v = V/2^k` in `(0, 1]`.
fn delta_float(n: u64, k: u32, big_u: u64, big_v: u64, wp: u32, cache: &mut HashMap<(u64, u64), Float>) -> Float {
    let mut pw = |big: u64, e: u64, p: u32| -> Float {
        cache
            .entry((big, e))
            .or_insert_with(|| {
                let base = Float::with_val(p, 1) - (Float::with_val(p, big) >> k);
                fpow(&base, e, p)
            })
            .clone()
    };
    if big_u == big_v {
        let mut d = pw(big_u, n - 1, wp);
        d *= n;
        return d;
    }
    let a = pw(big_u, n, wp);
    let b = pw(big_v, n, wp);
    let diff = Float::with_val(wp, &a - &b);
    let loss = log2_abs(&a).max(log2_abs(&b)) - log2_abs(&diff);
    if loss.is_finite() && loss > 8.0 {
        // Close arguments: redo with the lost bits restored.
        let p = wp + loss.ceil() as u32 + 16;
        let base_a = Float::with_val(p, 1) - (Float::with_val(p, big_u) >> k);
        let base_b = Float::with_val(p, 1) - (Float::with_val(p, big_v) >> k);
        let d = Float::with_val(p, fpow(&base_a, n, p) - fpow(&base_b, n, p));
        let vu = Float::with_val(p, (big_v as i128 - big_u as i128) as f64) >> k;
        return Float::with_val(wp, d / vu);
    }
    let vu = Float::with_val(wp, (big_v as i128 - big_u as i128) as f64) >> k;
    diff / vu
}

fn second_moment_terms(n: u64, k: u32, terms: &[NuTerm], wp: u32) -> (Float, f64) {
    let (mut s, mut lmax) = mean_terms(n, k, wp);
    let qf = QFloats::new(wp, k as usize);
    let mut cache = HashMap::new();
    let mut coef = Float::new(wp);
    for t in terms {
        let d = delta_float(n, k, t.big_u, t.big_v, wp, &mut cache);
        coef.assign(&qf.inv_q[t.r as usize] * &qf.inv_q[(k - 1 - t.j - t.r) as usize]);
        coef *= &qf.inv_q[t.h as usize];
        coef *= &qf.inv_q[(t.j - t.h) as usize];
        coef *= &qf.inv_q[t.l as usize];
        coef *= &qf.inv_q[(t.j - t.l) as usize];
        coef *= t.mult;
        let shift = (2 * t.j + 1) as i64 - (c2(t.r) + c2(t.h) + c2(t.l)) as i64;
        if shift >= 0 {
            coef <<= shift as u32;
        } else {
            coef >>= (-shift) as u32;
        }
        coef *= &d;
        lmax = lmax.max(log2_abs(&coef));
        if (t.r + t.h + t.l) % 2 == 1 {
            s -= &coef;
        } else {
            s += &coef;
        }
    }
    (s, lmax)
}

use rug::Assign;

/// `Var(B_{n,k}) = nu_{n,k} - mu_{n,k}^2` from the closed forms.
///
/// The difference is refined directly, so the returned value is accurate to
/// `series_tol` in absolute terms. Rounding noise below the tolerance is
/// clamped to zero; anything more negative is reported as an error.
pub fn variance_exact(n: u64, k: u32, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    if k as u64 > n || k == 0 {
        return Ok(Float::with_val(ctx.bits, 0));
    }
    let terms = nu_terms(k);
    let v = ctx.refine(|c| {
        cancelling_sum(c, terms.len() + 2 * (k as usize + 1), Accuracy::Absolute, |wp| {
            let (mu, lm) = mean_terms(n, k, wp);
            let (nu, ln) = second_moment_terms(n, k, &terms, wp);
            let var = Float::with_val(wp, &nu - Float::with_val(wp, mu.square_ref()));
            Ok((var, ln.max(2.0 * lm)))
        })
        .map(|v| Float::with_val(c.bits, v))
    })?;
    if v < 0 {
        if v.to_f64() < -ctx.series_tol {
            return Err(Error::Domain(format!("negative variance {} at n = {n}, k = {k}", v.to_f64())));
        }
        return Ok(Float::with_val(ctx.bits, 0));
    }
    Ok(v)
}

/// `Var(B_{n,k})` as an exact rational.
pub fn variance_exact_rational(n: u64, k: u32) -> Result<Rational> {
    let mu = mean_closed_exact(n, k)?;
    let nu = second_moment_closed_exact(n, k)?;
    let v = nu - mu.square();
    debug_assert!(v >= 0);
    Ok(v)
}

/// `E(I_{n,k}) = sum_{l>=1} 2^{-l} mu_{n,k+l}`, exact.
pub fn internal_mean_exact(n: u64, k: u32) -> Result<Rational> {
    let mut s = Rational::new();
    for kk in (k + 1)..=(n as u32) {
        s += mean_closed_exact(n, kk)? >> (kk - k) as i32;
    }
    Ok(s)
}

/// `E(I_{n,k})` at context precision, accurate to `series_tol` in absolute terms.
///
/// The tail of `sum_{l>=1} 2^{-l} mu_{n,k+l}` is cut once `(n + 1) 2^{1-l}`,
/// which bounds it since `mu <= n + 1`, drops below half the tolerance.
pub fn internal_mean(n: u64, k: u32, ctx: &PrecisionContext) -> Result<Float> {
    ctx.validate()?;
    let half = ctx.with_tol(ctx.series_tol / 2.0);
    let mut s = Float::with_val(ctx.bits + GUARD_BITS, 0);
    let mut l = 1u32;
    while (k + l) as u64 <= n && (n + 1) as f64 * 2f64.powi(1 - l as i32) >= ctx.series_tol / 2.0 {
        let kk = k + l;
        let mu = half.refine(|c| {
            cancelling_sum(c, kk as usize + 1, Accuracy::Absolute, |wp| Ok(mean_terms(n, kk, wp))).map(|v| Float::with_val(c.bits, v))
        })?;
        s += mu >> l;
        l += 1;
    }
    Ok(Float::with_val(ctx.bits, s))
}

/// The pmf `P(U_n = k) = mu_{n,k} / (n + 1)` of the unsuccessful-search depth.
pub fn unsuccessful_pmf(n: u64, k: u32) -> Result<Rational> {
    Ok(mean_closed_exact(n, k)? / Rational::from(n + 1))
}

// ---------------------------------------------------------------------------
// Poisson generating functions

/// `m`-th derivative of `M_{k,1}(z) = 2^k sum_{j<=k} (-1)^j 2^{-C(j,2)} e^{-2^{j-k} z} / (Q_j Q_{k-j})`.
pub fn poisson_mean(k: u32, z: &Complex, m: u32, ctx: &PrecisionContext) -> Result<Complex> {
    ctx.validate()?;
    if !z.real().is_finite() || !z.imag().is_finite() {
        return Err(Error::domain("z must be finite"));
    }
    ctx.refine(|c| {
        cancelling_sum(c, k as usize + 1, Accuracy::Relative, |wp| Ok(poisson_mean_terms(k, z, m, wp))).map(|v| Complex::with_val(c.bits, v))
    })
}

fn poisson_mean_terms(k: u32, z: &Complex, m: u32, wp: u32) -> (Complex, f64) {
    let qf = QFloats::new(wp, k as usize);
    let mut s = Complex::with_val(wp, (0, 0));
    let mut lmax = f64::NEG_INFINITY;
    for j in 0..=k {
        let arg = Complex::with_val(wp, z >> (k - j));
        let mut t = Complex::with_val(wp, -arg).exp();
        t *= &qf.inv_q[j as usize];
        t *= &qf.inv_q[(k - j) as usize];
        t >>= c2(j);
        // (-2^{j-k})^m
        let e = (j as i64 - k as i64) * m as i64;
        if e >= 0 {
            t <<= e as u32;
        } else {
            t >>= (-e) as u32;
        }
        lmax = lmax.max(log2_abs_c(&t));
        if (j + m) % 2 == 1 {
            s -= t;
        } else {
            s += t;
        }
    }
    (s << k, lmax + k as f64)
}

/// `phi(u, v; x)` for integer `u != v` and complex `x`.
fn phi_complex(u: u64, v: u64, eu: &Complex, ev: &Complex, x: &Complex, wp: u32) -> Complex {
    let d = u as i128 - v as i128;
    let df = Float::with_val(wp, d as f64);
    let mut num = Complex::with_val(wp, x * &df);
    num -= 1u32;
    num *= ev;
    num += eu;
    num / Float::with_val(wp, df.square_ref())
}

/// Poissonized variance `V_k(z)`, the finite-`k` analogue of `2^k G(2^{-k} z)`.
///
/// Terms with `u = v` are skipped: they cancel in pairs.
pub fn poissonized_variance(k: u32, z: &Complex, ctx: &PrecisionContext) -> Result<Complex> {
    ctx.validate()?;
    if !z.real().is_finite() || !z.imag().is_finite() {
        return Err(Error::domain("z must be finite"));
    }
    if z.real().is_zero() && z.imag().is_zero() {
        return Ok(Complex::with_val(ctx.bits, (0, 0)));
    }
    let n_terms = (k as usize + 1).pow(4);
    ctx.refine(|c| {
        cancelling_sum(c, n_terms, Accuracy::Absolute, |wp| Ok(pv_terms(k, z, wp))).map(|v| Complex::with_val(c.bits, v))
    })
}

fn pv_terms(k: u32, z: &Complex, wp0: u32) -> (Complex, f64) {
    // phi loses about 2 log2(1/|x|) bits for small |x|.
    let lx = log2_abs_c(z) - k as f64;
    let wp = wp0 + if lx < 0.0 { (-2.0 * lx).ceil() as u32 } else { 0 } + 2 * k + 8;
    let qf = QFloats::new(wp, k as usize);
    let x = Complex::with_val(wp, z >> k);
    let e: Vec<Complex> = (0..=2 * k + 1)
        .map(|m| Complex::with_val(wp, -Complex::with_val(wp, &x << m)).exp())
        .collect();
    let mut s = Complex::with_val(wp, (0, 0));
    let mut skipped = Complex::with_val(wp, (0, 0));
    let mut lmax = f64::NEG_INFINITY;
    for j in 0..=k {
        for r in 0..=(k - j) {
            for h in 0..=j {
                for l in h..=j {
                    let u = 1u64 << (r + j);
                    let v = (1u64 << h) + (1u64 << l);
                    let mult = if h < l { 2u32 } else { 1 };
                    let mut coef = Float::with_val(wp, &qf.inv_q[r as usize] * &qf.inv_q[(k - j - r) as usize]);
                    coef *= &qf.inv_q[h as usize];
                    coef *= &qf.inv_q[(j - h) as usize];
                    coef *= &qf.inv_q[l as usize];
                    coef *= &qf.inv_q[(j - l) as usize];
                    coef *= mult;
                    let sh = (k - j) as i64 - (c2(r) + c2(h) + c2(l)) as i64 + 2 * (h + l) as i64;
                    if sh >= 0 {
                        coef <<= sh as u32;
                    } else {
                        coef >>= (-sh) as u32;
                    }
                    let ev = Complex::with_val(wp, &e[h as usize] * &e[l as usize]);
                    let eu = &e[(r + j) as usize];
                    let neg = (r + h + l) % 2 == 1;
                    if u == v {
                        if cfg!(debug_assertions) {
                            let mut t = Complex::with_val(wp, x.square_ref()) * eu;
                            t >>= 1;
                            t *= &coef;
                            if neg {
                                skipped -= t;
                            } else {
                                skipped += t;
                            }
                        }
                        continue;
                    }
                    let mut t = phi_complex(u, v, eu, &ev, &x, wp);
                    t *= &coef;
                    lmax = lmax.max(log2_abs_c(&t));
                    if neg {
                        s -= t;
                    } else {
                        s += t;
                    }
                }
            }
        }
    }
    debug_assert!(
        log2_abs_c(&skipped) < lmax - wp0 as f64 + 16.0,
        "u = v terms did not cancel"
    );
    (s, lmax)
}

// ---------------------------------------------------------------------------
// Poisson-Charlier

/// `tau_j(n) = sum_l C(j,l) (-n)^{j-l} n^(l)` with the falling factorial `n^(l)`.
pub fn charlier_tau(j: u32, n: u64) -> Integer {
    let mut s = Integer::new();
    let mut falling = Integer::from(1);
    for l in 0..=j {
        if l > 0 {
            if (l as u64) > n {
                break;
            }
            falling *= n - (l as u64 - 1);
        }
        let term = Integer::from(j).binomial(l) * Integer::from(-(n as i128)).pow(j - l) * &falling;
        s += term;
    }
    s
}

/// `sum_{j<=order} f^{(j)}(n) tau_j(n) / j!` for any `f` given by its derivatives.
pub fn depoissonize_with<F>(n: u64, order: u32, bits: u32, mut deriv: F) -> Result<Float>
where
    F: FnMut(u32) -> Result<Float>,
{
    let mut s = Float::with_val(bits + GUARD_BITS, 0);
    let mut fact = Integer::from(1);
    for j in 0..=order {
        if j > 0 {
            fact *= j;
        }
        let tau = charlier_tau(j, n);
        if tau == 0 {
            continue;
        }
        let mut t = deriv(j)?;
        t *= Rational::from((tau, fact.clone()));
        s += t;
    }
    Ok(Float::with_val(bits, s))
}

/// Poisson-Charlier approximation of `mu_{n,k}` from `M_{k,1}` and its derivatives at `n`.
pub fn depoissonize(k: u32, n: u64, order: u32, ctx: &PrecisionContext) -> Result<Float> {
    let z = Complex::with_val(ctx.bits, (n, 0));
    depoissonize_with(n, order, ctx.bits, |j| {
        Ok(poisson_mean(k, &z, j, ctx)?.into_real_imag().0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> PrecisionContext {
        PrecisionContext::default()
    }

    fn q(a: i64, b: i64) -> Rational {
        Rational::from((a, b))
    }

    #[test]
    fn table_rows_and_boundaries() {
        let t = recurrence_tables(ProfileKind::External, 10).unwrap();
        assert_eq!(t.mu[3], vec![q(0, 1), q(1, 2), q(5, 2), q(1, 1)]);
        assert_eq!(t.nu(3, 2).unwrap(), q(17, 2));
        assert_eq!(t.mu(0, 0), 1);
        assert_eq!(t.var(3, 2).unwrap(), q(9, 4));
        for n in 0..=10 {
            let s: Rational = t.mu[n].iter().sum();
            assert_eq!(s, Rational::from(n + 1));
            for k in 0..=n {
                assert!(t.var(n as u64, k as u64).unwrap() >= 0);
            }
        }
        let ti = recurrence_tables(ProfileKind::Internal, 10).unwrap();
        assert_eq!(ti.mu(0, 0), 0);
        for n in 1..=10u64 {
            assert_eq!(ti.mu(n, 0), 1);
            let s: Rational = ti.mu[n as usize].iter().sum();
            assert_eq!(s, Rational::from(n));
        }
    }

    #[test]
    fn table_caps() {
        assert!(matches!(
            recurrence_tables(ProfileKind::External, 201),
            Err(Error::CapExceeded { .. })
        ));
        let t = recurrence_tables(ProfileKind::External, 65).unwrap();
        assert!(t.nu.is_none());
    }

    #[test]
    fn mean_examples() {
        let c = ctx();
        assert_eq!(mean_closed_exact(1, 1).unwrap(), 2);
        assert_eq!(mean_closed_exact(2, 1).unwrap(), 1);
        assert_eq!(mean_closed_exact(3, 2).unwrap(), q(5, 2));
        assert_eq!(mean_closed_exact(0, 0).unwrap(), 1);
        assert_eq!(mean_closed_exact(4, 9).unwrap(), 0);
        assert!((mean_closed(3, 2, &c).unwrap().to_f64() - 2.5).abs() < 1e-30);
    }

    #[test]
    fn mean_closed_matches_table_exactly() {
        let t = recurrence_tables(ProfileKind::External, 30).unwrap();
        for n in 0..=30u64 {
            for k in 0..=n as u32 {
                assert_eq!(mean_closed_exact(n, k).unwrap(), t.mu(n, k as u64), "({n},{k})");
            }
        }
    }

    #[test]
    fn mean_float_is_relatively_accurate_when_tiny() {
        let c = ctx();
        let exact = mean_closed_exact(40, 40).unwrap();
        let f = mean_closed(40, 40, &c).unwrap();
        let rel = Float::with_val(256, &f - &exact) / Float::with_val(256, &exact);
        assert!(rel.abs().to_f64() < 1e-30, "{}", f.to_f64());
    }

    #[test]
    fn second_moment_examples() {
        let c = ctx();
        assert_eq!(second_moment_closed_exact(1, 1).unwrap(), 4);
        assert_eq!(second_moment_closed_exact(3, 2).unwrap(), q(17, 2));
        assert_eq!(second_moment_closed_exact(5, 0).unwrap(), 0);
        assert!((second_moment_closed(3, 2, &c).unwrap().to_f64() - 8.5).abs() < 1e-25);
        assert!((variance_exact(3, 2, &c).unwrap().to_f64() - 2.25).abs() < 1e-25);
        assert_eq!(variance_exact(1, 1, &c).unwrap().to_f64(), 0.0);
        for k in 0..4 {
            assert!(variance_exact(2, k, &c).unwrap().to_f64().abs() < 1e-25);
            assert_eq!(variance_exact_rational(2, k).unwrap(), 0);
        }
    }

    #[test]
    fn second_moment_exact_matches_table() {
        let t = recurrence_tables(ProfileKind::External, 18).unwrap();
        for n in 0..=18u64 {
            for k in 0..=n as u32 {
                assert_eq!(second_moment_closed_exact(n, k).unwrap(), t.nu(n, k as u64).unwrap(), "({n},{k})");
            }
        }
    }

    #[test]
    fn internal_mean_examples() {
        assert_eq!(internal_mean_exact(3, 1).unwrap(), q(3, 2));
        assert_eq!(internal_mean_exact(0, 4).unwrap(), 0);
        for n in 1..=12 {
            assert_eq!(internal_mean_exact(n, 0).unwrap(), 1);
        }
        let t = recurrence_tables(ProfileKind::Internal, 12).unwrap();
        for n in 0..=12u64 {
            for k in 0..=n as u32 {
                assert_eq!(internal_mean_exact(n, k).unwrap(), t.mu(n, k as u64));
            }
        }
    }

    #[test]
    fn poisson_mean_examples() {
        let c = ctx();
        let z = Complex::with_val(128, (0.7, -0.3));
        let m0 = poisson_mean(0, &z, 0, &c).unwrap();
        let e = Complex::with_val(128, -&z).exp();
        assert!(crate::precision::cabs(&Complex::with_val(128, &m0 - &e)) < 1e-30);
        let one = Complex::with_val(128, (1, 0));
        let v = poisson_mean(1, &one, 0, &c).unwrap().real().to_f64();
        let expect = 4.0 * ((-0.5f64).exp() - (-1f64).exp());
        assert!((v - expect).abs() < 1e-15 && (v - 0.954604).abs() < 1e-6);
    }

    #[test]
    fn poisson_mean_functional_equation() {
        let c = ctx();
        for zr in [0.3, 2.0, 17.0] {
            let z = Complex::with_val(128, (zr, 0.5));
            let half = Complex::with_val(128, &z >> 1);
            for k in 1..=20 {
                let m = poisson_mean(k, &z, 0, &c).unwrap();
                let d = poisson_mean(k, &z, 1, &c).unwrap();
                let prev = poisson_mean(k - 1, &half, 0, &c).unwrap();
                let res = Complex::with_val(128, &m + &d) - Complex::with_val(128, &prev * 2u32);
                assert!(crate::precision::cabs(&res) < 1e-25, "k={k} z={zr}");
            }
        }
    }

    #[test]
    fn poissonized_variance_examples() {
        let c = ctx();
        let one = Complex::with_val(128, (1, 0));
        let v0 = poisson_mean(0, &one, 0, &c).unwrap();
        let pv = poissonized_variance(0, &one, &c).unwrap().real().to_f64();
        let expect = (-1f64).exp() - 2.0 * (-2f64).exp();
        assert!((pv - expect).abs() < 1e-15 && (pv - 0.0972087).abs() < 1e-6, "{pv} {}", v0.real());
        for k in [0, 3, 7] {
            let zero = Complex::with_val(128, (0, 0));
            assert!(crate::precision::cabs(&poissonized_variance(k, &zero, &c).unwrap()) < 1e-30);
        }
    }

    /// `V_k(z) = M_{k,2} - M_{k,1}^2 - z M_{k,1}'^2` with `M_{k,2}` summed from the nu table.
    #[test]
    fn poissonized_variance_matches_its_definition() {
        let c = ctx();
        let t = recurrence_tables(ProfileKind::External, 64).unwrap();
        for k in [1u32, 2, 4, 6] {
            for zr in [0.5f64, 2.0, 5.0] {
                let bits = 256;
                let z = Float::with_val(bits, zr);
                let mut m2 = Float::with_val(bits, 0);
                let mut zn_over_fact = Float::with_val(bits, 1);
                for n in 0..=64u64 {
                    if n > 0 {
                        zn_over_fact *= &z;
                        zn_over_fact /= n;
                    }
                    m2 += Float::with_val(bits, &zn_over_fact * &t.nu(n, k as u64).unwrap());
                }
                m2 *= Float::with_val(bits, -&z).exp();
                let zc = Complex::with_val(bits, (zr, 0));
                let m1 = poisson_mean(k, &zc, 0, &c).unwrap().into_real_imag().0;
                let d1 = poisson_mean(k, &zc, 1, &c).unwrap().into_real_imag().0;
                let def = m2 - Float::with_val(bits, m1.square_ref()) - Float::with_val(bits, d1.square_ref()) * &z;
                let pv = poissonized_variance(k, &zc, &c).unwrap().into_real_imag().0;
                let diff = Float::with_val(bits, &def - &pv).abs().to_f64();
                assert!(diff < 1e-20, "k={k} z={zr}: {diff}");
            }
        }
    }

    /// `M_{k,1}(z) = 2^k sum_m 2^{-C(m+1,2) - k m} F^{(m)}(2^{-k} z) / Q_m`.
    #[test]
    fn poisson_mean_from_derivatives_of_f() {
        let c = PrecisionContext::new(128, 1e-24, false).unwrap();
        for k in [1u32, 2, 5, 10, 20] {
            for zr in [0.5f64, 3.0, 20.0] {
                let z = Complex::with_val(128, (zr, 0));
                let x = Complex::with_val(128, &z >> k);
                let mut sum = Float::with_val(256, 0);
                let mut small = 0;
                for m in 0..200u32 {
                    let f = crate::limit::f_eval(&x, m, &c).unwrap().value.into_real_imag().0;
                    let mut t = Float::with_val(256, f / q_finite(m));
                    let sh = (m as i64 + 1) * m as i64 / 2 + (k * m) as i64;
                    t >>= sh as u32;
                    let tiny = t.to_f64().abs() < 1e-18;
                    sum += t;
                    small = if tiny { small + 1 } else { 0 };
                    if small == 3 {
                        break;
                    }
                }
                sum <<= k;
                let direct = poisson_mean(k, &z, 0, &c).unwrap().into_real_imag().0;
                let diff = Float::with_val(256, &sum - &direct).abs().to_f64();
                assert!(diff < 1e-12, "k={k} z={zr}: {diff}");
            }
        }
    }

    #[test]
    fn charlier_values() {
        assert_eq!(charlier_tau(0, 7), 1);
        for n in 0..10 {
            assert_eq!(charlier_tau(1, n), 0);
            assert_eq!(charlier_tau(2, n), -(n as i64));
            assert_eq!(charlier_tau(3, n), 2 * n as i64);
            assert_eq!(charlier_tau(4, n), 3 * n as i64 * (n as i64 - 2));
            assert_eq!(charlier_tau(5, n), -4 * n as i64 * (5 * n as i64 - 6));
        }
        assert_eq!(charlier_tau(2, 5), -5);
        assert_eq!(charlier_tau(4, 3), 9);
    }

    #[test]
    fn depoissonize_examples() {
        let c = ctx();
        let constant = depoissonize_with(12, 0, 128, |j| Ok(Float::with_val(128, if j == 0 { 3.5 } else { 0.0 }))).unwrap();
        assert_eq!(constant.to_f64(), 3.5);
        for (k, n) in [(2, 10u64), (5, 40)] {
            let a = depoissonize(k, n, 0, &c).unwrap();
            let b = depoissonize(k, n, 1, &c).unwrap();
            assert_eq!(a, b);
        }
        let approx = depoissonize(3, 20, 3, &c).unwrap().to_f64();
        let exact = mean_closed_exact(20, 3).unwrap().to_f64();
        assert!((approx - exact).abs() <= 0.1, "{approx} vs {exact}");
    }

    #[test]
    fn unsuccessful_pmf_sums_to_one() {
        let s: Rational = (0..=100).map(|k| unsuccessful_pmf(100, k).unwrap()).sum();
        assert_eq!(s, 1);
        let argmax = (0..=100u32)
            .max_by(|&a, &b| mean_closed_exact(100, a).unwrap().cmp(&mean_closed_exact(100, b).unwrap()))
            .unwrap();
        assert_eq!(argmax, 7);
    }
    #[test]
    fn internal_mean_float_matches_exact() {
        let c = ctx();
        for k in 0..14 {
            let e = Float::with_val(200, &internal_mean_exact(100, k).unwrap());
            let f = internal_mean(100, k, &c).unwrap();
            let d = Float::with_val(200, &e - &f).abs().to_f64();
            assert!(d < 1e-25, "k = {k}: {d}");
        }
        assert_eq!(internal_mean(0, 0, &c).unwrap(), 0);
    }

}
