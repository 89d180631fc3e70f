//! Experiment orchestration: CLT and concentration experiments, profile
//! tables, and CSV / JSON rendering of every command's results.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use std::path::Path;

use rug::{Complex, Float};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::asymptotics::{central_range, f_saddle_real, height_probability_bounds, predict_levels, saddle_solve, LevelPredictions};
use crate::error::{Error, Result};
use crate::exact::{
    internal_mean, mean_closed, mean_closed_exact, poisson_mean, poissonized_variance, recurrence_tables, variance_exact,
    variance_exact_rational, ProfileKind, EXACT_CLOSED_CAP, NU_TABLE_CAP,
};
use crate::limit::{eval_limit_fn, f_eval_real, g_eval, LimitFn};
use crate::precision::PrecisionContext;
use crate::simulator::{map_trials, run_trials, StatSet, TrialConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Mean,
    Variance,
    Limitfn,
    Saddle,
    Predict,
    Simulate,
    Clt,
    Concentration,
    #[serde(alias = "table")]
    ProfileTable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidSpec(format!("unknown format {other:?}"))),
        }
    }
}

/// A complete description of one run. Keys mirror the CLI flags; `x` is kept
/// as text so arbitrary-precision arguments survive a round trip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmin: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmax: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prec: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(rename = "fn", skip_serializing_if = "Option::is_none")]
    pub function: Option<LimitFn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deriv: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<OutputFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentSpec {
            kind: Some(kind),
            ..Default::default()
        }
    }

    /// Fields set in `top` replace those of `self`.
    pub fn overlay(mut self, top: &ExperimentSpec) -> Self {
        overlay_fields!(self, top; kind, n, k, kmin, kmax, trials, seed, prec, tol, exact,
            function, x, deriv, m, stats, format, out);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn context(&self) -> Result<PrecisionContext> {
        let d = PrecisionContext::default();
        PrecisionContext::new(self.prec.unwrap_or(d.bits), self.tol.unwrap_or(d.series_tol), true)
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    /// Checks that the fields the chosen kind needs are present and positive.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        self.context()?;
        if self.trials == Some(0) {
            return Err(Error::InvalidSpec("trials must be at least 1".into()));
        }
        if let (Some(a), Some(b)) = (self.kmin, self.kmax) {
            if a > b {
                return Err(Error::InvalidSpec(format!("kmin = {a} exceeds kmax = {b}")));
            }
        }
        use ExperimentKind::*;
        match kind {
            Mean | Variance => {
                self.need_n()?;
                self.need_k()?;
            }
            Limitfn => {
                self.need_fn()?;
                self.need_x()?;
            }
            Saddle => {
                self.need_x()?;
            }
            Predict | ProfileTable => {
                self.need_n()?;
            }
            Simulate | Concentration => {
                self.need_n()?;
                self.need_trials()?;
            }
            Clt => {
                self.need_n()?;
                self.need_k()?;
                self.need_trials()?;
            }
        }
        Ok(())
    }

    fn kind(&self) -> Result<ExperimentKind> {
        self.kind.ok_or_else(|| missing("kind"))
    }

    fn need_n(&self) -> Result<u64> {
        self.n.ok_or_else(|| missing("n"))
    }

    fn need_k(&self) -> Result<u32> {
        self.k.ok_or_else(|| missing("k"))
    }

    fn need_trials(&self) -> Result<u64> {
        self.trials.ok_or_else(|| missing("trials"))
    }

    fn need_fn(&self) -> Result<LimitFn> {
        self.function.ok_or_else(|| missing("fn"))
    }

    fn need_x(&self) -> Result<&str> {
        self.x.as_deref().ok_or_else(|| missing("x"))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn missing(field: &str) -> Error {
    Error::InvalidSpec(format!("missing required field `{field}`"))
}

/// Parses a decimal argument at `bits` precision.
pub fn parse_float(text: &str, bits: u32) -> Result<Float> {
    Float::parse(text.trim())
        .map(|p| Float::with_val(bits, p))
        .map_err(|e| Error::InvalidSpec(format!("cannot parse {text:?} as a number: {e}")))
}

// ---------------------------------------------------------------------------
// Reports and rendering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub precision_bits: u32,
    pub tolerance: f64,
    pub build: String,
}

/// Output of one run: a scalar summary plus a table of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub spec: ExperimentSpec,
    pub summary: Map<String, Value>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub provenance: Provenance,
}

impl Report {
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    /// Summary lines as `# key=value`, then the header and rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (key, v) in &self.summary {
            out.push_str(&format!("# {key}={}\n", csv_cell(v)));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let results: Vec<Value> = self
            .rows
            .iter()
            .map(|row| Value::Object(self.columns.iter().cloned().zip(row.iter().cloned()).collect()))
            .collect();
        let mut top = Map::new();
        top.insert("spec".into(), serde_json::to_value(&self.spec).expect("spec serializes"));
        if !self.summary.is_empty() {
            top.insert("summary".into(), Value::Object(self.summary.clone()));
        }
        top.insert("results".into(), Value::Array(results));
        top.insert("provenance".into(), serde_json::to_value(&self.provenance).expect("provenance serializes"));
        let mut s = serde_json::to_string_pretty(&Value::Object(top)).expect("report serializes");
        s.push('\n');
        s
    }

    /// The column named `name` of row `i`.
    pub fn cell(&self, i: usize, name: &str) -> Option<&Value> {
        let c = self.columns.iter().position(|x| x == name)?;
        self.rows.get(i)?.get(c)
    }
}

/// JSON number with the shortest round-trip decimal; non-finite values become null.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => quote(s),
        other => quote(&other.to_string()),
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// All significant decimal digits of `x`.
pub fn digits(x: &Float) -> String {
    let d = (x.prec() as f64 * std::f64::consts::LOG10_2).floor() as usize;
    x.to_string_radix(10, Some(d.max(1)))
}

struct TableBuilder {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl TableBuilder {
    fn new(columns: &[&str]) -> Self {
        TableBuilder {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

// ---------------------------------------------------------------------------
// CLT

/// Where the standardizing moments came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentSource {
    Exact,
    Poissonized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: u64,
    pub k: u32,
    pub trials: u64,
    pub seed: u64,
    pub mu: f64,
    pub sigma: f64,
    pub moments: MomentSource,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    /// Kolmogorov-Smirnov distance of the standardized sample to N(0,1).
    pub ks: f64,
    /// `(value of B_{n,k}, count)`, increasing in value.
    pub histogram: Vec<(u64, u64)>,
    /// `|empirical mean - mu| <= 6 sigma / sqrt(trials)`.
    pub mean_gate: bool,
    /// `|empirical var - sigma^2| <= 6 sqrt(2 / trials) sigma^2`.
    pub var_gate: bool,
    pub warnings: Vec<String>,
}

/// Standard normal distribution function, `erfc(-x / sqrt 2) / 2`.
pub fn normal_cdf(x: f64) -> f64 {
    let v = Float::with_val(64, -x / SQRT_2).erfc();
    v.to_f64() / 2.0
}

/// KS distance between the empirical distribution of `(value, count)` pairs,
/// sorted by value, and the standard normal. Both sides of every jump are
/// checked, so ties in discrete data are handled exactly.
pub fn ks_distance_normal(sorted: &[(f64, u64)]) -> f64 {
    let total: u64 = sorted.iter().map(|p| p.1).sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let mut cum = 0u64;
    let mut d: f64 = 0.0;
    for &(x, c) in sorted {
        let phi = normal_cdf(x);
        let below = cum as f64 / t;
        cum += c;
        let above = cum as f64 / t;
        d = d.max((phi - below).abs()).max((above - phi).abs());
    }
    d.clamp(0.0, 1.0)
}

/// `(mu, sigma^2, source)`: closed forms when they evaluate, else the
/// Poissonized surrogates `M_{k,1}(n)` and `V_k(n)`.
fn clt_moments(n: u64, k: u32, ctx: &PrecisionContext) -> Result<(f64, f64, MomentSource)> {
    let exact = mean_closed(n, k, ctx).and_then(|m| Ok((m, variance_exact(n, k, ctx)?)));
    match exact {
        Ok((m, v)) => Ok((m.to_f64(), v.to_f64(), MomentSource::Exact)),
        Err(Error::CapExceeded { .. } | Error::PrecisionExhausted { .. }) => {
            let z = Complex::with_val(ctx.bits, (n, 0));
            let m = poisson_mean(k, &z, 0, ctx)?.real().to_f64();
            let v = poissonized_variance(k, &z, ctx)?.real().to_f64();
            Ok((m, v, MomentSource::Poissonized))
        }
        Err(e) => Err(e),
    }
}

fn central_range_warning(n: u64, k: u32) -> Option<String> {
    match central_range(n) {
        Ok((lo, hi)) if (lo..=hi).contains(&(k as f64)) => None,
        Ok((lo, hi)) => Some(format!("k = {k} lies outside the central range ({lo:.3}, {hi:.3}) for n = {n}")),
        Err(_) => Some(format!("no central range for n = {n}")),
    }
}

/// Simulates `trials` trees and compares standardized `B_{n,k}` with N(0,1).
pub fn clt_experiment(n: u64, k: u32, trials: u64, seed: u64, ctx: &PrecisionContext) -> Result<CltReport> {
    ctx.validate()?;
    if trials == 0 {
        return Err(Error::InvalidSpec("trials must be at least 1".into()));
    }
    let (mu, var, moments) = clt_moments(n, k, ctx)?;
    if var <= 0.0 {
        return Err(Error::DegenerateVariance { n, k });
    }
    let sigma = var.sqrt();
    let warnings: Vec<String> = central_range_warning(n, k).into_iter().collect();

    let samples = map_trials(n, trials, seed, |_, p| p.external_at(k as usize));
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut s1, mut s2) = (0u128, 0u128);
    for &b in &samples {
        *hist.entry(b).or_default() += 1;
        s1 += b as u128;
        s2 += b as u128 * b as u128;
    }
    let t = trials as f64;
    let empirical_mean = s1 as f64 / t;
    let empirical_var = if trials > 1 {
        let m2 = Float::with_val(256, s2) - Float::with_val(256, s1).square() / Float::with_val(256, trials);
        m2.to_f64() / (t - 1.0)
    } else {
        0.0
    };
    let standardized: Vec<(f64, u64)> = hist.iter().map(|(&b, &c)| ((b as f64 - mu) / sigma, c)).collect();
    let ks = ks_distance_normal(&standardized);
    Ok(CltReport {
        n,
        k,
        trials,
        seed,
        mu,
        sigma,
        moments,
        empirical_mean,
        empirical_var,
        ks,
        histogram: hist.into_iter().collect(),
        mean_gate: (empirical_mean - mu).abs() <= 6.0 * sigma / t.sqrt(),
        var_gate: (empirical_var - var).abs() <= 6.0 * (2.0 / t).sqrt() * var,
        warnings,
    })
}

impl CltReport {
    fn summary(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("n".into(), self.n.into());
        m.insert("k".into(), self.k.into());
        m.insert("trials".into(), self.trials.into());
        m.insert("mu".into(), num(self.mu));
        m.insert("sigma".into(), num(self.sigma));
        m.insert("moments".into(), serde_json::to_value(self.moments).expect("serializes"));
        m.insert("empirical_mean".into(), num(self.empirical_mean));
        m.insert("empirical_var".into(), num(self.empirical_var));
        m.insert("ks".into(), num(self.ks));
        m.insert("mean_gate".into(), self.mean_gate.into());
        m.insert("var_gate".into(), self.var_gate.into());
        if !self.warnings.is_empty() {
            m.insert("warnings".into(), self.warnings.join("; ").into());
        }
        m
    }

    fn table(&self) -> TableBuilder {
        let mut tb = TableBuilder::new(&["b", "count", "standardized", "empirical_cdf", "normal_cdf"]);
        let t = self.trials as f64;
        let mut cum = 0;
        for &(b, c) in &self.histogram {
            cum += c;
            let x = (b as f64 - self.mu) / self.sigma;
            tb.push(vec![b.into(), c.into(), num(x), num(cum as f64 / t), num(normal_cdf(x))]);
        }
        tb
    }
}

// ---------------------------------------------------------------------------
// Two-point concentration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationLevel {
    pub k: i64,
    pub height_count: u64,
    pub saturation_count: u64,
    /// Empirical `P(H_n <= k)`.
    pub height_cdf: f64,
    /// Exact lower / upper bounds on `P(H_n <= k)` where `n` permits.
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n: u64,
    pub trials: u64,
    pub seed: u64,
    pub predictions: Option<LevelPredictions>,
    pub mean_height: f64,
    pub mean_saturation: f64,
    /// `P(H in {k_H, k_H + 1})`.
    pub p_height_two_point: Option<f64>,
    /// `P(H in {k_H - 1, k_H, k_H + 1})`.
    pub p_height_three_point: Option<f64>,
    /// `P(S in {k_S - 1, k_S})`.
    pub p_saturation_two_point: Option<f64>,
    pub levels: Vec<ConcentrationLevel>,
}

impl ConcentrationReport {
    pub fn level(&self, k: i64) -> Option<&ConcentrationLevel> {
        self.levels.iter().find(|l| l.k == k)
    }
}

pub fn concentration_experiment(n: u64, trials: u64, seed: u64, ctx: &PrecisionContext) -> Result<ConcentrationReport> {
    ctx.validate()?;
    let config = TrialConfig {
        n,
        trials,
        master_seed: seed,
        stats: StatSet {
            profile: false,
            height: true,
            saturation: true,
            depth: false,
        },
    };
    let m = run_trials(&config)?;
    let predictions = predict_levels(n).ok();
    let mass_h = |ks: &[i64]| {
        m.height
            .mass_on(ks.iter().filter(|&&k| k >= 0).map(|&k| k as usize))
    };
    let (p2, p3, ps) = match &predictions {
        Some(p) => {
            let kh = p.k_height;
            let s = p.k_saturation as i32;
            (
                Some(mass_h(&[kh, kh + 1])),
                Some(mass_h(&[kh - 1, kh, kh + 1])),
                Some(m.saturation_mass_on([s - 1, s])),
            )
        }
        None => (None, None, None),
    };

    let top = m.height.counts.len().max(m.saturation_shifted.counts.len().saturating_sub(1)) as i64;
    let first = if m.saturation_shifted.counts.first().copied().unwrap_or(0) > 0 { -1 } else { 0 };
    let mut levels = Vec::new();
    for k in first..top {
        let hc = if k >= 0 { m.height.counts.get(k as usize).copied().unwrap_or(0) } else { 0 };
        let sc = m.saturation_shifted.counts.get((k + 1) as usize).copied().unwrap_or(0);
        let cdf = if k >= 0 { m.height.cdf(k as usize) } else { 0.0 };
        let (lo, hi) = if k >= 0 && n <= EXACT_CLOSED_CAP {
            let b = height_probability_bounds(n, k as u32, ctx)?;
            (Some(b.lower_f64()), Some(b.upper_f64()))
        } else {
            (None, None)
        };
        levels.push(ConcentrationLevel {
            k,
            height_count: hc,
            saturation_count: sc,
            height_cdf: cdf,
            bound_lower: lo,
            bound_upper: hi,
        });
    }
    Ok(ConcentrationReport {
        n,
        trials,
        seed,
        predictions,
        mean_height: m.mean_height(),
        mean_saturation: m.mean_saturation(),
        p_height_two_point: p2,
        p_height_three_point: p3,
        p_saturation_two_point: ps,
        levels,
    })
}

impl ConcentrationReport {
    fn summary(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("n".into(), self.n.into());
        m.insert("trials".into(), self.trials.into());
        if let Some(p) = &self.predictions {
            m.insert("k_H".into(), p.k_height.into());
            m.insert("theta".into(), num(p.theta));
            m.insert("k_S".into(), p.k_saturation.into());
        }
        m.insert("mean_height".into(), num(self.mean_height));
        m.insert("mean_saturation".into(), num(self.mean_saturation));
        m.insert("p_height_two_point".into(), opt(self.p_height_two_point));
        m.insert("p_height_three_point".into(), opt(self.p_height_three_point));
        m.insert("p_saturation_two_point".into(), opt(self.p_saturation_two_point));
        m
    }

    fn table(&self) -> TableBuilder {
        let mut tb = TableBuilder::new(&["k", "height_count", "saturation_count", "height_cdf", "bound_lower", "bound_upper"]);
        for l in &self.levels {
            tb.push(vec![
                l.k.into(),
                l.height_count.into(),
                l.saturation_count.into(),
                num(l.height_cdf),
                opt(l.bound_lower),
                opt(l.bound_upper),
            ]);
        }
        tb
    }
}

// ---------------------------------------------------------------------------
// Profile table

pub const PROFILE_TABLE_COLUMNS: [&str; 11] = [
    "n",
    "k",
    "mu_exact",
    "var_exact",
    "mu_poisson",
    "var_poisson",
    "mean_approx_2kF",
    "var_approx_2kG",
    "internal_mu",
    "internal_var",
    "p_unsuccessful",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub n: u64,
    pub k: u32,
    pub mu_exact: Option<f64>,
    pub var_exact: Option<f64>,
    pub mu_poisson: f64,
    pub var_poisson: f64,
    pub mean_approx_2k_f: f64,
    pub var_approx_2k_g: f64,
    pub internal_mu: Option<f64>,
    pub internal_var: Option<f64>,
    pub p_unsuccessful: Option<f64>,
}

impl ProfileRow {
    fn cells(&self) -> Vec<Value> {
        vec![
            self.n.into(),
            self.k.into(),
            opt(self.mu_exact),
            opt(self.var_exact),
            num(self.mu_poisson),
            num(self.var_poisson),
            num(self.mean_approx_2k_f),
            num(self.var_approx_2k_g),
            opt(self.internal_mu),
            opt(self.internal_var),
            opt(self.p_unsuccessful),
        ]
    }
}

/// Exact-column evaluation: caps and precision exhaustion leave the cell empty.
fn capped<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::CapExceeded { .. } | Error::PrecisionExhausted { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Exact, Poissonized and limit-function values of the profile moments for
/// `kmin <= k <= kmax`.
pub fn profile_table(n: u64, kmin: u32, kmax: u32, ctx: &PrecisionContext) -> Result<Vec<ProfileRow>> {
    ctx.validate()?;
    if kmin > kmax {
        return Err(Error::InvalidSpec(format!("kmin = {kmin} exceeds kmax = {kmax}")));
    }
    let internal_table = if n <= NU_TABLE_CAP {
        Some(recurrence_tables(ProfileKind::Internal, n)?)
    } else {
        None
    };
    let z = Complex::with_val(ctx.bits, (n, 0));
    let mut rows = Vec::with_capacity((kmax - kmin + 1) as usize);
    for k in kmin..=kmax {
        let mu_exact = capped(mean_closed(n, k, ctx))?.map(|v| v.to_f64());
        let var_exact = capped(variance_exact(n, k, ctx))?.map(|v| v.to_f64());
        let x = Float::with_val(ctx.bits, n) >> k;
        let two_k = 2f64.powi(k as i32);
        let internal_var = internal_table.as_ref().map(|t| {
            if k as u64 <= n {
                t.var(n, k as u64).expect("variance table present").to_f64()
            } else {
                0.0
            }
        });
        rows.push(ProfileRow {
            n,
            k,
            mu_exact,
            var_exact,
            mu_poisson: poisson_mean(k, &z, 0, ctx)?.real().to_f64(),
            var_poisson: poissonized_variance(k, &z, ctx)?.real().to_f64(),
            mean_approx_2k_f: two_k * f_eval_real(&x, 0, ctx)?.to_f64(),
            var_approx_2k_g: two_k * g_eval(&x, ctx)?.to_f64(),
            internal_mu: capped(internal_mean(n, k, ctx))?.map(|v| v.to_f64()),
            internal_var,
            p_unsuccessful: mu_exact.map(|m| m / (n + 1) as f64),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Dispatch

/// Runs `spec` and collects its output. `build` identifies the binary in the
/// provenance block.
pub fn run(spec: &ExperimentSpec, build: &str) -> Result<Report> {
    spec.validate()?;
    let ctx = spec.context()?;
    let kind = spec.kind()?;
    let mut summary = Map::new();
    let mut seed = None;
    use ExperimentKind::*;
    let tb = match kind {
        Mean => {
            let (n, k) = (spec.need_n()?, spec.need_k()?);
            let v = mean_closed(n, k, &ctx)?;
            let mut tb = TableBuilder::new(&["n", "k", "mu", "mu_digits"]);
            let mut row = vec![n.into(), k.into(), num(v.to_f64()), digits(&v).into()];
            if spec.exact == Some(true) {
                tb.columns.push("mu_rational".into());
                row.push(mean_closed_exact(n, k)?.to_string().into());
            }
            tb.push(row);
            tb
        }
        Variance => {
            let (n, k) = (spec.need_n()?, spec.need_k()?);
            let v = variance_exact(n, k, &ctx)?;
            let mut tb = TableBuilder::new(&["n", "k", "var", "var_digits"]);
            let mut row = vec![n.into(), k.into(), num(v.to_f64()), digits(&v).into()];
            if spec.exact == Some(true) {
                tb.columns.push("var_rational".into());
                row.push(variance_exact_rational(n, k)?.to_string().into());
            }
            tb.push(row);
            tb
        }
        Limitfn => {
            let which = spec.need_fn()?;
            let x = parse_float(spec.need_x()?, ctx.bits)?;
            let deriv = spec.deriv.unwrap_or(0);
            let v = eval_limit_fn(which, &x, deriv, &ctx)?;
            let name = serde_json::to_value(which).expect("serializes");
            let mut tb = TableBuilder::new(&["fn", "x", "deriv", "value", "value_digits", "tail_bound", "terms_used"]);
            tb.push(vec![
                name,
                spec.need_x()?.trim().into(),
                deriv.into(),
                num(v.to_f64()),
                digits(&v.value).into(),
                num(v.tail_bound),
                v.terms_used.into(),
            ]);
            tb
        }
        Saddle => {
            let x = parse_float(spec.need_x()?, ctx.bits)?;
            let m = spec.m.unwrap_or(0);
            let s = saddle_solve(&Complex::with_val(ctx.bits, (&x, 0)), &ctx)?;
            let f = f_saddle_real(&x, m, &ctx)?;
            let mut tb = TableBuilder::new(&["x", "m", "rho", "log_rho", "residual", "iterations", "f_saddle", "f_saddle_digits"]);
            tb.push(vec![
                spec.need_x()?.trim().into(),
                m.into(),
                num(s.rho.real().to_f64()),
                num(s.log_rho.real().to_f64()),
                num(s.residual),
                s.iterations.into(),
                num(f.to_f64()),
                digits(&f).into(),
            ]);
            tb
        }
        Predict => {
            let p = predict_levels(spec.need_n()?)?;
            let mut tb = TableBuilder::new(&["n", "k_s", "k_h", "k_H", "theta", "k_S"]);
            tb.push(vec![p.n.into(), num(p.k_s), num(p.k_h), p.k_height.into(), num(p.theta), p.k_saturation.into()]);
            tb
        }
        Simulate => {
            seed = Some(spec.seed());
            simulate_table(spec, &mut summary)?
        }
        Clt => {
            seed = Some(spec.seed());
            let r = clt_experiment(spec.need_n()?, spec.need_k()?, spec.need_trials()?, spec.seed(), &ctx)?;
            summary = r.summary();
            r.table()
        }
        Concentration => {
            seed = Some(spec.seed());
            let r = concentration_experiment(spec.need_n()?, spec.need_trials()?, spec.seed(), &ctx)?;
            summary = r.summary();
            r.table()
        }
        ProfileTable => {
            let n = spec.need_n()?;
            let kmin = spec.kmin.unwrap_or(0);
            let kmax = spec.kmax.unwrap_or(n.min(DEFAULT_TABLE_KMAX as u64) as u32).max(kmin);
            let mut tb = TableBuilder::new(&PROFILE_TABLE_COLUMNS);
            for row in profile_table(n, kmin, kmax, &ctx)? {
                tb.push(row.cells());
            }
            tb
        }
    };
    Ok(Report {
        spec: spec.clone(),
        summary,
        columns: tb.columns,
        rows: tb.rows,
        provenance: Provenance {
            seed,
            precision_bits: ctx.bits,
            tolerance: ctx.series_tol,
            build: build.to_string(),
        },
    })
}

/// Upper level of a profile table when `kmax` is not given.
pub const DEFAULT_TABLE_KMAX: u32 = 32;

fn simulate_table(spec: &ExperimentSpec, summary: &mut Map<String, Value>) -> Result<TableBuilder> {
    let stats = match spec.stats.as_deref() {
        Some(s) => StatSet::parse(s)?,
        None => StatSet::ALL,
    };
    let config = TrialConfig {
        n: spec.need_n()?,
        trials: spec.need_trials()?,
        master_seed: spec.seed(),
        stats,
    };
    let m = run_trials(&config)?;
    summary.insert("n".into(), config.n.into());
    summary.insert("trials".into(), config.trials.into());
    if stats.height {
        summary.insert("mean_height".into(), num(m.mean_height()));
    }
    if stats.saturation {
        summary.insert("mean_saturation".into(), num(m.mean_saturation()));
    }
    if stats.depth {
        summary.insert("mean_depth".into(), num(m.depth.mean()));
    }
    let mut tb = TableBuilder::new(&[
        "k",
        "ext_mean",
        "ext_var",
        "int_mean",
        "int_var",
        "height_count",
        "saturation_count",
        "depth_count",
    ]);
    let levels = m
        .external
        .levels()
        .max(m.height.counts.len())
        .max(m.saturation_shifted.counts.len().saturating_sub(1))
        .max(m.depth.counts.len());
    let first = if m.saturation_shifted.counts.first().copied().unwrap_or(0) > 0 { -1i64 } else { 0 };
    let count = |on: bool, h: &[u64], i: i64| -> Value {
        if !on || i < 0 {
            return Value::Null;
        }
        h.get(i as usize).copied().unwrap_or(0).into()
    };
    let moment = |on: bool, levels: usize, k: i64, f: &dyn Fn(usize) -> f64| -> Value {
        if !on || k < 0 {
            return Value::Null;
        }
        if (k as usize) < levels {
            num(f(k as usize))
        } else {
            num(0.0)
        }
    };
    let trials_gt1 = config.trials > 1;
    for k in first..levels as i64 {
        tb.push(vec![
            k.into(),
            moment(stats.profile, m.external.levels(), k, &|i| m.mean_external(i)),
            moment(stats.profile && trials_gt1, m.external.levels(), k, &|i| m.var_external(i)),
            moment(stats.profile, m.internal.levels(), k, &|i| m.mean_internal(i)),
            moment(stats.profile && trials_gt1, m.internal.levels(), k, &|i| m.var_internal(i)),
            count(stats.height, &m.height.counts, k),
            count(stats.saturation, &m.saturation_shifted.counts, k + 1),
            count(stats.depth, &m.depth.counts, k),
        ]);
    }
    Ok(tb)
}
