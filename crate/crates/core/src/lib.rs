//! Node profiles of random digital search trees under the symmetric
//! Bernoulli model: exact moments, limit functions, saddle-point and level
//! asymptotics, Monte Carlo simulation, and the experiment harness behind the
//! `dstprof` command-line tool.
//!
//! ```
//! use dstprof::{mean_closed, PrecisionContext};
//!
//! let ctx = PrecisionContext::default();
//! let mu = mean_closed(100, 7, &ctx).unwrap();
//! assert!(mu.to_f64() > 30.0);
//! ```

pub mod asymptotics;
pub mod error;
pub mod exact;
pub mod harness;
pub mod limit;
pub mod precision;
pub mod qseries;
pub mod simulator;

pub use asymptotics::{
    central_range, f_saddle, f_saddle_real, f_small_explicit, height_probability_bounds, mean_elementary, predict_height_level,
    predict_levels, predict_saturation_level, saddle_solve, HeightBounds, LevelPredictions, SaddleResult,
};
pub use error::{Error, Result};
pub use exact::{
    internal_mean, internal_mean_exact, mean_closed, mean_closed_exact, poisson_mean, poissonized_variance, recurrence_tables,
    second_moment_closed, unsuccessful_pmf, variance_exact, variance_exact_rational, MomentTable, ProfileKind,
};
pub use harness::{
    clt_experiment, concentration_experiment, profile_table, CltReport, ConcentrationReport, ExperimentKind, ExperimentSpec,
    OutputFormat, ProfileRow, Report,
};
pub use limit::{eval_limit_fn, f_eval, f_eval_real, f_i_eval, g_eval, g_i_eval, p_eval, phi_eval, LimitFn, LimitFnValue};
pub use precision::{BigComplex, BigReal, PrecisionContext};
pub use qseries::{q_finite, q_product, QTable};
pub use simulator::{build_tree, profiles, run_trials, BitSource, DstTree, EmpiricalMoments, ProfileSummary, TrialConfig};
