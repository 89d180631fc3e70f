use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dstprof::harness::{self, ExperimentKind, ExperimentSpec, OutputFormat};
use dstprof::{Error, LimitFn};

const BUILD: &str = env!("DSTPROF_BUILD");

/// Exact, asymptotic and simulated profile statistics of random digital search trees.
#[derive(Parser, Debug)]
#[command(name = "dstprof", version = BUILD)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Output format.
    #[arg(long, global = true, value_parser = ["csv", "json"])]
    format: Option<String>,

    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// JSON file of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Working precision in bits.
    #[arg(long, global = true)]
    prec: Option<u32>,

    /// Absolute series tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mean of the external profile, E(B_{n,k}).
    Mean {
        #[command(flatten)]
        nk: NK,
        /// Also print the exact rational value.
        #[arg(long)]
        exact: bool,
    },
    /// Variance of the external profile, Var(B_{n,k}).
    Variance {
        #[command(flatten)]
        nk: NK,
        /// Also print the exact rational value.
        #[arg(long)]
        exact: bool,
    },
    /// One of the limit functions F, FI, G, GI, P at a real argument.
    Limitfn {
        #[arg(long = "fn", value_parser = parse_limit_fn)]
        function: Option<LimitFn>,
        #[arg(long)]
        x: Option<String>,
        /// Derivative order (F only).
        #[arg(long)]
        deriv: Option<u32>,
    },
    /// Saddle point and saddle-point approximation of F^{(m)}(x).
    Saddle {
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        m: Option<u32>,
    },
    /// Predicted central range, height level and saturation level.
    Predict {
        #[arg(long)]
        n: Option<u64>,
    },
    /// Monte Carlo profiles, heights, saturation levels and search depths.
    Simulate {
        #[command(flatten)]
        mc: MonteCarlo,
        /// Comma-separated subset of profile,height,saturation,depth.
        #[arg(long)]
        stats: Option<String>,
    },
    /// Normal approximation check for the standardized B_{n,k}.
    Clt {
        #[command(flatten)]
        mc: MonteCarlo,
        #[arg(long)]
        k: Option<u32>,
    },
    /// Height and saturation concentration against the predicted levels.
    Concentration {
        #[command(flatten)]
        mc: MonteCarlo,
    },
    /// Exact, Poissonized and limit-function moments for a range of levels.
    Table {
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        kmin: Option<u32>,
        #[arg(long)]
        kmax: Option<u32>,
    },
}

#[derive(Args, Debug)]
struct NK {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    k: Option<u32>,
}

#[derive(Args, Debug)]
struct MonteCarlo {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_limit_fn(s: &str) -> Result<LimitFn, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Cli {
    fn spec(&self) -> ExperimentSpec {
        let mut s = ExperimentSpec {
            prec: self.prec,
            tol: self.tol,
            format: self.format.as_deref().map(|f| f.parse().expect("clap restricts the values")),
            out: self.out.as_ref().map(|p| p.display().to_string()),
            ..Default::default()
        };
        let flag = |b: bool| b.then_some(true);
        let mc = |kind, m: &MonteCarlo, s: &mut ExperimentSpec| {
            s.kind = Some(kind);
            s.n = m.n;
            s.trials = m.trials;
            s.seed = m.seed;
        };
        match &self.command {
            None => {}
            Some(Command::Mean { nk, exact }) => {
                s.kind = Some(ExperimentKind::Mean);
                (s.n, s.k, s.exact) = (nk.n, nk.k, flag(*exact));
            }
            Some(Command::Variance { nk, exact }) => {
                s.kind = Some(ExperimentKind::Variance);
                (s.n, s.k, s.exact) = (nk.n, nk.k, flag(*exact));
            }
            Some(Command::Limitfn { function, x, deriv }) => {
                s.kind = Some(ExperimentKind::Limitfn);
                (s.function, s.x, s.deriv) = (*function, x.clone(), *deriv);
            }
            Some(Command::Saddle { x, m }) => {
                s.kind = Some(ExperimentKind::Saddle);
                (s.x, s.m) = (x.clone(), *m);
            }
            Some(Command::Predict { n }) => {
                s.kind = Some(ExperimentKind::Predict);
                s.n = *n;
            }
            Some(Command::Simulate { mc: m, stats }) => {
                mc(ExperimentKind::Simulate, m, &mut s);
                s.stats = stats.clone();
            }
            Some(Command::Clt { mc: m, k }) => {
                mc(ExperimentKind::Clt, m, &mut s);
                s.k = *k;
            }
            Some(Command::Concentration { mc: m }) => mc(ExperimentKind::Concentration, m, &mut s),
            Some(Command::Table { n, kmin, kmax }) => {
                s.kind = Some(ExperimentKind::ProfileTable);
                (s.n, s.kmin, s.kmax) = (*n, *kmin, *kmax);
            }
        }
        s
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::DegenerateVariance { .. } | Error::InvalidSpec(_) | Error::BitExhausted { .. } => 2,
        Error::PrecisionExhausted { .. } | Error::NoConvergence { .. } => 3,
        Error::CapExceeded { .. } => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let from_cli = cli.spec();
    let spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?.overlay(&from_cli),
        None => from_cli,
    };
    let report = harness::run(&spec, BUILD)?;
    if let Some(w) = report.summary.get("warnings").and_then(|v| v.as_str()) {
        eprintln!("warning: {w}");
    }
    let text = report.render(spec.format.unwrap_or(OutputFormat::Csv));
    match &spec.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::InvalidSpec(format!("cannot write {path}: {e}"))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Domain("x".into())), 2);
        assert_eq!(exit_code(&Error::DegenerateVariance { n: 1, k: 1 }), 2);
        assert_eq!(exit_code(&Error::PrecisionExhausted { doublings: 16, bits: 1 << 20 }), 3);
        assert_eq!(exit_code(&Error::NoConvergence { iterations: 200, residual: 1.0 }), 3);
        assert_eq!(exit_code(&Error::CapExceeded { what: "t", n: 300, cap: 200 }), 4);
    }

    #[test]
    fn command_line_builds_a_spec() {
        let cli = Cli::parse_from(["dstprof", "clt", "--n", "64", "--k", "6", "--trials", "10", "--seed", "3", "--format", "json"]);
        let s = cli.spec();
        assert_eq!(s.kind, Some(ExperimentKind::Clt));
        assert_eq!((s.n, s.k, s.trials, s.seed), (Some(64), Some(6), Some(10), Some(3)));
        assert_eq!(s.format, Some(OutputFormat::Json));
    }
}
