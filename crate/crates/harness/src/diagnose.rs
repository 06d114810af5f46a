//! The `diagnose` suites: gradient checks, the distance-reduction lemma on a
//! grid, and the fixed and diminishing step-size bounds.

use std::fmt::Write as _;

use divebatch_core::diagnostics::{
    anchor_set, diminishing_step_check, finite_diff_check, fixed_step_bound_check, lemma_monte_carlo,
    BoundCheckConfig, BoundCheckReport, ConvergenceConstants, DiagnosticError, DiminishingCheckConfig, LemmaBatch, LemmaConfig,
    StepSchedule,
};
use divebatch_core::models::{Activation, ModelFamily};
use divebatch_core::rng::{self, Stream};
use divebatch_core::Dataset64;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Grad,
    Lemma,
    Bounds,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Extra `key = value` pairs for the report file.
    pub values: Vec<(&'static str, String)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsReport {
    pub lines: Vec<CheckLine>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn extend(&mut self, other: DiagnosticsReport) {
        self.lines.extend(other.lines);
    }

    /// One `suite.check.key=value` line per value, then `passed=`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let prefix = format!("{}.{}", l.suite, l.name);
            writeln!(out, "{prefix}.passed={}", l.passed).unwrap();
            for (k, v) in &l.values {
                writeln!(out, "{prefix}.{k}={v}").unwrap();
            }
        }
        writeln!(out, "checks={}", self.lines.len()).unwrap();
        writeln!(out, "failed={}", self.lines.iter().filter(|l| !l.passed).count()).unwrap();
        writeln!(out, "passed={}", self.passed()).unwrap();
        out
    }

    pub fn table(&self) -> String {
        let w = self.lines.iter().map(|l| l.suite.len() + l.name.len() + 1).max().unwrap_or(0);
        let mut out = String::new();
        for l in &self.lines {
            let label = format!("{}/{}", l.suite, l.name);
            let verdict = if l.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{label:<w$}  {verdict}  {}", l.detail).unwrap();
        }
        out
    }
}

pub const GRAD_TRIALS: usize = 100;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

pub fn grad_suite(seed: u64) -> Result<DiagnosticsReport, DiagnosticError> {
    let families = [
        ("logistic", ModelFamily::Logistic),
        (
            "mlp_relu",
            ModelFamily::Mlp {
                hidden: 16,
                activation: Activation::Relu,
            },
        ),
        (
            "mlp_tanh",
            ModelFamily::Mlp {
                hidden: 16,
                activation: Activation::Tanh,
            },
        ),
        ("quadratic", ModelFamily::Quadratic),
    ];
    let mut report = DiagnosticsReport::default();
    for (name, family) in families {
        let r = finite_diff_check::<f64>(family, 16, GRAD_TRIALS, GRAD_STEP, GRAD_TOL, seed)?;
        report.lines.push(CheckLine {
            suite: "grad",
            name: name.into(),
            passed: r.passed,
            detail: format!("max rel error {:.3e} over {} trials (tol {:.0e})", r.max_rel_error, r.trials, r.tol),
            values: vec![
                ("trials", r.trials.to_string()),
                ("max_rel_error", r.max_rel_error.to_string()),
                ("tol", r.tol.to_string()),
            ],
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaGrid {
    pub n: usize,
    pub d: usize,
    pub lr: f64,
    pub deltas: [f64; 3],
    pub points: usize,
    pub samples: usize,
}

impl Default for LemmaGrid {
    fn default() -> Self {
        Self {
            n: 256,
            d: 8,
            lr: 0.01,
            deltas: [0.1, 0.5, 1.0],
            points: 5,
            samples: 100_000,
        }
    }
}

pub fn lemma_suite(grid: &LemmaGrid, seed: u64) -> Result<DiagnosticsReport, DiagnosticError> {
    let anchors: Dataset64 = anchor_set(grid.n, grid.d, 1.0, seed)?;
    let mean: Vec<f64> = (0..grid.d)
        .map(|k| (0..grid.n).map(|i| anchors.row(i)[k]).sum::<f64>() / grid.n as f64)
        .collect();
    let spread_sq = ConvergenceConstants::for_quadratic(&anchors).m;
    let mut rng = rng::stream(seed, Stream::Custom(0x7E7A));
    let mut report = DiagnosticsReport::default();
    for p in 0..grid.points {
        // n·Δ = 1 + M/‖θ − θ*‖², so distances of 0.06 to 0.45 anchor
        // deviations give n·Δ between about 5 and 280
        let dir: Vec<f64> = (0..grid.d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = spread_sq.sqrt() * 10f64.powf(rng.random_range(-1.2..=-0.35));
        let theta: Vec<f64> = mean.iter().zip(&dir).map(|(m, u)| m + radius * u / norm).collect();
        for (j, &delta) in grid.deltas.iter().enumerate() {
            let cfg = LemmaConfig {
                lr: grid.lr,
                delta,
                num_samples: grid.samples,
                seed: seed.wrapping_add((p * grid.deltas.len() + j) as u64),
                batch: LemmaBatch::FromDiversity,
            };
            let r = lemma_monte_carlo(&anchors, &theta, &cfg)?;
            let identity_ok = r.identity_rel_error.is_some_and(|e| e <= 1e-12);
            report.lines.push(CheckLine {
                suite: "lemma",
                name: format!("theta{}_delta{delta}", p + 1),
                passed: r.passed && identity_ok,
                detail: format!(
                    "m={} lhs {:.6e} ± {:.1e} vs rhs {:.6e}",
                    r.batch_size, r.empirical_lhs, r.ci_halfwidth, r.bound_rhs
                ),
                values: vec![
                    ("batch_size", r.batch_size.to_string()),
                    ("diversity", r.diversity.map(|v| v.to_string()).unwrap_or_default()),
                    ("identity_rel_error", r.identity_rel_error.map(|v| v.to_string()).unwrap_or_default()),
                    ("empirical_lhs", r.empirical_lhs.to_string()),
                    ("exact_lhs", r.exact_lhs.to_string()),
                    ("bound_rhs", r.bound_rhs.to_string()),
                    ("ci_halfwidth", r.ci_halfwidth.to_string()),
                ],
            });
        }
    }
    // at θ* the diversity is undefined; use an explicit batch
    let cfg = LemmaConfig {
        lr: grid.lr,
        delta: 0.5,
        num_samples: grid.samples,
        seed,
        batch: LemmaBatch::Fixed(4),
    };
    let r = lemma_monte_carlo(&anchors, &mean, &cfg)?;
    report.lines.push(CheckLine {
        suite: "lemma",
        name: "stationary".into(),
        passed: r.passed,
        detail: format!(
            "m={} lhs {:.6e} ± {:.1e} vs rhs {:.6e}",
            r.batch_size, r.empirical_lhs, r.ci_halfwidth, r.bound_rhs
        ),
        values: vec![
            ("batch_size", r.batch_size.to_string()),
            ("empirical_lhs", r.empirical_lhs.to_string()),
            ("exact_lhs", r.exact_lhs.to_string()),
            ("bound_rhs", r.bound_rhs.to_string()),
        ],
    });
    Ok(report)
}

/// Anchor problem for the bound checks: 128 points in `[-0.05, 0.05]^4`,
/// starting point at the corner `(0.05, …, 0.05)`.
pub const BOUNDS_N: usize = 128;
pub const BOUNDS_D: usize = 4;
pub const BOUNDS_SPREAD: f64 = 0.05;
pub const BOUNDS_SEEDS: usize = 64;
pub const FIXED_ALPHAS: [f64; 3] = [0.1, 0.5, 1.0];
pub const FIXED_T: usize = 2000;
pub const DIMINISHING_T: usize = 5000;
pub const DIMINISHING_THRESHOLD: f64 = 1e-3;

fn bound_line(name: String, r: &BoundCheckReport) -> CheckLine {
    let worst = r
        .points
        .iter()
        .map(|p| (p.lhs_mean - p.lhs_ci) - p.rhs)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut values = vec![
        ("violations", r.violations.to_string()),
        ("prefixes", r.points.len().to_string()),
        ("max_lower_minus_rhs", worst.to_string()),
        ("m", r.constants.m.to_string()),
    ];
    let mut detail = format!("{} violations over {} prefixes", r.violations, r.points.len());
    if let (Some(early), Some(last)) = (r.early_weighted_avg, r.final_weighted_avg) {
        values.push(("weighted_avg_t10", early.to_string()));
        values.push(("weighted_avg_t", last.to_string()));
        write!(detail, "; weighted avg {early:.3e} at T/10, {last:.3e} at T").unwrap();
    }
    CheckLine {
        suite: "bounds",
        name,
        passed: r.passed,
        detail,
        values,
    }
}

pub fn bounds_suite(seed: u64) -> Result<DiagnosticsReport, DiagnosticError> {
    let anchors: Dataset64 = anchor_set(BOUNDS_N, BOUNDS_D, BOUNDS_SPREAD, seed)?;
    let theta1 = vec![BOUNDS_SPREAD; BOUNDS_D];
    let mut report = DiagnosticsReport::default();
    for alpha in FIXED_ALPHAS {
        let cfg = BoundCheckConfig {
            iterations: FIXED_T,
            seeds: BOUNDS_SEEDS,
            seed,
        };
        let r = fixed_step_bound_check(&anchors, &theta1, alpha, &cfg)?;
        report.lines.push(bound_line(format!("fixed_alpha{alpha}"), &r));
    }
    let cfg = DiminishingCheckConfig {
        bound: BoundCheckConfig {
            iterations: DIMINISHING_T,
            seeds: BOUNDS_SEEDS,
            seed,
        },
        threshold: DIMINISHING_THRESHOLD,
    };
    let r = diminishing_step_check(&anchors, &theta1, StepSchedule::harmonic(0.5, 0.01), &cfg)?;
    report.lines.push(bound_line("diminishing".into(), &r));
    Ok(report)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<DiagnosticsReport, DiagnosticError> {
    let mut report = DiagnosticsReport::default();
    if matches!(suite, Suite::Grad | Suite::All) {
        report.extend(grad_suite(seed)?);
    }
    if matches!(suite, Suite::Lemma | Suite::All) {
        report.extend(lemma_suite(&LemmaGrid::default(), seed)?);
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        report.extend(bounds_suite(seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lemma_grid_passes() {
        let grid = LemmaGrid {
            n: 32,
            d: 3,
            points: 2,
            samples: 10_000,
            ..LemmaGrid::default()
        };
        let r = lemma_suite(&grid, 1).unwrap();
        assert_eq!(r.lines.len(), 7);
        assert!(r.passed(), "{}", r.table());
    }

    #[test]
    fn report_formats() {
        let r = DiagnosticsReport {
            lines: vec![CheckLine {
                suite: "grad",
                name: "logistic".into(),
                passed: false,
                detail: "x".into(),
                values: vec![("max_rel_error", "0.5".into())],
            }],
        };
        let kv = r.to_key_values();
        assert!(kv.contains("grad.logistic.passed=false\n"));
        assert!(kv.contains("grad.logistic.max_rel_error=0.5\n"));
        assert!(kv.ends_with("passed=false\n"));
        assert!(r.table().contains("grad/logistic  FAIL  x"));
    }
}
