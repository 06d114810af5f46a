//! Empirical checks of gradient code and of the SGD convergence results.
//!
//! The bound checks run on the quadratic model `ℓ(θ; z) = ½‖θ − z‖²` over a
//! set of anchor points, where every constant of the moment assumptions is
//! available in closed form:
//!
//! * `∇L(θ) = θ − z̄`, so the Lipschitz constant is `L = 1`;
//! * a single uniformly drawn sample gives an unbiased gradient, so
//!   `μ = μ_G = 1`;
//! * its variance `E‖g − ∇L‖² = mean ‖z_i − z̄‖²` does not depend on θ, so
//!   `M` is that mean squared deviation, `M_V = 0` and `M_G = M_V + μ_G² = 1`;
//! * `L_inf = min L = M / 2`.
//!
//! Expectations are estimated over seed ensembles; a check fails only when
//! the empirical mean exceeds the bound by more than its 95% confidence
//! half-width.

use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::models::{AnyModel, Activation, Model, ModelError, ModelFamily, QuadraticModel, Reduction};
use crate::optim::{exact_gradient_diversity, OptimError};
use crate::rng::{self, Stream};
use crate::Scalar;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum DiagnosticError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("step-size sequence violates the Robbins–Monro conditions: {0}")]
    RobbinsMonro(String),
    #[error("mean gradient vanishes at θ_t (squared norm {0:e}); diversity is undefined")]
    DegenerateDiversity(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DiagnosticError {
    DiagnosticError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// `n` anchor points uniform on `[-spread, spread]^d`, all in the training
/// split.
pub fn anchor_set<T: Scalar>(n: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset<T>, DiagnosticError> {
    if n == 0 || d == 0 {
        return Err(invalid("n", "anchor set needs n ≥ 1 and d ≥ 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(invalid("spread", format!("must be positive, got {spread}")));
    }
    let mut rng = rng::stream(seed, Stream::Custom(0xA9C4));
    let pts = (0..n * d)
        .map(|_| T::of(rng.random_range(-spread..=spread)))
        .collect();
    Ok(Dataset::from_points(pts, d).expect("shape is consistent"))
}

fn rows_f64<T: Scalar>(data: &Dataset<T>) -> Vec<Vec<f64>> {
    (0..data.len())
        .map(|i| data.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

fn mean_row(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, &v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Constants of the smoothness and moment assumptions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConstants {
    pub lipschitz: f64,
    pub mu: f64,
    pub mu_g: f64,
    pub m: f64,
    pub m_v: f64,
    pub m_g: f64,
    pub loss_inf: f64,
}

impl ConvergenceConstants {
    /// Closed-form constants for single-sample SGD on the quadratic over
    /// `anchors` (see the module docs).
    pub fn for_quadratic<T: Scalar>(anchors: &Dataset<T>) -> Self {
        let rows = rows_f64(anchors);
        let mean = mean_row(&rows);
        let m = rows.iter().map(|r| dist_sq(r, &mean)).sum::<f64>() / rows.len() as f64;
        let (mu, mu_g, m_v) = (1.0, 1.0, 0.0);
        Self {
            lipschitz: 1.0,
            mu,
            mu_g,
            m,
            m_v,
            m_g: m_v + mu_g * mu_g,
            loss_inf: 0.5 * m,
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosticError> {
        if !(self.mu > 0.0 && self.mu_g >= self.mu) {
            return Err(invalid("mu", "need μ_G ≥ μ > 0"));
        }
        if self.m < 0.0 || self.m_v < 0.0 {
            return Err(invalid("m", "variance bounds must be nonnegative"));
        }
        if self.m_g < self.mu * self.mu {
            return Err(invalid("m_g", "need M_G ≥ μ²"));
        }
        Ok(())
    }

    /// Largest admissible fixed step, `μ / (L M_G)`.
    pub fn max_step(&self) -> f64 {
        self.mu / (self.lipschitz * self.m_g)
    }
}

/// Mean of `½‖θ − z_i‖²` over the anchors.
fn quadratic_objective(rows: &[Vec<f64>], theta: &[f64]) -> f64 {
    rows.iter().map(|r| 0.5 * dist_sq(theta, r)).sum::<f64>() / rows.len() as f64
}

// ---------------------------------------------------------------------------
// finite differences

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub family: ModelFamily,
    pub trials: usize,
    /// Normwise relative error per trial.
    pub errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of the per-sample loss.
pub fn central_difference<T: Scalar, M: Model<T>>(model: &M, x: &[T], y: u8, step: T) -> Vec<f64> {
    let mut probe = model.clone();
    let two_h = (step + step).to_f64_lossy();
    (0..model.num_params())
        .map(|k| {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + step;
            let up = probe.loss_unchecked(x, y).to_f64_lossy();
            probe.params_mut()[k] = orig - step;
            let down = probe.loss_unchecked(x, y).to_f64_lossy();
            probe.params_mut()[k] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Compares analytic and central-difference gradients on `trials` random
/// (model, sample) pairs with parameters and features uniform on `[-1, 1]`.
///
/// For ReLU MLPs, draws whose hidden pre-activations lie within the stencil
/// radius of the kink are redrawn: the loss is not differentiable there.
pub fn finite_diff_check<T: Scalar>(
    family: ModelFamily,
    d: usize,
    trials: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<FiniteDiffReport, DiagnosticError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("step", format!("must be positive, got {step}")));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {tol}")));
    }
    if d == 0 {
        return Err(invalid("d", "must be positive"));
    }
    let mut rng = rng::stream(seed, Stream::Custom(0xFD));
    let template: AnyModel<T> = AnyModel::init(family, d, seed);
    let p = template.num_params();
    let mut errors = Vec::with_capacity(trials);
    while errors.len() < trials {
        let params: Vec<T> = (0..p).map(|_| T::of(rng.random_range(-1.0..=1.0))).collect();
        let x: Vec<T> = (0..d).map(|_| T::of(rng.random_range(-1.0..=1.0))).collect();
        let y = u8::from(rng.random_bool(0.5));
        let model = template.with_params(params)?;
        if let AnyModel::Mlp(m) = &model {
            if m.activation() == Activation::Relu {
                let radius = 4.0 * step * (1.0 + x.iter().map(|v| v.to_f64_lossy().abs()).fold(0.0, f64::max));
                if m.hidden_preactivations(&x)
                    .iter()
                    .any(|z| z.to_f64_lossy().abs() <= radius)
                {
                    continue;
                }
            }
        }
        let mut analytic = vec![T::zero(); p];
        model.loss_grad_unchecked(&x, y, &mut analytic);
        let analytic: Vec<f64> = analytic.iter().map(|v| v.to_f64_lossy()).collect();
        let numeric = central_difference(&model, &x, y, T::of(step));
        errors.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(FiniteDiffReport {
        family,
        trials,
        passed: errors.iter().all(|&e| e <= tol),
        errors,
        max_rel_error,
        tol,
    })
}

// ---------------------------------------------------------------------------
// distance-reduction lemma

/// Batch size used by [`lemma_monte_carlo`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LemmaBatch {
    /// `⌊δ · n · Δ_S(θ_t)⌋ + 1`.
    FromDiversity,
    /// Explicit size, e.g. at a stationary point where Δ_S is unbounded.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaConfig {
    pub lr: f64,
    pub delta: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub batch: LemmaBatch,
}

/// Largest batch the lemma check will draw.
pub const LEMMA_MAX_BATCH: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheckReport {
    pub batch_size: usize,
    /// `Δ_S(θ_t)`, absent when a fixed batch was requested at a stationary
    /// point.
    pub diversity: Option<f64>,
    /// Relative mismatch of `n Δ_S = M² / G`.
    pub identity_rel_error: Option<f64>,
    pub empirical_lhs: f64,
    /// Closed-form `E‖θ^{t+1} − θ*‖²` under with-replacement sampling.
    pub exact_lhs: f64,
    pub bound_rhs: f64,
    pub ci_halfwidth: f64,
    pub passed: bool,
}

/// Monte Carlo check of
/// `E‖θ^{t+1} − θ*‖² ≤ ‖θ_t − θ*‖² − m (2η⟨∇L_S(θ_t), θ_t − θ*⟩ − (1+δ) η² M²(θ_t))`
/// for one summed-gradient step on a batch of `m` anchors drawn uniformly
/// with replacement.
pub fn lemma_monte_carlo<T: Scalar>(
    anchors: &Dataset<T>,
    theta_t: &[T],
    cfg: &LemmaConfig,
) -> Result<LemmaCheckReport, DiagnosticError> {
    if cfg.num_samples < 2 {
        return Err(invalid("num_samples", format!("need at least 2 samples, got {}", cfg.num_samples)));
    }
    if !(cfg.delta > 0.0 && cfg.delta.is_finite()) {
        return Err(invalid("delta", format!("must be positive, got {}", cfg.delta)));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(invalid("lr", format!("must be positive, got {}", cfg.lr)));
    }
    if theta_t.len() != anchors.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: anchors.dim(),
            got: theta_t.len(),
        }
        .into());
    }
    let rows = rows_f64(anchors);
    let n = rows.len();
    let theta: Vec<f64> = theta_t.iter().map(|v| v.to_f64_lossy()).collect();
    let optimum = mean_row(&rows);
    let grads: Vec<Vec<f64>> = rows
        .iter()
        .map(|z| theta.iter().zip(z).map(|(t, z)| t - z).collect())
        .collect();
    let m2 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
    let mean_grad = mean_row(&grads);
    let g = mean_grad.iter().map(|v| v * v).sum::<f64>();
    let err0: Vec<f64> = theta.iter().zip(&optimum).map(|(a, b)| a - b).collect();
    let inner: f64 = mean_grad.iter().zip(&err0).map(|(a, b)| a * b).sum();
    let dist0 = err0.iter().map(|v| v * v).sum::<f64>();

    let model = QuadraticModel::new(theta_t.to_vec());
    let all: Vec<usize> = (0..n).collect();
    let (diversity, identity_rel_error) = match exact_gradient_diversity(&model, anchors, &all, Reduction::Deterministic) {
        Ok(div) => {
            let div = div.to_f64_lossy();
            let lhs = n as f64 * div;
            let rhs = m2 / g;
            (Some(div), Some((lhs - rhs).abs() / rhs.abs()))
        }
        Err(OptimError::DegenerateGradient { .. }) => (None, None),
        Err(e) => return Err(e.into()),
    };
    let batch = match (cfg.batch, diversity) {
        (LemmaBatch::Fixed(m), _) if m >= 1 => m,
        (LemmaBatch::Fixed(_), _) => return Err(invalid("batch", "fixed batch must be positive")),
        (LemmaBatch::FromDiversity, Some(div)) => {
            let target = (cfg.delta * n as f64 * div).floor();
            if target > LEMMA_MAX_BATCH {
                return Err(DiagnosticError::DegenerateDiversity(g));
            }
            target as usize + 1
        }
        (LemmaBatch::FromDiversity, None) => return Err(DiagnosticError::DegenerateDiversity(g)),
    };

    let mut rng = rng::stream(cfg.seed, Stream::Custom(0x1E44A));
    let d = theta.len();
    let eta = cfg.lr;
    let mut step = vec![0.0; d];
    let (mut mean, mut m2_acc) = (0.0f64, 0.0f64);
    for k in 0..cfg.num_samples {
        step.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..batch {
            let j = rng.random_range(0..n);
            for (s, gj) in step.iter_mut().zip(&grads[j]) {
                *s += gj;
            }
        }
        let v: f64 = err0.iter().zip(&step).map(|(e, s)| (e - eta * s).powi(2)).sum();
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2_acc += delta * (v - mean);
    }
    let var = m2_acc / (cfg.num_samples - 1) as f64;
    let ci_halfwidth = Z95 * (var / cfg.num_samples as f64).sqrt();
    let mb = batch as f64;
    let bound_rhs = dist0 - mb * (2.0 * eta * inner - (1.0 + cfg.delta) * eta * eta * m2);
    let exact_lhs = dist0 - 2.0 * eta * mb * inner + eta * eta * (mb * m2 + mb * (mb - 1.0) * g);
    Ok(LemmaCheckReport {
        batch_size: batch,
        diversity,
        identity_rel_error,
        empirical_lhs: mean,
        exact_lhs,
        bound_rhs,
        ci_halfwidth,
        passed: mean <= bound_rhs + ci_halfwidth,
    })
}

// ---------------------------------------------------------------------------
// convergence bounds

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    /// Prefix length `T'`.
    pub t: usize,
    /// Seed-ensemble mean of the bounded quantity.
    pub lhs_mean: f64,
    pub lhs_ci: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckReport {
    pub constants: ConvergenceConstants,
    pub points: Vec<BoundPoint>,
    /// Prefixes where `lhs_mean − lhs_ci > rhs`, plus failed trend and
    /// threshold conditions for the diminishing-step check.
    pub violations: usize,
    pub passed: bool,
    /// Weighted average `(1/A_T) Σ α_t ‖∇L‖²` at `T/10` and `T`
    /// (diminishing-step check only).
    pub early_weighted_avg: Option<f64>,
    pub final_weighted_avg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheckConfig {
    pub iterations: usize,
    pub seeds: usize,
    pub seed: u64,
}

/// Per-seed sequence of `‖∇L(θ_t)‖²`, `t = 1..=T`, for single-sample SGD
/// with step sizes `alphas`.
fn sgd_grad_norms(rows: &[Vec<f64>], mean: &[f64], theta1: &[f64], alphas: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Stream::Custom(0xB0));
    let mut theta = theta1.to_vec();
    let n = rows.len();
    alphas
        .iter()
        .map(|&a| {
            let gn = dist_sq(&theta, mean);
            let z = &rows[rng.random_range(0..n)];
            for (t, zi) in theta.iter_mut().zip(z) {
                *t -= a * (*t - zi);
            }
            gn
        })
        .collect()
}

/// Mean and 95% half-width across seeds of `per_seed[s][k]` for each `k`.
fn ensemble_stats(per_seed: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let s = per_seed.len() as f64;
    let len = per_seed[0].len();
    (0..len)
        .map(|k| {
            let mean = per_seed.iter().map(|v| v[k]).sum::<f64>() / s;
            if per_seed.len() < 2 {
                return (mean, 0.0);
            }
            let var = per_seed.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (s - 1.0);
            (mean, Z95 * (var / s).sqrt())
        })
        .collect()
}

fn run_ensemble(
    rows: &[Vec<f64>],
    mean: &[f64],
    theta1: &[f64],
    alphas: &[f64],
    cfg: &BoundCheckConfig,
) -> Vec<Vec<f64>> {
    (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| sgd_grad_norms(rows, mean, theta1, alphas, cfg.seed.wrapping_add(s)))
        .collect()
}

fn validate_bound_inputs<T: Scalar>(
    anchors: &Dataset<T>,
    theta1: &[T],
    cfg: &BoundCheckConfig,
) -> Result<(), DiagnosticError> {
    if cfg.iterations == 0 {
        return Err(invalid("iterations", "need T ≥ 1"));
    }
    if cfg.seeds == 0 {
        return Err(invalid("seeds", "need at least one seed"));
    }
    if theta1.len() != anchors.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: anchors.dim(),
            got: theta1.len(),
        }
        .into());
    }
    Ok(())
}

/// Checks `E[(1/T') Σ_{t≤T'} ‖∇L(θ_t)‖²] ≤ αLM/μ + 2(L(θ_1) − L_inf)/(T'μα)`
/// at every prefix `T' ≤ T` for single-sample SGD with fixed step `alpha`.
pub fn fixed_step_bound_check<T: Scalar>(
    anchors: &Dataset<T>,
    theta1: &[T],
    alpha: f64,
    cfg: &BoundCheckConfig,
) -> Result<BoundCheckReport, DiagnosticError> {
    validate_bound_inputs(anchors, theta1, cfg)?;
    let c = ConvergenceConstants::for_quadratic(anchors);
    c.validate()?;
    if !(alpha > 0.0 && alpha <= c.max_step()) {
        return Err(invalid(
            "alpha",
            format!("need 0 < α ≤ μ/(L·M_G) = {}, got {alpha}", c.max_step()),
        ));
    }
    let rows = rows_f64(anchors);
    let mean = mean_row(&rows);
    let theta1: Vec<f64> = theta1.iter().map(|v| v.to_f64_lossy()).collect();
    let gap = quadratic_objective(&rows, &theta1) - c.loss_inf;

    let alphas = vec![alpha; cfg.iterations];
    let per_seed: Vec<Vec<f64>> = run_ensemble(&rows, &mean, &theta1, &alphas, cfg)
        .into_iter()
        .map(|norms| {
            let mut sum = 0.0;
            norms
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    sum += v;
                    sum / (k + 1) as f64
                })
                .collect()
        })
        .collect();
    let points: Vec<BoundPoint> = ensemble_stats(&per_seed)
        .into_iter()
        .enumerate()
        .map(|(k, (lhs_mean, lhs_ci))| {
            let t = (k + 1) as f64;
            BoundPoint {
                t: k + 1,
                lhs_mean,
                lhs_ci,
                rhs: alpha * c.lipschitz * c.m / c.mu + 2.0 * gap / (t * c.mu * alpha),
            }
        })
        .collect();
    let violations = points.iter().filter(|p| p.lhs_mean - p.lhs_ci > p.rhs).count();
    Ok(BoundCheckReport {
        constants: c,
        points,
        violations,
        passed: violations == 0,
        early_weighted_avg: None,
        final_weighted_avg: None,
    })
}

/// `α_t = α₀ / (1 + c·t)^power`, `t = 1, 2, …`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub alpha0: f64,
    pub decay: f64,
    pub power: f64,
}

impl StepSchedule {
    pub fn harmonic(alpha0: f64, decay: f64) -> Self {
        Self {
            alpha0,
            decay,
            power: 1.0,
        }
    }

    pub fn step(&self, t: usize) -> f64 {
        self.alpha0 / (1.0 + self.decay * t as f64).powf(self.power)
    }

    /// `Σα_t = ∞` needs `power ≤ 1`; `Σα_t² < ∞` needs `power > ½`.
    pub fn check_robbins_monro(&self) -> Result<(), DiagnosticError> {
        if self.decay <= 0.0 {
            return Err(DiagnosticError::RobbinsMonro(
                "constant steps have a divergent sum of squares".into(),
            ));
        }
        if self.power <= 0.5 {
            return Err(DiagnosticError::RobbinsMonro(format!(
                "exponent {} ≤ 1/2 makes Σα_t² diverge",
                self.power
            )));
        }
        if self.power > 1.0 {
            return Err(DiagnosticError::RobbinsMonro(format!(
                "exponent {} > 1 makes Σα_t converge",
                self.power
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiminishingCheckConfig {
    pub bound: BoundCheckConfig,
    /// The weighted average at `T` must fall below this.
    pub threshold: f64,
}

/// Checks SGD with Robbins–Monro steps: at every prefix
/// `Σ α_t E‖∇L(θ_t)‖² ≤ (LM/μ) Σ α_t² + 2(L(θ_1) − L_inf)/μ`, and the
/// weighted average `(1/A_T) Σ α_t ‖∇L‖²` is below `threshold` at `T` and
/// smaller than at `T/10`.
///
/// A schedule with `decay == 0` is a fixed step and is delegated to
/// [`fixed_step_bound_check`].
pub fn diminishing_step_check<T: Scalar>(
    anchors: &Dataset<T>,
    theta1: &[T],
    schedule: StepSchedule,
    cfg: &DiminishingCheckConfig,
) -> Result<BoundCheckReport, DiagnosticError> {
    if schedule.decay == 0.0 {
        return fixed_step_bound_check(anchors, theta1, schedule.alpha0, &cfg.bound);
    }
    if schedule.decay < 0.0 || !(schedule.alpha0 > 0.0) {
        return Err(invalid("schedule", "need α₀ > 0 and c ≥ 0"));
    }
    schedule.check_robbins_monro()?;
    validate_bound_inputs(anchors, theta1, &cfg.bound)?;
    let c = ConvergenceConstants::for_quadratic(anchors);
    c.validate()?;
    // the sequence decreases, so its first term is the largest
    if schedule.step(1) > c.max_step() {
        return Err(invalid(
            "alpha0",
            format!("α_1 = {} exceeds μ/(L·M_G) = {}", schedule.step(1), c.max_step()),
        ));
    }
    let bcfg = &cfg.bound;
    let rows = rows_f64(anchors);
    let mean = mean_row(&rows);
    let theta1: Vec<f64> = theta1.iter().map(|v| v.to_f64_lossy()).collect();
    let gap = quadratic_objective(&rows, &theta1) - c.loss_inf;
    let alphas: Vec<f64> = (1..=bcfg.iterations).map(|t| schedule.step(t)).collect();

    let weighted_sums: Vec<Vec<f64>> = run_ensemble(&rows, &mean, &theta1, &alphas, bcfg)
        .into_iter()
        .map(|norms| {
            let mut sum = 0.0;
            norms
                .iter()
                .zip(&alphas)
                .map(|(v, a)| {
                    sum += a * v;
                    sum
                })
                .collect()
        })
        .collect();
    let mut a_sum = 0.0;
    let mut a2_sum = 0.0;
    let points: Vec<BoundPoint> = ensemble_stats(&weighted_sums)
        .into_iter()
        .zip(&alphas)
        .enumerate()
        .map(|(k, ((lhs_mean, lhs_ci), a))| {
            a_sum += a;
            a2_sum += a * a;
            BoundPoint {
                t: k + 1,
                lhs_mean,
                lhs_ci,
                rhs: c.lipschitz * c.m / c.mu * a2_sum + 2.0 * gap / c.mu,
            }
        })
        .collect();
    let mut violations = points.iter().filter(|p| p.lhs_mean - p.lhs_ci > p.rhs).count();

    let a_prefix: Vec<f64> = alphas
        .iter()
        .scan(0.0, |s, a| {
            *s += a;
            Some(*s)
        })
        .collect();
    let weighted_avg = |t: usize| points[t - 1].lhs_mean / a_prefix[t - 1];
    let t_final = bcfg.iterations;
    let t_early = (t_final / 10).max(1);
    let (early, last) = (weighted_avg(t_early), weighted_avg(t_final));
    if !(last < early) {
        violations += 1;
    }
    if !(last < cfg.threshold) {
        violations += 1;
    }
    Ok(BoundCheckReport {
        constants: c,
        points,
        violations,
        passed: violations == 0,
        early_weighted_avg: Some(early),
        final_weighted_avg: Some(last),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::per_sample_grad;

    fn problem() -> Dataset<f64> {
        anchor_set(64, 3, 1.0, 17).unwrap()
    }

    #[test]
    fn quadratic_constants_match_definitions() {
        let ds = problem();
        let c = ConvergenceConstants::for_quadratic(&ds);
        let rows = rows_f64(&ds);
        let mean = mean_row(&rows);
        let mut rng = rng::stream(1, Stream::Custom(9));
        for _ in 0..20 {
            let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let model = QuadraticModel::new(theta.clone());
            // exact expectation of a single-sample gradient: average over all rows
            let grads: Vec<Vec<f64>> = (0..ds.len())
                .map(|i| per_sample_grad(&model, ds.row(i), 0).unwrap())
                .collect();
            let eg = mean_row(&grads);
            let full: Vec<f64> = theta.iter().zip(&mean).map(|(t, m)| t - m).collect();
            let full_sq: f64 = full.iter().map(|v| v * v).sum();
            let inner: f64 = eg.iter().zip(&full).map(|(a, b)| a * b).sum();
            assert!(inner >= c.mu * full_sq * (1.0 - 1e-12));
            let eg_norm = eg.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(eg_norm <= c.mu_g * full_sq.sqrt() * (1.0 + 1e-12));
            let var = grads.iter().map(|g| dist_sq(g, &eg)).sum::<f64>() / ds.len() as f64;
            assert!(var <= (c.m + c.m_v * full_sq) * (1.0 + 1e-12));
            assert!((var - c.m).abs() <= 1e-12 * c.m);
            // Lipschitz: ∇L(θ) − ∇L(θ') = θ − θ'
            let other: Vec<f64> = theta.iter().map(|t| t + 0.3).collect();
            let g2: Vec<f64> = other.iter().zip(&mean).map(|(t, m)| t - m).collect();
            assert!(dist_sq(&full, &g2).sqrt() <= c.lipschitz * dist_sq(&theta, &other).sqrt() * (1.0 + 1e-12));
            assert!(quadratic_objective(&rows, &theta) >= c.loss_inf - 1e-12);
        }
        assert!((quadratic_objective(&rows, &mean) - c.loss_inf).abs() < 1e-12);
        assert_eq!(c.m_g, 1.0);
        assert_eq!(c.max_step(), 1.0);
    }

    #[test]
    fn finite_differences_on_quadratic_are_near_exact() {
        let r = finite_diff_check::<f64>(ModelFamily::Quadratic, 5, 50, 1e-5, 1e-5, 3).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn finite_difference_parameter_errors() {
        assert!(finite_diff_check::<f64>(ModelFamily::Logistic, 3, 5, 0.0, 1e-5, 0).is_err());
        assert!(finite_diff_check::<f64>(ModelFamily::Logistic, 3, 5, 1e-5, 0.0, 0).is_err());
    }

    #[test]
    fn lemma_at_stationary_point() {
        let ds = problem();
        let rows = rows_f64(&ds);
        let theta = mean_row(&rows);
        let cfg = LemmaConfig {
            lr: 0.01,
            delta: 0.5,
            num_samples: 20_000,
            seed: 2,
            batch: LemmaBatch::Fixed(4),
        };
        let r = lemma_monte_carlo(&ds, &theta, &cfg).unwrap();
        assert!(r.passed);
        // LHS = η² E‖Σ g_j‖² = η² m M² when the mean gradient is zero
        let c = ConvergenceConstants::for_quadratic(&ds);
        assert!((r.exact_lhs - 1e-4 * 4.0 * c.m).abs() < 1e-12);
        assert!((r.empirical_lhs - r.exact_lhs).abs() <= 3.0 * r.ci_halfwidth);

        let from_div = LemmaConfig {
            batch: LemmaBatch::FromDiversity,
            ..cfg
        };
        let r = lemma_monte_carlo(&ds, &theta, &from_div);
        assert!(matches!(r, Err(DiagnosticError::DegenerateDiversity(_))));
    }

    #[test]
    fn lemma_monte_carlo_agrees_with_closed_form() {
        let ds = problem();
        let theta = vec![0.4, -0.3, 0.9];
        let cfg = LemmaConfig {
            lr: 0.05,
            delta: 1.0,
            num_samples: 50_000,
            seed: 4,
            batch: LemmaBatch::FromDiversity,
        };
        let r = lemma_monte_carlo(&ds, &theta, &cfg).unwrap();
        assert!(r.passed);
        assert!(r.identity_rel_error.unwrap() <= 1e-12);
        assert!((r.empirical_lhs - r.exact_lhs).abs() <= 2.0 * r.ci_halfwidth);
        assert!(r.exact_lhs <= r.bound_rhs + 1e-15);
        let err = lemma_monte_carlo(&ds, &theta, &LemmaConfig { num_samples: 0, ..cfg });
        assert!(matches!(err, Err(DiagnosticError::InvalidParameter { field: "num_samples", .. })));
    }

    /// `E‖e_{t+1}‖² = (1−α_t)² E‖e_t‖² + α_t² M`.
    fn exact_grad_norms(e1: f64, m: f64, alphas: &[f64]) -> Vec<f64> {
        let mut e = e1;
        alphas
            .iter()
            .map(|a| {
                let cur = e;
                e = (1.0 - a).powi(2) * e + a * a * m;
                cur
            })
            .collect()
    }

    #[test]
    fn fixed_step_matches_exact_expectation() {
        let ds = problem();
        let theta1 = vec![2.0, -1.0, 0.5];
        let cfg = BoundCheckConfig {
            iterations: 300,
            seeds: 64,
            seed: 5,
        };
        let r = fixed_step_bound_check(&ds, &theta1, 0.3, &cfg).unwrap();
        assert!(r.passed);
        let rows = rows_f64(&ds);
        let e1 = dist_sq(&theta1, &mean_row(&rows));
        let exact = exact_grad_norms(e1, r.constants.m, &vec![0.3; 300]);
        let avg_exact: f64 = exact.iter().sum::<f64>() / 300.0;
        let p = r.points.last().unwrap();
        assert!((p.lhs_mean - avg_exact).abs() <= 2.5 * p.lhs_ci, "{} vs {avg_exact}", p.lhs_mean);
        // T = 1: LHS is ‖∇L(θ_1)‖² exactly
        assert!((r.points[0].lhs_mean - e1).abs() < 1e-12);
        assert!((r.points[0].rhs - (0.3 * r.constants.m + e1 / 0.3)).abs() < 1e-9);
    }

    #[test]
    fn fixed_step_rejects_large_alpha() {
        let ds = problem();
        let cfg = BoundCheckConfig {
            iterations: 10,
            seeds: 2,
            seed: 0,
        };
        assert!(fixed_step_bound_check(&ds, &[0.0; 3], 1.0, &cfg).is_ok());
        assert!(matches!(
            fixed_step_bound_check(&ds, &[0.0; 3], 1.01, &cfg),
            Err(DiagnosticError::InvalidParameter { field: "alpha", .. })
        ));
    }

    #[test]
    fn robbins_monro_preconditions() {
        let ds = problem();
        let cfg = DiminishingCheckConfig {
            bound: BoundCheckConfig {
                iterations: 100,
                seeds: 4,
                seed: 0,
            },
            threshold: 1.0,
        };
        let sqrt = StepSchedule {
            alpha0: 0.5,
            decay: 1.0,
            power: 0.5,
        };
        assert!(matches!(
            diminishing_step_check(&ds, &[0.0; 3], sqrt, &cfg),
            Err(DiagnosticError::RobbinsMonro(_))
        ));
        let fast = StepSchedule { power: 2.0, ..sqrt };
        assert!(matches!(
            diminishing_step_check(&ds, &[0.0; 3], fast, &cfg),
            Err(DiagnosticError::RobbinsMonro(_))
        ));
        // c = 0 is the fixed-step check
        let fixed = diminishing_step_check(&ds, &[0.0; 3], StepSchedule::harmonic(0.5, 0.0), &cfg).unwrap();
        let direct = fixed_step_bound_check(&ds, &[0.0; 3], 0.5, &cfg.bound).unwrap();
        assert_eq!(fixed, direct);
        assert!(diminishing_step_check(&ds, &[0.0; 3], StepSchedule::harmonic(2.0, 0.01), &cfg).is_err());
    }

    #[test]
    fn diminishing_weighted_average_matches_exact_expectation() {
        let ds = anchor_set::<f64>(128, 4, 0.05, 1).unwrap();
        let theta1 = vec![0.05; 4];
        let sched = StepSchedule::harmonic(0.5, 0.01);
        let cfg = DiminishingCheckConfig {
            bound: BoundCheckConfig {
                iterations: 2000,
                seeds: 32,
                seed: 3,
            },
            threshold: 1e-3,
        };
        let r = diminishing_step_check(&ds, &theta1, sched, &cfg).unwrap();
        let rows = rows_f64(&ds);
        let alphas: Vec<f64> = (1..=2000).map(|t| sched.step(t)).collect();
        let exact = exact_grad_norms(dist_sq(&theta1, &mean_row(&rows)), r.constants.m, &alphas);
        let want: f64 = exact.iter().zip(&alphas).map(|(e, a)| e * a).sum::<f64>() / alphas.iter().sum::<f64>();
        let got = r.final_weighted_avg.unwrap();
        assert!((got - want).abs() <= 0.1 * want, "{got} vs {want}");
        assert!(r.passed);
    }
}
