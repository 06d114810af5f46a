//! Epoch-structured mini-batch SGD with gradient-diversity batch sizing.
//!
//! Each epoch shuffles the training indices and walks them in contiguous
//! mini-batches. While doing so a [`DiversityAccumulator`] collects the sum of
//! per-sample gradients and of their squared norms, each evaluated at the
//! parameters current when its batch was processed. At the epoch boundary the
//! ratio of the two gives the estimated gradient diversity, which the
//! DiveBatch scheduler turns into the next batch size
//! `min(m_max, round(δ · n · Δ̂))`.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::Dataset;
use crate::models::{batch_grad_stats, batch_grad_stats_unchecked, evaluate, Model, ModelError, Reduction};
use crate::rng::{self, Rng, Stream};
use crate::scalar::{add_into, sq_norm};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("aggregate gradient has squared norm {sq_norm:e}; diversity is undefined")]
    DegenerateGradient { sq_norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> OptimError {
    OptimError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub initial_batch: usize,
    pub max_batch: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    /// Scale the learning rate by `m_{k+1}/m_k` whenever the batch changes.
    pub rescale_lr: bool,
    pub seed: u64,
    /// Fixed-order reductions; identical seeds give bitwise identical runs.
    pub deterministic: bool,
    /// Also compute the exact diversity every epoch for non-oracle runs.
    pub compute_exact: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            initial_batch: 128,
            max_batch: 4096,
            epochs: 100,
            lr_decay_factor: 0.75,
            lr_decay_period: 20,
            rescale_lr: true,
            seed: 0,
            deterministic: true,
            compute_exact: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<(), OptimError> {
        // zero is allowed: it freezes the parameters
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(invalid("initial_lr", format!("must be nonnegative, got {}", self.initial_lr)));
        }
        if self.initial_batch == 0 {
            return Err(invalid("initial_batch", "must be positive"));
        }
        if self.initial_batch > self.max_batch {
            return Err(invalid(
                "max_batch",
                format!("{} is below the initial batch {}", self.max_batch, self.initial_batch),
            ));
        }
        if self.max_batch > n_train {
            return Err(invalid(
                "max_batch",
                format!("{} exceeds the {n_train} training samples", self.max_batch),
            ));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(invalid(
                "lr_decay_factor",
                format!("must lie in (0, 1], got {}", self.lr_decay_factor),
            ));
        }
        if self.lr_decay_period == 0 {
            return Err(invalid("lr_decay_period", "must be at least 1"));
        }
        Ok(())
    }

    pub fn reduction(&self) -> Reduction {
        if self.deterministic {
            Reduction::Deterministic
        } else {
            Reduction::Parallel
        }
    }
}

/// Batch-size policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerKind {
    Fixed,
    /// Multiply the batch by `resize_factor` every `resize_freq` epochs.
    AdaBatch { resize_factor: usize, resize_freq: usize },
    /// Batch proportional to the estimated diversity of the last epoch.
    DiveBatch { delta: f64, resize_freq: usize, monotone: bool },
    /// As DiveBatch but using the exact diversity at the end-of-epoch
    /// parameters.
    Oracle { delta: f64, resize_freq: usize, monotone: bool },
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Fixed => "fixed",
            SchedulerKind::AdaBatch { .. } => "adabatch",
            SchedulerKind::DiveBatch { .. } => "divebatch",
            SchedulerKind::Oracle { .. } => "oracle",
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        match *self {
            SchedulerKind::Fixed => Ok(()),
            SchedulerKind::AdaBatch {
                resize_factor,
                resize_freq,
            } => {
                if resize_factor == 0 {
                    return Err(invalid("resize_factor", "must be positive"));
                }
                if resize_freq == 0 {
                    return Err(invalid("resize_freq", "must be at least 1"));
                }
                Ok(())
            }
            SchedulerKind::DiveBatch { delta, resize_freq, .. }
            | SchedulerKind::Oracle { delta, resize_freq, .. } => {
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(invalid("delta", format!("must be positive, got {delta}")));
                }
                if resize_freq == 0 {
                    return Err(invalid("resize_freq", "must be at least 1"));
                }
                Ok(())
            }
        }
    }

    fn uses_diversity(&self) -> bool {
        matches!(self, SchedulerKind::DiveBatch { .. } | SchedulerKind::Oracle { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerState {
    pub kind: SchedulerKind,
    pub current_batch: usize,
}

impl SchedulerState {
    pub fn new(kind: SchedulerKind, initial_batch: usize) -> Self {
        Self {
            kind,
            current_batch: initial_batch,
        }
    }
}

/// Batch size for the epoch following `completed_epochs` (≥ 1) epochs.
///
/// `diversity` is required for the diversity-driven kinds; `n` is the number
/// of training samples.
pub fn next_batch_size(
    scheduler: &SchedulerState,
    diversity: Option<f64>,
    n: usize,
    config: &TrainConfig,
    completed_epochs: usize,
) -> Result<usize, OptimError> {
    let m = scheduler.current_batch;
    let m_max = config.max_batch;
    let due = |freq: usize| completed_epochs > 0 && completed_epochs % freq == 0;
    match scheduler.kind {
        SchedulerKind::Fixed => Ok(m),
        SchedulerKind::AdaBatch {
            resize_factor,
            resize_freq,
        } => Ok(if due(resize_freq) {
            m.saturating_mul(resize_factor).min(m_max)
        } else {
            m
        }),
        SchedulerKind::DiveBatch {
            delta,
            resize_freq,
            monotone,
        }
        | SchedulerKind::Oracle {
            delta,
            resize_freq,
            monotone,
        } => {
            let div = match diversity {
                Some(v) if v > 0.0 => v,
                other => {
                    return Err(invalid(
                        "diversity",
                        format!("diversity-driven schedulers need a positive value, got {other:?}"),
                    ))
                }
            };
            if !due(resize_freq) {
                return Ok(m);
            }
            let target = (delta * n as f64 * div).round_ties_even();
            let mut next = if target >= m_max as f64 {
                m_max
            } else {
                (target as usize).max(1)
            };
            if monotone {
                next = next.max(m);
            }
            Ok(next)
        }
    }
}

/// `η · m_next / m_current` when `enabled`, else `η`.
pub fn rescale_learning_rate(lr: f64, current_batch: usize, next_batch: usize, enabled: bool) -> f64 {
    if enabled && next_batch != current_batch {
        lr * next_batch as f64 / current_batch as f64
    } else {
        lr
    }
}

/// Multiplies by the decay factor once `completed_epochs` reaches a positive
/// multiple of the decay period.
pub fn apply_lr_decay(lr: f64, completed_epochs: usize, config: &TrainConfig) -> f64 {
    if completed_epochs > 0 && completed_epochs % config.lr_decay_period == 0 {
        lr * config.lr_decay_factor
    } else {
        lr
    }
}

/// Epoch-wide sums behind the diversity estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityAccumulator<T> {
    pub sq_norm_total: T,
    pub grad_total: Vec<T>,
    pub samples_seen: usize,
}

impl<T: Scalar> DiversityAccumulator<T> {
    pub fn new(p: usize) -> Self {
        Self {
            sq_norm_total: T::zero(),
            grad_total: vec![T::zero(); p],
            samples_seen: 0,
        }
    }

    pub fn add(&mut self, grad_sum: &[T], sq_norm_sum: T, count: usize) {
        add_into(&mut self.grad_total, grad_sum);
        self.sq_norm_total += sq_norm_sum;
        self.samples_seen += count;
    }
}

/// `Σ‖g_i‖² / ‖Σ g_i‖²`, failing when the denominator is below the
/// degeneracy floor.
pub fn diversity_ratio<T: Scalar>(sq_norm_sum: T, grad_sum_sq_norm: T) -> Result<T, OptimError> {
    if !(grad_sum_sq_norm > T::degenerate_floor()) {
        return Err(OptimError::DegenerateGradient {
            sq_norm: grad_sum_sq_norm.to_f64_lossy(),
        });
    }
    Ok(sq_norm_sum / grad_sum_sq_norm)
}

pub fn estimated_gradient_diversity<T: Scalar>(acc: &DiversityAccumulator<T>) -> Result<T, OptimError> {
    diversity_ratio(acc.sq_norm_total, sq_norm(&acc.grad_total))
}

/// Gradient diversity of the rows in `indices` at the model's current
/// parameters.
pub fn exact_gradient_diversity<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    reduction: Reduction,
) -> Result<T, OptimError> {
    let stats = batch_grad_stats(model, data, indices, reduction)?;
    diversity_ratio(stats.sq_norm_sum, stats.grad_sum_sq_norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutput<T> {
    pub accumulator: DiversityAccumulator<T>,
    /// Mean per-sample loss, each evaluated before its batch's update.
    pub mean_train_loss: T,
    pub batch_sizes: Vec<usize>,
}

/// One pass over the training split with batch size `batch` and step size
/// `lr`, updating `model` in place.
///
/// `epoch` only labels divergence errors.
pub fn run_epoch<T: Scalar, M: Model<T>>(
    model: &mut M,
    data: &Dataset<T>,
    batch: usize,
    lr: f64,
    rng: &mut Rng,
    reduction: Reduction,
    epoch: usize,
) -> Result<EpochOutput<T>, OptimError> {
    let n_train = data.train_indices().len();
    if batch == 0 || batch > n_train {
        return Err(invalid(
            "batch",
            format!("batch size {batch} outside [1, {n_train}]"),
        ));
    }
    if data.dim() != model.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        }
        .into());
    }
    let mut order = data.train_indices().to_vec();
    order.shuffle(rng);

    let p = model.num_params();
    let mut acc = DiversityAccumulator::new(p);
    let mut loss_sum = T::zero();
    let mut batch_sizes = Vec::with_capacity(n_train.div_ceil(batch));
    let lr = T::of(lr);
    for (j, chunk) in order.chunks(batch).enumerate() {
        let stats = batch_grad_stats_unchecked(model, data, chunk, reduction);
        if !stats.is_finite() {
            return Err(OptimError::Divergence { epoch, batch: j });
        }
        acc.add(&stats.grad_sum, stats.sq_norm_sum, stats.count);
        loss_sum += stats.loss_sum;
        let step = lr / T::of(chunk.len() as f64);
        for (w, &g) in model.params_mut().iter_mut().zip(&stats.grad_sum) {
            *w -= step * g;
        }
        if model.params().iter().any(|w| !w.is_finite()) {
            return Err(OptimError::Divergence { epoch, batch: j });
        }
        batch_sizes.push(chunk.len());
    }
    Ok(EpochOutput {
        accumulator: acc,
        mean_train_loss: loss_sum / T::of(n_train as f64),
        batch_sizes,
    })
}

/// One row of the metrics CSV. `epoch` is 1-based; `batch_size` and
/// `learning_rate` are the values used during that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub grad_diversity_est: Option<f64>,
    pub grad_diversity_exact: Option<f64>,
    pub cumulative_wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// The epoch-aggregate gradient vanished; training stopped early.
    Converged { epoch: usize },
    Diverged { epoch: usize, batch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub records: Vec<EpochRecord>,
    pub status: TrainStatus,
    /// Batch size and learning rate scheduled for the epoch after the last
    /// recorded one.
    pub next_batch: usize,
    pub next_lr: f64,
}

/// Runs the full epoch loop.
///
/// Per epoch: run the epoch, estimate the diversity (exact for the oracle),
/// evaluate on the validation split, then update the batch size, rescale the
/// learning rate by the batch ratio and apply the periodic decay, in that
/// order. Configuration errors are returned as `Err`; divergence ends the run
/// with partial records and [`TrainStatus::Diverged`].
pub fn train<T: Scalar, M: Model<T>>(
    model: M,
    data: &Dataset<T>,
    config: &TrainConfig,
    kind: SchedulerKind,
) -> Result<TrainOutcome<M>, OptimError> {
    let n_train = data.train_indices().len();
    config.validate(n_train)?;
    kind.validate()?;
    if data.dim() != model.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        }
        .into());
    }

    let reduction = config.reduction();
    let mut model = model;
    let mut scheduler = SchedulerState::new(kind, config.initial_batch);
    let mut lr = config.initial_lr;
    let mut records = Vec::with_capacity(config.epochs);
    let mut wall = 0.0;
    let mut status = TrainStatus::Completed;

    for k in 0..config.epochs {
        let epoch = k + 1;
        let batch = scheduler.current_batch;
        let started = Instant::now();
        let mut rng = rng::stream(config.seed, Stream::EpochShuffle(k as u64));
        let out = match run_epoch(&mut model, data, batch, lr, &mut rng, reduction, epoch) {
            Ok(out) => out,
            Err(OptimError::Divergence { epoch, batch }) => {
                status = TrainStatus::Diverged { epoch, batch };
                break;
            }
            Err(e) => return Err(e),
        };
        let estimate = estimated_gradient_diversity(&out.accumulator)
            .ok()
            .map(|v| v.to_f64_lossy());
        let exact = if matches!(kind, SchedulerKind::Oracle { .. }) || config.compute_exact {
            exact_gradient_diversity(&model, data, data.train_indices(), reduction)
                .ok()
                .map(|v| v.to_f64_lossy())
        } else {
            None
        };
        let driving = match kind {
            SchedulerKind::Oracle { .. } => exact,
            _ => estimate,
        };
        let next = if kind.uses_diversity() && driving.is_none() {
            None
        } else {
            Some(next_batch_size(&scheduler, driving, n_train, config, epoch)?)
        };
        wall += started.elapsed().as_secs_f64();

        let (val_loss, val_accuracy) = if data.val_indices().is_empty() {
            (None, None)
        } else {
            let e = evaluate(&model, data, data.val_indices(), reduction)?;
            (
                Some(e.mean_loss.to_f64_lossy()),
                e.accuracy.map(|a| a.to_f64_lossy()),
            )
        };
        records.push(EpochRecord {
            epoch,
            batch_size: batch,
            learning_rate: lr,
            train_loss: out.mean_train_loss.to_f64_lossy(),
            val_loss,
            val_accuracy,
            grad_diversity_est: estimate,
            grad_diversity_exact: exact,
            cumulative_wall_time_s: wall,
        });

        let Some(next) = next else {
            status = TrainStatus::Converged { epoch };
            break;
        };
        lr = rescale_learning_rate(lr, batch, next, config.rescale_lr);
        lr = apply_lr_decay(lr, epoch, config);
        scheduler.current_batch = next;
    }

    Ok(TrainOutcome {
        model,
        records,
        status,
        next_batch: scheduler.current_batch,
        next_lr: lr,
    })
}

pub const METRICS_HEADER: &str =
    "epoch,batch_size,learning_rate,train_loss,val_loss,val_acc,grad_div_est,grad_div_exact,wall_time_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-epoch metrics CSV. With `mask_time` the wall-time column
/// is left empty so output depends only on the seed.
pub fn write_metrics_csv<W: Write>(
    records: &[EpochRecord],
    mut out: W,
    mask_time: bool,
) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        let time = if mask_time {
            String::new()
        } else {
            r.cumulative_wall_time_s.to_string()
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.batch_size,
            r.learning_rate,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_accuracy),
            opt(r.grad_diversity_est),
            opt(r.grad_diversity_exact),
            time
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::models::{per_sample_grad, LogisticModel, QuadraticModel};
    use rand::SeedableRng;

    fn cfg(m0: usize, m_max: usize) -> TrainConfig {
        TrainConfig {
            initial_batch: m0,
            max_batch: m_max,
            ..Default::default()
        }
    }

    fn dive(delta: f64) -> SchedulerState {
        SchedulerState::new(
            SchedulerKind::DiveBatch {
                delta,
                resize_freq: 1,
                monotone: false,
            },
            128,
        )
    }

    #[test]
    fn divebatch_clamps_to_max() {
        let m = next_batch_size(&dive(1.0), Some(0.9), 16_000, &cfg(128, 4096), 1).unwrap();
        assert_eq!(m, 4096);
    }

    #[test]
    fn divebatch_rounds_small_targets() {
        let m = next_batch_size(&dive(0.1), Some(0.0025), 16_000, &cfg(128, 4096), 1).unwrap();
        assert_eq!(m, 4);
        // never below one
        let m = next_batch_size(&dive(0.1), Some(1e-9), 16_000, &cfg(128, 4096), 1).unwrap();
        assert_eq!(m, 1);
        // ties go to even: 0.5 * 5 * 1.0 = 2.5 -> 2, 0.5 * 7 = 3.5 -> 4
        let c = cfg(1, 7);
        assert_eq!(next_batch_size(&dive(0.5), Some(1.0), 5, &c, 1).unwrap(), 2);
        assert_eq!(next_batch_size(&dive(0.5), Some(1.0), 7, &c, 1).unwrap(), 4);
    }

    #[test]
    fn divebatch_monotone_and_frequency() {
        let mono = SchedulerState::new(
            SchedulerKind::DiveBatch {
                delta: 0.1,
                resize_freq: 3,
                monotone: true,
            },
            128,
        );
        let c = cfg(128, 4096);
        assert_eq!(next_batch_size(&mono, Some(0.0025), 16_000, &c, 3).unwrap(), 128);
        assert_eq!(next_batch_size(&mono, Some(0.5), 16_000, &c, 2).unwrap(), 128);
        assert_eq!(next_batch_size(&mono, Some(0.5), 16_000, &c, 6).unwrap(), 800);
        assert!(next_batch_size(&mono, None, 16_000, &c, 3).is_err());
    }

    #[test]
    fn adabatch_doubles_on_schedule() {
        let s = SchedulerState::new(
            SchedulerKind::AdaBatch {
                resize_factor: 2,
                resize_freq: 20,
            },
            128,
        );
        let c = cfg(128, 200);
        assert_eq!(next_batch_size(&s, None, 1000, &c, 19).unwrap(), 128);
        let c = cfg(128, 4096);
        assert_eq!(next_batch_size(&s, None, 1000, &c, 20).unwrap(), 256);
        let c = cfg(128, 200);
        assert_eq!(next_batch_size(&s, None, 1000, &c, 20).unwrap(), 200);
    }

    #[test]
    fn lr_rules() {
        assert_eq!(rescale_learning_rate(16.0, 128, 4096, true), 512.0);
        assert_eq!(rescale_learning_rate(16.0, 128, 128, true), 16.0);
        assert_eq!(rescale_learning_rate(16.0, 128, 2048, false), 16.0);
        let c = TrainConfig::default();
        assert_eq!(apply_lr_decay(1.0, 20, &c), 0.75);
        assert_eq!(apply_lr_decay(1.0, 19, &c), 1.0);
        let mut lr = 1.0;
        for e in 1..=60 {
            lr = apply_lr_decay(lr, e, &c);
        }
        assert_eq!(lr, 0.421875);
    }

    #[test]
    fn identical_and_orthogonal_gradients() {
        let n = 6;
        let g = [0.3, -1.2, 2.0];
        let mut acc = DiversityAccumulator::new(3);
        for _ in 0..n {
            acc.add(&g, sq_norm(&g), 1);
        }
        let d: f64 = estimated_gradient_diversity(&acc).unwrap();
        assert!((d - 1.0 / n as f64).abs() <= 1e-15);

        let mut acc = DiversityAccumulator::new(4);
        for i in 0..4 {
            let mut e = [0.0; 4];
            e[i] = 2.5;
            acc.add(&e, sq_norm(&e), 1);
        }
        assert_eq!(estimated_gradient_diversity(&acc).unwrap(), 1.0);

        let acc = DiversityAccumulator::<f64>::new(2);
        assert!(matches!(
            estimated_gradient_diversity(&acc),
            Err(OptimError::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn estimate_matches_brute_force() {
        let mut rng = rng::stream(3, Stream::Custom(0));
        use rand::Rng as _;
        let grads: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut acc = DiversityAccumulator::new(5);
        for g in &grads {
            acc.add(g, sq_norm(g), 1);
        }
        let num: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
        let den: f64 = (0..5)
            .map(|j| grads.iter().map(|g| g[j]).sum::<f64>().powi(2))
            .sum();
        let est = estimated_gradient_diversity(&acc).unwrap();
        assert!((est - num / den).abs() <= 1e-12 * est);
    }

    fn points(rows: &[[f64; 2]]) -> Dataset<f64> {
        Dataset::from_points(rows.iter().flatten().copied().collect(), 2).unwrap()
    }

    #[test]
    fn full_batch_quadratic_step() {
        let ds = points(&[[1.0, 0.0], [3.0, 2.0], [-1.0, 4.0], [1.0, 2.0]]);
        let mut m = QuadraticModel::new(vec![5.0, -1.0]);
        let mut rng = Rng::seed_from_u64(0);
        let out = run_epoch(&mut m, &ds, 4, 0.25, &mut rng, Reduction::Deterministic, 1).unwrap();
        // mean = (1, 2); θ - 0.25 (θ - mean) = (4, -0.25)
        assert_eq!(m.theta(), &[4.0, -0.25]);
        assert_eq!(out.batch_sizes, vec![4]);
        assert_eq!(out.accumulator.samples_seen, 4);
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let spec = SyntheticSpec {
            n: 40,
            d: 3,
            seed: 5,
            split_fraction: 1.0,
            ..Default::default()
        };
        let ds: Dataset<f64> = generate_synthetic(&spec).unwrap();
        let start = LogisticModel::from_parts(vec![0.2, -0.1, 0.4], 0.05);
        let mut m = start.clone();
        let mut rng = Rng::seed_from_u64(1);
        let out = run_epoch(&mut m, &ds, 7, 0.0, &mut rng, Reduction::Deterministic, 1).unwrap();
        assert_eq!(m, start);
        let full = batch_grad_stats(&start, &ds, ds.train_indices(), Reduction::Deterministic).unwrap();
        for (a, b) in out.accumulator.grad_total.iter().zip(&full.grad_sum) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((out.accumulator.sq_norm_total - full.sq_norm_sum).abs() <= 1e-12);
        let est = estimated_gradient_diversity(&out.accumulator).unwrap();
        let exact = exact_gradient_diversity(&start, &ds, ds.train_indices(), Reduction::Deterministic).unwrap();
        assert!((est - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn ragged_epoch_matches_hand_replay() {
        let ds = Dataset::new(
            vec![0.5, -1.0, 1.5, 0.2, -0.7, 0.9, 0.0, 1.1, -1.3, -0.4],
            2,
            vec![1, 0, 1, 0, 1],
            (0..5).collect(),
            vec![],
            None,
        )
        .unwrap();
        let lr = 0.8;
        let mut model = LogisticModel::from_parts(vec![0.0, 0.0], 0.0);
        let mut rng = Rng::seed_from_u64(42);
        let mut oracle_rng = rng.clone();
        let out = run_epoch(&mut model, &ds, 2, lr, &mut rng, Reduction::Deterministic, 1).unwrap();
        assert_eq!(out.batch_sizes, vec![2, 2, 1]);

        // hand replay: w ← w − (lr/|B|) Σ (σ(w·x+b) − y)(x, 1)
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut oracle_rng);
        let mut w = [0.0f64; 3];
        let mut num = 0.0;
        let mut total = [0.0f64; 3];
        for batch in order.chunks(2) {
            let mut g = [0.0f64; 3];
            for &i in batch {
                let x = ds.row(i);
                let s = w[0] * x[0] + w[1] * x[1] + w[2];
                let r = 1.0 / (1.0 + (-s).exp()) - ds.label(i) as f64;
                let gi = [r * x[0], r * x[1], r];
                num += gi.iter().map(|v| v * v).sum::<f64>();
                for j in 0..3 {
                    g[j] += gi[j];
                    total[j] += gi[j];
                }
            }
            for j in 0..3 {
                w[j] -= lr / batch.len() as f64 * g[j];
            }
        }
        for (a, b) in model.params().iter().zip(&w) {
            assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
        let est = estimated_gradient_diversity(&out.accumulator).unwrap();
        let want = num / total.iter().map(|v| v * v).sum::<f64>();
        assert!((est - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn run_epoch_rejects_bad_batch() {
        let ds = points(&[[1.0, 0.0], [3.0, 2.0]]);
        let mut m = QuadraticModel::new(vec![0.0, 0.0]);
        let mut rng = Rng::seed_from_u64(0);
        assert!(run_epoch(&mut m, &ds, 3, 0.1, &mut rng, Reduction::Deterministic, 1).is_err());
        assert!(run_epoch(&mut m, &ds, 0, 0.1, &mut rng, Reduction::Deterministic, 1).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = points(&[[1.0, 0.0], [3.0, 2.0]]);
        let m = QuadraticModel::new(vec![1e300, 0.0]);
        let c = TrainConfig {
            initial_lr: 10.0,
            initial_batch: 1,
            max_batch: 2,
            epochs: 5,
            ..Default::default()
        };
        let out = train(m, &ds, &c, SchedulerKind::Fixed).unwrap();
        assert!(matches!(out.status, TrainStatus::Diverged { epoch: 1, .. }));
        assert!(out.records.is_empty());
    }

    #[test]
    fn exact_diversity_cases() {
        let ds = points(&[[1.0, 0.0], [3.0, 2.0], [1.0, 0.0], [3.0, 2.0]]);
        let m = QuadraticModel::new(vec![-2.0, 5.0]);
        assert_eq!(exact_gradient_diversity(&m, &ds, &[1], Reduction::Deterministic).unwrap(), 1.0);
        // same point repeated 2n times: Δ = 1/(2n)
        let same = points(&[[1.0, 1.0]; 6]);
        let d = exact_gradient_diversity(&m, &same, &[0, 1, 2, 3, 4, 5], Reduction::Deterministic).unwrap();
        assert!((d - 1.0 / 6.0).abs() < 1e-15);
        // θ at the mean: zero aggregate gradient
        let at_mean = QuadraticModel::new(vec![2.0, 1.0]);
        assert!(matches!(
            exact_gradient_diversity(&at_mean, &ds, &[0, 1], Reduction::Deterministic),
            Err(OptimError::DegenerateGradient { .. })
        ));
        let g = per_sample_grad(&m, ds.row(0), 0).unwrap();
        assert_eq!(g, vec![-3.0, 5.0]);
    }

    #[test]
    fn one_epoch_records_one_update() {
        let spec = SyntheticSpec {
            n: 200,
            d: 4,
            seed: 1,
            ..Default::default()
        };
        let ds: Dataset<f64> = generate_synthetic(&spec).unwrap();
        let c = TrainConfig {
            initial_lr: 1.0,
            initial_batch: 16,
            max_batch: 160,
            epochs: 1,
            ..Default::default()
        };
        let out = train(LogisticModel::zeros(4), &ds, &c, dive(1.0).kind).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.status, TrainStatus::Completed);
        let est = out.records[0].grad_diversity_est.unwrap();
        let want = ((160.0 * est).round_ties_even() as usize).clamp(1, 160);
        assert_eq!(out.next_batch, want);
        assert_eq!(out.next_lr, rescale_learning_rate(1.0, 16, want, true));
    }

    #[test]
    fn full_batch_fixed_is_gradient_descent() {
        let ds = points(&[[1.0, 0.0], [3.0, 2.0], [-1.0, 4.0], [1.0, 2.0]]);
        let c = TrainConfig {
            initial_lr: 0.5,
            initial_batch: 4,
            max_batch: 4,
            epochs: 3,
            lr_decay_period: 100,
            ..Default::default()
        };
        let out = train(QuadraticModel::new(vec![5.0, -2.0]), &ds, &c, SchedulerKind::Fixed).unwrap();
        // e_{k+1} = ½ e_k, starting from (4, −4)
        assert_eq!(out.model.theta(), &[1.5, 1.5]);
        assert!(out.records.iter().all(|r| r.batch_size == 4 && r.val_loss.is_none()));
    }

    #[test]
    fn converged_run_stops_with_success() {
        // θ already at the mean of symmetric points: zero aggregate gradient
        let ds = points(&[[1.0, 0.0], [-1.0, 0.0]]);
        let c = TrainConfig {
            initial_lr: 1e-3,
            initial_batch: 2,
            max_batch: 2,
            epochs: 5,
            ..Default::default()
        };
        let out = train(QuadraticModel::new(vec![0.0, 0.0]), &ds, &c, dive(1.0).kind).unwrap();
        assert_eq!(out.status, TrainStatus::Converged { epoch: 1 });
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].grad_diversity_est, None);
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = EpochRecord {
            epoch: 1,
            batch_size: 128,
            learning_rate: 16.0,
            train_loss: 0.5,
            val_loss: Some(0.25),
            val_accuracy: Some(0.9),
            grad_diversity_est: Some(0.001),
            grad_diversity_exact: None,
            cumulative_wall_time_s: 1.5,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[rec.clone()], &mut buf, false).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\n1,128,16,0.5,0.25,0.9,0.001,,1.5\n")
        );
        let mut buf = Vec::new();
        write_metrics_csv(&[rec], &mut buf, true).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("0.001,,\n"));
    }
}
