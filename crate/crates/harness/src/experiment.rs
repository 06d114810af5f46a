//! Multi-trial runs, aggregation and method comparison.
//!
//! Output layout of one experiment directory:
//!
//! ```text
//! trial_1.csv ... trial_N.csv    per-epoch metrics of each trial
//! model_trial_1.ckpt ...         final parameters of each trial
//! aggregate.csv                  per-epoch mean (and stderr) over trials
//! summary.csv                    one-row summary, same columns as `compare`
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use divebatch_core::data::{generate_synthetic, DataError, Dataset, SplitSpec};
use divebatch_core::models::{AnyModel, ModelError};
use divebatch_core::optim::{train, write_metrics_csv, EpochRecord, OptimError, TrainConfig, TrainStatus};
use divebatch_core::{AnyModel64, Dataset64};
use thiserror::Error;

use crate::config::{ConfigError, DataSource, ExperimentConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} of {1} trials diverged")]
    Diverged(usize, usize),
}

impl HarnessError {
    /// 1 for divergence, 2 for everything that is a setup problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Diverged(..) | HarnessError::Optim(OptimError::Divergence { .. }) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset64, HarnessError> {
    Ok(match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec)?,
        DataSource::Csv {
            path,
            label_column,
            split,
        } => Dataset::load_csv(path, label_column, *split)?,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Leave wall-time fields empty so outputs depend only on the seeds.
    pub mask_time: bool,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub status: TrainStatus,
    pub model: AnyModel64,
}

impl TrialResult {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

/// Columns of the metrics CSV after `epoch`.
pub const METRIC_NAMES: [&str; 8] = [
    "batch_size",
    "learning_rate",
    "train_loss",
    "val_loss",
    "val_acc",
    "grad_div_est",
    "grad_div_exact",
    "wall_time_s",
];

fn metric_values(r: &EpochRecord) -> [Option<f64>; 8] {
    [
        Some(r.batch_size as f64),
        Some(r.learning_rate),
        Some(r.train_loss),
        r.val_loss,
        r.val_accuracy,
        r.grad_diversity_est,
        r.grad_diversity_exact,
        Some(r.cumulative_wall_time_s),
    ]
}

/// Mean and standard error (`n − 1` denominator, `None` for one value).
pub fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub epoch: usize,
    /// Trials that recorded this epoch.
    pub count: usize,
    pub mean: [Option<f64>; 8],
    pub stderr: [Option<f64>; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub rows: Vec<AggregateRow>,
    /// Completed (non-diverged) trials the rows are built from.
    pub trials: usize,
    pub diverged: usize,
    /// Last record of each completed trial.
    pub final_records: Vec<EpochRecord>,
    /// Whether stderr columns are written.
    pub with_stderr: bool,
}

/// Per-epoch aggregation over the trials that did not diverge. Trials that
/// stopped early contribute to the epochs they reached.
pub fn aggregate(trials: &[TrialResult]) -> AggregateResult {
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| !t.diverged()).collect();
    let epochs = ok.iter().map(|t| t.records.len()).max().unwrap_or(0);
    let rows = (0..epochs)
        .map(|e| {
            let recs: Vec<&EpochRecord> = ok.iter().filter_map(|t| t.records.get(e)).collect();
            let mut mean = [None; 8];
            let mut stderr = [None; 8];
            for k in 0..8 {
                let vals: Vec<f64> = recs.iter().filter_map(|r| metric_values(r)[k]).collect();
                (mean[k], stderr[k]) = mean_stderr(&vals);
            }
            AggregateRow {
                epoch: e + 1,
                count: recs.len(),
                mean,
                stderr,
            }
        })
        .collect();
    AggregateResult {
        rows,
        trials: ok.len(),
        diverged: trials.len() - ok.len(),
        final_records: ok.iter().filter_map(|t| t.records.last().cloned()).collect(),
        with_stderr: trials.len() > 1,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn aggregate_header(with_stderr: bool) -> String {
    let mut cols = vec!["epoch".to_string(), "trials".to_string()];
    for name in METRIC_NAMES {
        cols.push(format!("{name}_mean"));
        if with_stderr {
            cols.push(format!("{name}_stderr"));
        }
    }
    cols.join(",")
}

pub fn write_aggregate_csv<W: Write>(agg: &AggregateResult, mut out: W, mask_time: bool) -> io::Result<()> {
    writeln!(out, "{}", aggregate_header(agg.with_stderr))?;
    let time_col = METRIC_NAMES.len() - 1;
    for row in &agg.rows {
        let mut cols = vec![row.epoch.to_string(), row.count.to_string()];
        for k in 0..METRIC_NAMES.len() {
            let masked = mask_time && k == time_col;
            cols.push(if masked { String::new() } else { fmt_opt(row.mean[k]) });
            if agg.with_stderr {
                cols.push(if masked { String::new() } else { fmt_opt(row.stderr[k]) });
            }
        }
        writeln!(out, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Accuracy margin for the time-to-final-accuracy metric: one percentage
/// point, accuracies being fractions.
pub const THRESHOLD_MARGIN: f64 = 0.01;

/// 1-based index of the first value `≥ last − margin`. A relative slack of
/// 1e-12 keeps values equal to the threshold up to rounding from missing it.
pub fn first_crossing(values: &[f64], margin: f64) -> Option<usize> {
    let last = *values.last()?;
    let threshold = last - margin;
    let slack = 1e-12 * threshold.abs().max(1.0);
    values.iter().position(|&v| v >= threshold - slack).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetric {
    pub threshold_accuracy: f64,
    pub epochs_to_threshold: usize,
    pub seconds_to_threshold: f64,
}

/// First epoch whose validation accuracy is within one point of the final
/// one, with its cumulative wall time. `None` when the final record has no
/// validation accuracy.
pub fn time_to_within(records: &[EpochRecord]) -> Option<ThresholdMetric> {
    let final_acc = records.last()?.val_accuracy?;
    let accs: Vec<f64> = records
        .iter()
        .map(|r| r.val_accuracy.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let epoch = first_crossing(&accs, THRESHOLD_MARGIN)?;
    Some(ThresholdMetric {
        threshold_accuracy: final_acc - THRESHOLD_MARGIN,
        epochs_to_threshold: records[epoch - 1].epoch,
        seconds_to_threshold: records[epoch - 1].cumulative_wall_time_s,
    })
}

/// Per-trial threshold metrics averaged across trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSummary {
    pub threshold_accuracy: f64,
    pub epochs: f64,
    pub seconds: f64,
}

pub fn mean_threshold(metrics: &[ThresholdMetric]) -> Option<ThresholdSummary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    Some(ThresholdSummary {
        threshold_accuracy: metrics.iter().map(|m| m.threshold_accuracy).sum::<f64>() / n,
        epochs: metrics.iter().map(|m| m.epochs_to_threshold as f64).sum::<f64>() / n,
        seconds: metrics.iter().map(|m| m.seconds_to_threshold).sum::<f64>() / n,
    })
}

/// Fractions of training at which the summary reads validation accuracy.
pub const CHECKPOINT_FRACTIONS: [(u32, f64); 4] = [(25, 0.25), (50, 0.5), (75, 0.75), (100, 1.0)];

/// `⌈fraction · epochs⌉`, at least 1.
pub fn checkpoint_epoch(fraction: f64, epochs: usize) -> usize {
    ((fraction * epochs as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub trials: usize,
    pub diverged: usize,
    /// `(epoch, mean, stderr)` of validation accuracy at each checkpoint.
    pub accuracy_at: [(usize, Option<f64>, Option<f64>); 4],
    pub threshold: Option<ThresholdSummary>,
    /// Mean over trials of the largest batch size used.
    pub max_batch_size: Option<f64>,
    pub final_batch_size: Option<f64>,
}

/// Reads each trial at the checkpoint epoch, or at its last record when it
/// stopped earlier.
pub fn summarize(method: &str, epochs: usize, trials: &[TrialResult]) -> SummaryRow {
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| !t.diverged() && !t.records.is_empty()).collect();
    let accuracy_at = CHECKPOINT_FRACTIONS.map(|(_, f)| {
        let e = checkpoint_epoch(f, epochs);
        let vals: Vec<f64> = ok
            .iter()
            .filter_map(|t| t.records.get(e - 1).or(t.records.last()).and_then(|r| r.val_accuracy))
            .collect();
        let (m, s) = mean_stderr(&vals);
        (e, m, s)
    });
    let thresholds: Vec<ThresholdMetric> = ok.iter().filter_map(|t| time_to_within(&t.records)).collect();
    let max_b: Vec<f64> = ok
        .iter()
        .map(|t| t.records.iter().map(|r| r.batch_size).max().unwrap_or(0) as f64)
        .collect();
    let final_b: Vec<f64> = ok
        .iter()
        .filter_map(|t| t.records.last().map(|r| r.batch_size as f64))
        .collect();
    SummaryRow {
        method: method.to_string(),
        trials: trials.len(),
        diverged: trials.iter().filter(|t| t.diverged()).count(),
        accuracy_at,
        threshold: mean_threshold(&thresholds),
        max_batch_size: mean_stderr(&max_b).0,
        final_batch_size: mean_stderr(&final_b).0,
    }
}

pub fn summary_header() -> String {
    let mut cols = vec!["method".to_string(), "trials".into(), "diverged".into()];
    for (pct, _) in CHECKPOINT_FRACTIONS {
        cols.push(format!("acc_{pct}_epoch"));
        cols.push(format!("acc_{pct}_mean"));
        cols.push(format!("acc_{pct}_stderr"));
    }
    cols.extend(
        [
            "threshold_accuracy",
            "epochs_to_threshold",
            "seconds_to_threshold",
            "max_batch_size_mean",
            "final_batch_size_mean",
        ]
        .map(String::from),
    );
    cols.join(",")
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W, mask_time: bool) -> io::Result<()> {
    writeln!(out, "{}", summary_header())?;
    for r in rows {
        let mut cols = vec![r.method.clone(), r.trials.to_string(), r.diverged.to_string()];
        for (e, m, s) in r.accuracy_at {
            cols.extend([e.to_string(), fmt_opt(m), fmt_opt(s)]);
        }
        let t = r.threshold;
        cols.push(fmt_opt(t.map(|t| t.threshold_accuracy)));
        cols.push(fmt_opt(t.map(|t| t.epochs)));
        cols.push(if mask_time { String::new() } else { fmt_opt(t.map(|t| t.seconds)) });
        cols.push(fmt_opt(r.max_batch_size));
        cols.push(fmt_opt(r.final_batch_size));
        writeln!(out, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Aligned plain-text version of the summary, accuracies in percent.
pub fn summary_table(rows: &[SummaryRow], mask_time: bool) -> String {
    let pct = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        (Some(m), None) => format!("{:.2}", 100.0 * m),
        _ => "-".into(),
    };
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    if let Some(r) = rows.first() {
        for ((p, _), (e, ..)) in CHECKPOINT_FRACTIONS.iter().zip(r.accuracy_at) {
            header.push(format!("acc@{p}% (ep {e})"));
        }
    }
    header.extend(["epochs to -1%", "seconds to -1%", "max batch"].map(String::from));
    table.push(header);
    for r in rows {
        let mut line = vec![r.method.clone()];
        line.extend(r.accuracy_at.iter().map(|(_, m, s)| pct(*m, *s)));
        line.push(r.threshold.map_or("-".into(), |t| format!("{:.1}", t.epochs)));
        line.push(match (mask_time, r.threshold) {
            (false, Some(t)) => format!("{:.2}", t.seconds),
            _ => "-".into(),
        });
        line.push(r.max_batch_size.map_or("-".into(), |b| format!("{b:.0}")));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                let pad = w - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
    pub aggregate: AggregateResult,
    pub summary: SummaryRow,
}

impl ExperimentResult {
    pub fn any_diverged(&self) -> bool {
        self.aggregate.diverged > 0
    }
}

/// Runs trial `i` (0-based) with seed `train.seed + i` for both the
/// shuffles and the model initialization.
pub fn run_trial(config: &ExperimentConfig, data: &Dataset64, i: usize) -> Result<TrialResult, HarnessError> {
    let seed = config.train.seed.wrapping_add(i as u64);
    let model = AnyModel::init(config.model, data.dim(), seed);
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let out = train(model, data, &train_cfg, config.scheduler)?;
    if let TrainStatus::Diverged { epoch, batch } = out.status {
        log::warn!("{}: trial {} diverged in epoch {epoch}, batch {batch}", config.name, i + 1);
    }
    Ok(TrialResult {
        seed,
        records: out.records,
        status: out.status,
        model: out.model,
    })
}

/// Runs every trial on one shared dataset, aggregates, and writes the
/// output directory when the config names one.
pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult, HarnessError> {
    let data = load_dataset(&config.data)?;
    config
        .train
        .validate(data.train_indices().len())
        .map_err(HarnessError::Optim)?;
    run_experiment_on(config, &data, opts)
}

pub fn run_experiment_on(
    config: &ExperimentConfig,
    data: &Dataset64,
    opts: RunOptions,
) -> Result<ExperimentResult, HarnessError> {
    let trials = (0..config.trials)
        .map(|i| run_trial(config, data, i))
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = aggregate(&trials);
    if aggregate.diverged > 0 {
        log::warn!(
            "{}: aggregating over {} completed trials ({} diverged)",
            config.name,
            aggregate.trials,
            aggregate.diverged
        );
    }
    let summary = summarize(&config.name, config.train.epochs, &trials);
    let result = ExperimentResult {
        config: config.clone(),
        trials,
        aggregate,
        summary,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(&result, dir, opts)?;
    }
    Ok(result)
}

pub fn write_outputs(result: &ExperimentResult, dir: &Path, opts: RunOptions) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, t) in result.trials.iter().enumerate() {
        let path = dir.join(format!("trial_{}.csv", i + 1));
        let mut buf = Vec::new();
        write_metrics_csv(&t.records, &mut buf, opts.mask_time).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))?;
        t.model.save_checkpoint(dir.join(format!("model_trial_{}.ckpt", i + 1)))?;
    }
    let path = dir.join("aggregate.csv");
    let mut buf = Vec::new();
    write_aggregate_csv(&result.aggregate, &mut buf, opts.mask_time).map_err(io_err(&path))?;
    fs::write(&path, buf).map_err(io_err(&path))?;
    let path = dir.join("summary.csv");
    let mut buf = Vec::new();
    write_summary_csv(std::slice::from_ref(&result.summary), &mut buf, opts.mask_time).map_err(io_err(&path))?;
    fs::write(&path, buf).map_err(io_err(&path))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub results: Vec<ExperimentResult>,
    pub rows: Vec<SummaryRow>,
}

/// Runs each config on the same dataset and tabulates them. With `out`,
/// each experiment writes to `out/<name>` and the table goes to
/// `out/summary.csv` and `out/summary.txt`.
pub fn compare(
    configs: &[ExperimentConfig],
    out: Option<&Path>,
    opts: RunOptions,
) -> Result<Comparison, HarnessError> {
    if configs.len() < 2 {
        return Err(ConfigError::Invalid {
            key: "configs".into(),
            reason: format!("compare needs at least 2 configs, got {}", configs.len()),
        }
        .into());
    }
    let first = &configs[0].data;
    for c in &configs[1..] {
        let same = match (first, &c.data) {
            (DataSource::Synthetic(a), DataSource::Synthetic(b)) => a == b,
            (
                DataSource::Csv { path: pa, split: sa, .. },
                DataSource::Csv { path: pb, split: sb, .. },
            ) => pa == pb && split_seed(sa) == split_seed(sb),
            _ => false,
        };
        if !same {
            return Err(ConfigError::Invalid {
                key: "data.seed".into(),
                reason: format!(
                    "`{}` and `{}` use different datasets ({:?} vs {:?})",
                    configs[0].name,
                    c.name,
                    first.seed(),
                    c.data.seed()
                ),
            }
            .into());
        }
    }
    let data = load_dataset(first)?;
    let mut names: Vec<String> = Vec::new();
    let mut results = Vec::new();
    for c in configs {
        let mut c = c.clone();
        let mut name = c.name.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{}-{k}", c.name);
            k += 1;
        }
        names.push(name.clone());
        c.name = name.clone();
        c.output_dir = out.map(|o| o.join(&name));
        c.train.validate(data.train_indices().len())?;
        results.push(run_experiment_on(&c, &data, opts)?);
    }
    let rows: Vec<SummaryRow> = results.iter().map(|r| r.summary.clone()).collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("summary.csv");
        let mut buf = Vec::new();
        write_summary_csv(&rows, &mut buf, opts.mask_time).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))?;
        let path = dir.join("summary.txt");
        fs::write(&path, summary_table(&rows, opts.mask_time)).map_err(io_err(&path))?;
    }
    Ok(Comparison { results, rows })
}

fn split_seed(s: &SplitSpec) -> Option<u64> {
    match s {
        SplitSpec::Random { seed, .. } => Some(*seed),
        SplitSpec::Sidecar => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64, t: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            batch_size: 8,
            learning_rate: 0.1,
            train_loss: 1.0,
            val_loss: Some(1.0),
            val_accuracy: Some(acc),
            grad_diversity_est: None,
            grad_diversity_exact: None,
            cumulative_wall_time_s: t,
        }
    }

    fn trial(values: &[f64]) -> TrialResult {
        TrialResult {
            seed: 0,
            records: values
                .iter()
                .enumerate()
                .map(|(i, &v)| EpochRecord {
                    train_loss: v,
                    ..rec(i + 1, v, i as f64)
                })
                .collect(),
            status: TrainStatus::Completed,
            model: AnyModel::Logistic(divebatch_core::models::LogisticModel::zeros(1)),
        }
    }

    #[test]
    fn threshold_examples_in_points() {
        assert_eq!(first_crossing(&[50.0, 94.2, 94.9, 95.0], 1.0), Some(2));
        assert_eq!(first_crossing(&[90.0, 95.0, 89.0, 94.0], 1.0), Some(2));
        assert_eq!(first_crossing(&[97.0, 97.0, 97.0], 1.0), Some(1));
        assert_eq!(first_crossing(&[], 1.0), None);
    }

    #[test]
    fn threshold_metric_from_records() {
        let recs: Vec<EpochRecord> = [0.5, 0.942, 0.949, 0.95]
            .iter()
            .enumerate()
            .map(|(i, &a)| rec(i + 1, a, 1.5 * (i + 1) as f64))
            .collect();
        let m = time_to_within(&recs).unwrap();
        assert_eq!(m.epochs_to_threshold, 2);
        assert_eq!(m.seconds_to_threshold, 3.0);
        assert!((m.threshold_accuracy - 0.94).abs() < 1e-15);
        let mut no_acc = recs.clone();
        no_acc.last_mut().unwrap().val_accuracy = None;
        assert!(time_to_within(&no_acc).is_none());
    }

    #[test]
    fn threshold_is_minimal_crossing_index() {
        let mut rng = 12345u64;
        for _ in 0..200 {
            let vals: Vec<f64> = (0..20)
                .map(|_| {
                    rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (rng >> 11) as f64 / (1u64 << 53) as f64
                })
                .collect();
            let e = first_crossing(&vals, 0.01).unwrap();
            let thr = vals[19] - 0.01;
            assert!(vals[e - 1] >= thr - 1e-12);
            assert!(vals[..e - 1].iter().all(|&v| v < thr - 1e-12));
        }
    }

    #[test]
    fn stderr_uses_n_minus_one() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(m, Some(3.0));
        // sample variance 14/3, stderr sqrt(14/3 / 4)
        assert!((s.unwrap() - (14.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[4.0]), (Some(4.0), None));
        assert_eq!(mean_stderr(&[]), (None, None));
    }

    #[test]
    fn single_trial_aggregate_has_no_stderr_columns() {
        let agg = aggregate(&[trial(&[0.5, 0.7])]);
        assert!(!agg.with_stderr);
        let mut buf = Vec::new();
        write_aggregate_csv(&agg, &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("_stderr"));
        assert!(text.lines().next().unwrap().contains("val_acc_mean"));
        assert_eq!(agg.rows[1].mean[4], Some(0.7));
    }

    #[test]
    fn constant_metric_has_zero_stderr() {
        let agg = aggregate(&[trial(&[0.5, 0.7]), trial(&[0.5, 0.7]), trial(&[0.5, 0.7])]);
        assert_eq!(agg.rows[0].stderr[4], Some(0.0));
        assert_eq!(agg.rows[1].count, 3);
    }

    #[test]
    fn four_trials_match_hand_formulas() {
        let ts: Vec<TrialResult> = [0.6, 0.7, 0.8, 0.9].iter().map(|&v| trial(&[v])).collect();
        let agg = aggregate(&ts);
        let mean = (0.6 + 0.7 + 0.8 + 0.9) / 4.0;
        let var = [0.6f64, 0.7, 0.8, 0.9].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((agg.rows[0].mean[4].unwrap() - mean).abs() < 1e-15);
        assert!((agg.rows[0].stderr[4].unwrap() - (var / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn diverged_trials_are_excluded() {
        let mut bad = trial(&[0.1]);
        bad.status = TrainStatus::Diverged { epoch: 1, batch: 1 };
        let agg = aggregate(&[trial(&[0.5]), bad, trial(&[0.7])]);
        assert_eq!((agg.trials, agg.diverged), (2, 1));
        assert!((agg.rows[0].mean[4].unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_epochs() {
        let es: Vec<usize> = CHECKPOINT_FRACTIONS.iter().map(|(_, f)| checkpoint_epoch(*f, 100)).collect();
        assert_eq!(es, vec![25, 50, 75, 100]);
        let es: Vec<usize> = CHECKPOINT_FRACTIONS.iter().map(|(_, f)| checkpoint_epoch(*f, 10)).collect();
        assert_eq!(es, vec![3, 5, 8, 10]);
    }

    #[test]
    fn summary_reads_checkpoints() {
        let vals: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let row = summarize("m", 10, &[trial(&vals)]);
        assert_eq!(row.accuracy_at[0], (3, Some(0.3), None));
        assert_eq!(row.accuracy_at[3], (10, Some(1.0), None));
        assert_eq!(row.threshold.unwrap().epochs, 10.0);
        let text = summary_table(&[row.clone()], true);
        assert!(text.contains("acc@25% (ep 3)"));
        let mut buf = Vec::new();
        write_summary_csv(&[row], &mut buf, false).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), summary_header());
        assert_eq!(s.lines().nth(1).unwrap().split(',').count(), summary_header().split(',').count());
    }
}
