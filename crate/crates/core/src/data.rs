//! Datasets: the synthetic binary-classification generator, CSV persistence
//! and deterministic train/validation splits.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}, column `{column}`: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        reason: String,
    },
    #[error("{path}: line {line}: label `{value}` is not 0 or 1")]
    NonBinaryLabel {
        path: PathBuf,
        line: u64,
        value: String,
    },
    #[error("{path}: no column named `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// How `noise_scale` maps to the standard deviation of the label noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseConvention {
    /// `noise_scale` is the variance; the draw uses `sqrt(noise_scale)`.
    #[default]
    Variance,
    /// `noise_scale` is the standard deviation.
    StdDev,
}

/// Parameters of the synthetic logistic-threshold dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub noise_scale: f64,
    pub noise_convention: NoiseConvention,
    /// Fraction of rows assigned to the training split, in `(0, 1]`.
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 20_000,
            d: 512,
            noise_scale: 0.1,
            noise_convention: NoiseConvention::Variance,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n < 2 {
            return Err(invalid("n", format!("need at least 2 samples, got {}", self.n)));
        }
        if self.d < 1 {
            return Err(invalid("d", "feature dimension must be positive"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(invalid(
                "noise_scale",
                format!("must be finite and nonnegative, got {}", self.noise_scale),
            ));
        }
        validate_fraction(self.split_fraction)
    }

    pub fn noise_std(&self) -> f64 {
        match self.noise_convention {
            NoiseConvention::Variance => self.noise_scale.sqrt(),
            NoiseConvention::StdDev => self.noise_scale,
        }
    }
}

fn validate_fraction(fraction: f64) -> Result<(), DataError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(invalid(
            "split_fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ))
    }
}

/// Feature matrix with binary labels and a train/validation partition.
///
/// Immutable once built. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    n: usize,
    d: usize,
    labels: Vec<u8>,
    train: Vec<usize>,
    val: Vec<usize>,
    true_weights: Option<Vec<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Checks that the shapes agree, labels are binary and the two index
    /// lists partition `0..n`.
    pub fn new(
        features: Vec<T>,
        d: usize,
        labels: Vec<u8>,
        train: Vec<usize>,
        val: Vec<usize>,
        true_weights: Option<Vec<T>>,
    ) -> Result<Self, DataError> {
        if d == 0 {
            return Err(DataError::Inconsistent("zero feature dimension".into()));
        }
        if features.len() % d != 0 {
            return Err(DataError::Inconsistent(format!(
                "{} feature values do not divide into rows of {d}",
                features.len()
            )));
        }
        let n = features.len() / d;
        if labels.len() != n {
            return Err(DataError::Inconsistent(format!(
                "{n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(DataError::Inconsistent(format!(
                "label {} at row {i} is not binary",
                labels[i]
            )));
        }
        if let Some(w) = &true_weights {
            if w.len() != d {
                return Err(DataError::Inconsistent(format!(
                    "true weights have length {} but d = {d}",
                    w.len()
                )));
            }
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val) {
            if i >= n {
                return Err(DataError::Inconsistent(format!("split index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Inconsistent(format!("split index {i} repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DataError::Inconsistent(
                "train and validation indices do not cover every row".into(),
            ));
        }
        Ok(Self {
            features,
            n,
            d,
            labels,
            train,
            val,
            true_weights,
        })
    }

    /// Dataset with every row in the training split and all labels 0. Used
    /// for the quadratic model, where rows are anchor points.
    pub fn from_points(features: Vec<T>, d: usize) -> Result<Self, DataError> {
        let n = if d == 0 { 0 } else { features.len() / d };
        Self::new(features, d, vec![0; n], (0..n).collect(), Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn true_weights(&self) -> Option<&[T]> {
        self.true_weights.as_deref()
    }

    /// Writes the dataset as CSV (header `x0,…,x{d-1},label`) and the split
    /// to the sidecar returned by [`split_sidecar_path`].
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let io_err = |source: io::Error| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let csv_err = |e: csv::Error| io_err(io::Error::other(e));

        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.d).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        writer.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(self.d + 1);
        for i in 0..self.n {
            record.clear();
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            record.push(self.labels[i].to_string());
            writer.write_record(&record).map_err(csv_err)?;
        }
        writer.flush().map_err(io_err)?;

        let sidecar = split_sidecar_path(path);
        let join = |idx: &[usize]| {
            idx.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut text = format!("train={}\nval={}\n", join(&self.train), join(&self.val));
        if let Some(w) = &self.true_weights {
            let w: Vec<String> = w.iter().map(|v| v.to_string()).collect();
            text.push_str(&format!("true_weights={}\n", w.join(" ")));
        }
        fs::write(&sidecar, text).map_err(|source| DataError::Io {
            path: sidecar,
            source,
        })
    }

    /// Reads a CSV with a header row. Every column other than `label_column`
    /// is a feature, in file order.
    pub fn load_csv(
        path: impl AsRef<Path>,
        label_column: &str,
        split: SplitSpec,
    ) -> Result<Self, DataError> {
        let path = path.as_ref();
        let io_err = |e: csv::Error| DataError::Io {
            path: path.to_path_buf(),
            source: match e.into_kind() {
                csv::ErrorKind::Io(e) => e,
                other => io::Error::other(format!("{other:?}")),
            },
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(io_err)?;
        let headers = reader.headers().map_err(io_err)?.clone();
        let label_pos = headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: label_column.to_string(),
            })?;
        let d = headers.len() - 1;
        if d == 0 {
            return Err(DataError::Inconsistent(format!(
                "{}: no feature columns",
                path.display()
            )));
        }

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, result) in reader.records().enumerate() {
            // header is line 1
            let line = row as u64 + 2;
            let record = result.map_err(|e| DataError::Parse {
                path: path.to_path_buf(),
                line,
                column: String::new(),
                reason: e.to_string(),
            })?;
            for (col, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                if col == label_pos {
                    let y = match cell {
                        "0" | "0.0" => 0,
                        "1" | "1.0" => 1,
                        other => {
                            return Err(DataError::NonBinaryLabel {
                                path: path.to_path_buf(),
                                line,
                                value: other.to_string(),
                            })
                        }
                    };
                    labels.push(y);
                } else {
                    let v: T = cell.parse().map_err(|_| DataError::Parse {
                        path: path.to_path_buf(),
                        line,
                        column: headers[col].to_string(),
                        reason: format!("`{cell}` is not a number"),
                    })?;
                    features.push(v);
                }
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(DataError::Inconsistent(format!(
                "{}: no data rows",
                path.display()
            )));
        }

        let (train, val, true_weights) = match split {
            SplitSpec::Random { fraction, seed } => {
                validate_fraction(fraction)?;
                let (t, v) = random_split(n, fraction, seed);
                (t, v, None)
            }
            SplitSpec::Sidecar => read_sidecar(&split_sidecar_path(path))?,
        };
        Self::new(features, d, labels, train, val, true_weights)
    }
}

/// Where the train/validation split of a saved dataset comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Uniform random permutation under `seed`; the first
    /// `round(fraction * n)` rows of it train.
    Random { fraction: f64, seed: u64 },
    /// The sidecar written by [`Dataset::save_csv`].
    Sidecar,
}

/// `data.csv` → `data.csv.split`.
pub fn split_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

type SidecarParts<T> = (Vec<usize>, Vec<usize>, Option<Vec<T>>);

fn read_sidecar<T: Scalar>(path: &Path) -> Result<SidecarParts<T>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut train = None;
    let mut val = None;
    let mut weights = None;
    for (k, line) in text.lines().enumerate() {
        let line_no = k as u64 + 1;
        let parse_err = |column: &str, reason: String| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            column: column.to_string(),
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once('=')
            .ok_or_else(|| parse_err("", "expected `key=values`".into()))?;
        let key = key.trim();
        match key {
            "train" | "val" => {
                let idx = rest
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(key, e.to_string()))?;
                if key == "train" {
                    train = Some(idx);
                } else {
                    val = Some(idx);
                }
            }
            "true_weights" => {
                let w = rest
                    .split_whitespace()
                    .map(|t| t.parse::<T>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| parse_err(key, "non-numeric weight".into()))?;
                weights = Some(w);
            }
            other => return Err(parse_err(other, "unknown key".into())),
        }
    }
    let missing = |k: &str| DataError::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: k.to_string(),
        reason: "missing".into(),
    };
    Ok((
        train.ok_or_else(|| missing("train"))?,
        val.ok_or_else(|| missing("val"))?,
        weights,
    ))
}

/// Sorted train and validation index lists for `n` rows.
pub fn random_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, Stream::Split));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut train = perm[..n_train].to_vec();
    let mut val = perm[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// `1{σ(w·x + ε) > 0.5}`, evaluated as `w·x + ε > 0`.
pub fn synthetic_label(weights: &[f64], x: &[f64], noise: f64) -> u8 {
    let t: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + noise;
    u8::from(t > 0.0)
}

pub(crate) struct SyntheticDraw {
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
    pub noise: Vec<f64>,
}

pub(crate) fn draw_synthetic(spec: &SyntheticSpec, weights: Option<&[f64]>) -> SyntheticDraw {
    let (n, d) = (spec.n, spec.d);
    let mut feat_rng = rng::stream(spec.seed, Stream::Features);
    let features: Vec<f64> = (0..n * d)
        .map(|_| feat_rng.random_range(-1.0..=1.0))
        .collect();
    let weights = match weights {
        Some(w) => w.to_vec(),
        None => {
            let mut w_rng = rng::stream(spec.seed, Stream::TrueWeights);
            (0..d).map(|_| StandardNormal.sample(&mut w_rng)).collect()
        }
    };
    let std = spec.noise_std();
    let mut noise_rng = rng::stream(spec.seed, Stream::Noise);
    let noise = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            std * z
        })
        .collect();
    SyntheticDraw {
        features,
        weights,
        noise,
    }
}

/// Features uniform on `[-1, 1]^d`, true weights standard normal, labels from
/// the noisy sign of the linear score.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>, DataError> {
    spec.validate()?;
    build_synthetic(spec, None)
}

/// As [`generate_synthetic`] with the true weight vector supplied.
pub fn generate_synthetic_with_weights<T: Scalar>(
    spec: &SyntheticSpec,
    weights: &[f64],
) -> Result<Dataset<T>, DataError> {
    spec.validate()?;
    if weights.len() != spec.d {
        return Err(invalid(
            "true_weights",
            format!("expected length {}, got {}", spec.d, weights.len()),
        ));
    }
    build_synthetic(spec, Some(weights))
}

fn build_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
    weights: Option<&[f64]>,
) -> Result<Dataset<T>, DataError> {
    let draw = draw_synthetic(spec, weights);
    let d = spec.d;
    let labels = draw
        .features
        .chunks_exact(d)
        .zip(&draw.noise)
        .map(|(x, &eps)| synthetic_label(&draw.weights, x, eps))
        .collect();
    let (train, val) = random_split(spec.n, spec.split_fraction, spec.seed);
    Dataset::new(
        draw.features.iter().map(|&v| T::of(v)).collect(),
        d,
        labels,
        train,
        val,
        Some(draw.weights.iter().map(|&v| T::of(v)).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, d: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            d,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_sized_split() {
        let ds: Dataset<f64> = generate_synthetic(&small(20_000, 512, 1)).unwrap();
        assert_eq!(ds.train_indices().len(), 16_000);
        assert_eq!(ds.val_indices().len(), 4_000);
        assert_eq!(ds.dim(), 512);
    }

    #[test]
    fn threshold_case() {
        // w* = e1, x1 = 0.5, no noise: sigma(0.5) ~ 0.622 > 0.5
        assert_eq!(synthetic_label(&[1.0, 0.0, 0.0], &[0.5, -0.9, 0.3], 0.0), 1);
        assert_eq!(synthetic_label(&[1.0, 0.0, 0.0], &[-0.5, 0.9, 0.3], 0.0), 0);
        // exact tie resolves to 0
        assert_eq!(synthetic_label(&[1.0], &[0.0], 0.0), 0);

        let spec = SyntheticSpec {
            noise_scale: 0.0,
            ..small(50, 3, 4)
        };
        let ds: Dataset<f64> = generate_synthetic_with_weights(&spec, &[1.0, 0.0, 0.0]).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.label(i), u8::from(ds.row(i)[0] > 0.0));
        }
    }

    #[test]
    fn label_balance_is_half() {
        let spec = SyntheticSpec {
            n: 100_000,
            d: 4,
            ..small(0, 0, 11)
        };
        let ds: Dataset<f64> = generate_synthetic(&spec).unwrap();
        let ones = ds.labels().iter().filter(|&&y| y == 1).count() as f64;
        let frac = ones / ds.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "label balance {frac}");
    }

    #[test]
    fn labels_match_sign_of_noisy_score() {
        let spec = small(500, 6, 3);
        let draw = draw_synthetic(&spec, None);
        let ds: Dataset<f64> = generate_synthetic(&spec).unwrap();
        for i in 0..spec.n {
            let x = &draw.features[i * 6..(i + 1) * 6];
            let t: f64 = draw.weights.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + draw.noise[i];
            assert_eq!(ds.label(i), u8::from(t > 0.0));
            let sigma = 1.0 / (1.0 + (-t).exp());
            assert_eq!(ds.label(i), u8::from(sigma > 0.5));
        }
    }

    #[test]
    fn weights_independent_of_n() {
        let a: Dataset<f64> = generate_synthetic(&small(100, 8, 5)).unwrap();
        let b: Dataset<f64> = generate_synthetic(&small(300, 8, 5)).unwrap();
        assert_eq!(a.true_weights(), b.true_weights());
        assert_eq!(a.row(7), b.row(7));
    }

    #[test]
    fn noise_convention() {
        let mut spec = small(10, 2, 0);
        assert!((spec.noise_std() - 0.1f64.sqrt()).abs() < 1e-15);
        spec.noise_convention = NoiseConvention::StdDev;
        assert_eq!(spec.noise_std(), 0.1);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases: [(SyntheticSpec, &str); 4] = [
            (small(1, 2, 0), "n"),
            (small(10, 0, 0), "d"),
            (
                SyntheticSpec {
                    noise_scale: -1.0,
                    ..small(10, 2, 0)
                },
                "noise_scale",
            ),
            (
                SyntheticSpec {
                    split_fraction: 0.0,
                    ..small(10, 2, 0)
                },
                "split_fraction",
            ),
        ];
        for (spec, field) in cases {
            match generate_synthetic::<f64>(&spec) {
                Err(DataError::InvalidParameter { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected error on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_overlapping_split() {
        let err = Dataset::<f64>::new(vec![0.0; 4], 2, vec![0, 1], vec![0, 1], vec![1], None);
        assert!(err.is_err());
        let err = Dataset::<f64>::new(vec![0.0; 4], 2, vec![0, 1], vec![0], vec![], None);
        assert!(err.is_err());
    }
}
