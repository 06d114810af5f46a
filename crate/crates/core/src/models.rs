//! Differentiable models with exact per-sample losses and gradients.
//!
//! All three models keep their parameters in one flat vector so the
//! optimizer and the diversity statistics can treat them uniformly.
//!
//! | model        | layout                                   |
//! |--------------|------------------------------------------|
//! | logistic     | `w (d)`, `b`                             |
//! | MLP          | `W1 (h×d, row-major)`, `b1 (h)`, `w2 (h)`, `b2` |
//! | quadratic    | `θ (d)`                                  |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::rng::{self, Stream};
use crate::scalar::{add_into, dot, sq_norm};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sample has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("empty index list")]
    EmptyBatch,
    #[error("index {index} out of range for dataset of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("accuracy is undefined for the quadratic model")]
    NotClassifier,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Hidden-layer nonlinearity of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`. ReLU uses 0 at
    /// the kink.
    #[inline]
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of a logit: `log(1 + e^s) - y s`, without overflow.
#[inline]
pub fn bce_with_logit<T: Scalar>(s: T, y: u8) -> T {
    let softplus = s.max(T::zero()) + (-s.abs()).exp().ln_1p();
    if y == 1 {
        softplus - s
    } else {
        softplus
    }
}

#[inline]
fn label<T: Scalar>(y: u8) -> T {
    if y == 1 {
        T::one()
    } else {
        T::zero()
    }
}

/// A model with a flat parameter vector and analytic per-sample gradients.
///
/// The `*_unchecked` methods assume `x.len() == input_dim()` and
/// `grad.len() == num_params()`; use [`per_sample_loss`] and
/// [`per_sample_grad`] for the checked forms.
pub trait Model<T: Scalar>: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn loss_unchecked(&self, x: &[T], y: u8) -> T;

    /// Writes `∇ℓ` into `grad` (overwriting it) and returns `ℓ`.
    fn loss_grad_unchecked(&self, x: &[T], y: u8, grad: &mut [T]) -> T;

    /// Classification logit, `None` for models that do not classify.
    fn logit(&self, x: &[T]) -> Option<T>;

    /// Predicted label, `1{σ(s) > 0.5}`; ties go to 0.
    fn predict(&self, x: &[T]) -> Option<u8> {
        self.logit(x).map(|s| u8::from(s > T::zero()))
    }
}

/// Logistic regression, `s = w·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel<T> {
    d: usize,
    params: Vec<T>,
}

impl<T: Scalar> LogisticModel<T> {
    /// All-zero parameters.
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            params: vec![T::zero(); d + 1],
        }
    }

    pub fn from_parts(weights: Vec<T>, bias: T) -> Self {
        let d = weights.len();
        let mut params = weights;
        params.push(bias);
        Self { d, params }
    }

    pub fn from_params(d: usize, params: Vec<T>) -> Result<Self, ModelError> {
        check_len(d + 1, params.len())?;
        Ok(Self { d, params })
    }

    pub fn weights(&self) -> &[T] {
        &self.params[..self.d]
    }

    pub fn bias(&self) -> T {
        self.params[self.d]
    }
}

impl<T: Scalar> Model<T> for LogisticModel<T> {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    #[inline]
    fn loss_unchecked(&self, x: &[T], y: u8) -> T {
        bce_with_logit(dot(self.weights(), x) + self.bias(), y)
    }

    #[inline]
    fn loss_grad_unchecked(&self, x: &[T], y: u8, grad: &mut [T]) -> T {
        let s = dot(self.weights(), x) + self.bias();
        let r = sigmoid(s) - label::<T>(y);
        for (g, &v) in grad[..self.d].iter_mut().zip(x) {
            *g = r * v;
        }
        grad[self.d] = r;
        bce_with_logit(s, y)
    }

    fn logit(&self, x: &[T]) -> Option<T> {
        Some(dot(self.weights(), x) + self.bias())
    }
}

/// Two-layer perceptron with one hidden layer of width `h` and a scalar
/// logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    d: usize,
    h: usize,
    activation: Activation,
    params: Vec<T>,
}

/// Unflattened MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParts<T> {
    /// `h × d`, row-major.
    pub layer1_weights: Vec<T>,
    pub layer1_bias: Vec<T>,
    pub layer2_weights: Vec<T>,
    pub layer2_bias: T,
}

impl<T: Scalar> MlpModel<T> {
    pub fn param_count(d: usize, h: usize) -> usize {
        h * d + h + h + 1
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` initialisation per layer.
    pub fn init(d: usize, h: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init);
        let b1 = 1.0 / (d as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        let mut params = Vec::with_capacity(Self::param_count(d, h));
        params.extend((0..h * d + h).map(|_| T::of(rng.random_range(-b1..b1))));
        params.extend((0..h + 1).map(|_| T::of(rng.random_range(-b2..b2))));
        Self {
            d,
            h,
            activation,
            params,
        }
    }

    pub fn from_params(
        d: usize,
        h: usize,
        activation: Activation,
        params: Vec<T>,
    ) -> Result<Self, ModelError> {
        check_len(Self::param_count(d, h), params.len())?;
        Ok(Self {
            d,
            h,
            activation,
            params,
        })
    }

    pub fn from_parts(d: usize, activation: Activation, parts: MlpParts<T>) -> Result<Self, ModelError> {
        let h = parts.layer1_bias.len();
        check_len(h * d, parts.layer1_weights.len())?;
        check_len(h, parts.layer2_weights.len())?;
        let mut params = parts.layer1_weights;
        params.extend(parts.layer1_bias);
        params.extend(parts.layer2_weights);
        params.push(parts.layer2_bias);
        Self::from_params(d, h, activation, params)
    }

    pub fn to_parts(&self) -> MlpParts<T> {
        let (w1, b1, w2, b2) = self.split();
        MlpParts {
            layer1_weights: w1.to_vec(),
            layer1_bias: b1.to_vec(),
            layer2_weights: w2.to_vec(),
            layer2_bias: b2,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.h
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn split(&self) -> (&[T], &[T], &[T], T) {
        let (hd, h) = (self.h * self.d, self.h);
        (
            &self.params[..hd],
            &self.params[hd..hd + h],
            &self.params[hd + h..hd + 2 * h],
            self.params[hd + 2 * h],
        )
    }

    /// Hidden pre-activations for `x`.
    pub fn hidden_preactivations(&self, x: &[T]) -> Vec<T> {
        let (w1, b1, _, _) = self.split();
        w1.chunks_exact(self.d)
            .zip(b1)
            .map(|(row, &b)| dot(row, x) + b)
            .collect()
    }

    fn forward(&self, x: &[T], z: &mut Vec<T>, a: &mut Vec<T>) -> T {
        let (w1, b1, w2, b2) = self.split();
        z.clear();
        a.clear();
        for (row, &b) in w1.chunks_exact(self.d).zip(b1) {
            let zi = dot(row, x) + b;
            z.push(zi);
            a.push(self.activation.apply(zi));
        }
        dot(w2, a) + b2
    }
}

impl<T: Scalar> Model<T> for MlpModel<T> {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn loss_unchecked(&self, x: &[T], y: u8) -> T {
        let (mut z, mut a) = (Vec::with_capacity(self.h), Vec::with_capacity(self.h));
        bce_with_logit(self.forward(x, &mut z, &mut a), y)
    }

    fn loss_grad_unchecked(&self, x: &[T], y: u8, grad: &mut [T]) -> T {
        let (mut z, mut a) = (Vec::with_capacity(self.h), Vec::with_capacity(self.h));
        let s = self.forward(x, &mut z, &mut a);
        let r = sigmoid(s) - label::<T>(y);
        let (hd, h) = (self.h * self.d, self.h);
        let w2 = &self.params[hd + h..hd + 2 * h];

        let (g_w1, rest) = grad.split_at_mut(hd);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(h);
        g_b2[0] = r;
        for j in 0..h {
            g_w2[j] = r * a[j];
            let dz = r * w2[j] * self.activation.derivative(z[j], a[j]);
            g_b1[j] = dz;
            for (g, &v) in g_w1[j * self.d..(j + 1) * self.d].iter_mut().zip(x) {
                *g = dz * v;
            }
        }
        bce_with_logit(s, y)
    }

    fn logit(&self, x: &[T]) -> Option<T> {
        let (mut z, mut a) = (Vec::with_capacity(self.h), Vec::with_capacity(self.h));
        Some(self.forward(x, &mut z, &mut a))
    }
}

/// `ℓ(θ; z) = ½‖θ − z‖²`. The empirical minimizer is the mean of the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel<T> {
    theta: Vec<T>,
}

impl<T: Scalar> QuadraticModel<T> {
    pub fn new(theta: Vec<T>) -> Self {
        Self { theta }
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }
}

impl<T: Scalar> Model<T> for QuadraticModel<T> {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[T] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    #[inline]
    fn loss_unchecked(&self, x: &[T], _y: u8) -> T {
        let half = T::of(0.5);
        half * self
            .theta
            .iter()
            .zip(x)
            .map(|(&t, &z)| (t - z) * (t - z))
            .sum::<T>()
    }

    #[inline]
    fn loss_grad_unchecked(&self, x: &[T], _y: u8, grad: &mut [T]) -> T {
        for ((g, &t), &z) in grad.iter_mut().zip(&self.theta).zip(x) {
            *g = t - z;
        }
        T::of(0.5) * sq_norm(grad)
    }

    fn logit(&self, _x: &[T]) -> Option<T> {
        None
    }
}

/// Model family tag used by configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    Logistic,
    Mlp { hidden: usize, activation: Activation },
    Quadratic,
}

/// Closed set of the models above.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<T> {
    Logistic(LogisticModel<T>),
    Mlp(MlpModel<T>),
    Quadratic(QuadraticModel<T>),
}

impl<T: Scalar> AnyModel<T> {
    /// Default initial model for `family`: zeros for logistic and quadratic,
    /// seeded uniform for the MLP.
    pub fn init(family: ModelFamily, d: usize, seed: u64) -> Self {
        match family {
            ModelFamily::Logistic => AnyModel::Logistic(LogisticModel::zeros(d)),
            ModelFamily::Mlp { hidden, activation } => {
                AnyModel::Mlp(MlpModel::init(d, hidden, activation, seed))
            }
            ModelFamily::Quadratic => AnyModel::Quadratic(QuadraticModel::new(vec![T::zero(); d])),
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            AnyModel::Logistic(_) => ModelFamily::Logistic,
            AnyModel::Mlp(m) => ModelFamily::Mlp {
                hidden: m.h,
                activation: m.activation,
            },
            AnyModel::Quadratic(_) => ModelFamily::Quadratic,
        }
    }

    /// Same family and shape with a different parameter vector.
    pub fn with_params(&self, params: Vec<T>) -> Result<Self, ModelError> {
        let d = self.input_dim();
        Ok(match self {
            AnyModel::Logistic(_) => AnyModel::Logistic(LogisticModel::from_params(d, params)?),
            AnyModel::Mlp(m) => AnyModel::Mlp(MlpModel::from_params(d, m.h, m.activation, params)?),
            AnyModel::Quadratic(_) => {
                check_len(d, params.len())?;
                AnyModel::Quadratic(QuadraticModel::new(params))
            }
        })
    }

    /// Text checkpoint: `key=value` header lines, a blank line, then one
    /// parameter per line in flattening order.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let family = match self.family() {
            ModelFamily::Logistic => "logistic".to_string(),
            ModelFamily::Mlp { .. } => "mlp".to_string(),
            ModelFamily::Quadratic => "quadratic".to_string(),
        };
        let _ = writeln!(out, "family={family}");
        let _ = writeln!(out, "scalar={}", T::NAME);
        let _ = writeln!(out, "input_dim={}", self.input_dim());
        if let AnyModel::Mlp(m) = self {
            let _ = writeln!(out, "hidden={}", m.h);
            let _ = writeln!(out, "activation={}", m.activation.name());
        }
        let _ = writeln!(out, "params={}", self.num_params());
        out.push('\n');
        for v in self.params() {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        let mut lines = text.lines();
        let mut header = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| bad(format!("missing header `{k}`")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("header `{k}` is not an integer")))
        };
        let scalar = get("scalar")?;
        if scalar != T::NAME {
            return Err(bad(format!("checkpoint holds {scalar}, expected {}", T::NAME)));
        }
        let d = num("input_dim")?;
        let p = num("params")?;
        let params = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<T>().map_err(|_| bad(format!("bad parameter `{l}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if params.len() != p {
            return Err(bad(format!("header says {p} parameters, found {}", params.len())));
        }
        match get("family")?.as_str() {
            "logistic" => Ok(AnyModel::Logistic(LogisticModel::from_params(d, params)?)),
            "mlp" => {
                let act = get("activation")?;
                let act = Activation::parse(&act).ok_or_else(|| bad(format!("unknown activation `{act}`")))?;
                Ok(AnyModel::Mlp(MlpModel::from_params(d, num("hidden")?, act, params)?))
            }
            "quadratic" => {
                check_len(d, params.len())?;
                Ok(AnyModel::Quadratic(QuadraticModel::new(params)))
            }
            other => Err(bad(format!("unknown family `{other}`"))),
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path.as_ref(), self.to_checkpoint())
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_checkpoint(&text)
    }
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Logistic($m) => $e,
            AnyModel::Mlp($m) => $e,
            AnyModel::Quadratic($m) => $e,
        }
    };
}

impl<T: Scalar> Model<T> for AnyModel<T> {
    fn input_dim(&self) -> usize {
        dispatch!(self, m => m.input_dim())
    }

    fn params(&self) -> &[T] {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut [T] {
        dispatch!(self, m => m.params_mut())
    }

    fn loss_unchecked(&self, x: &[T], y: u8) -> T {
        dispatch!(self, m => m.loss_unchecked(x, y))
    }

    fn loss_grad_unchecked(&self, x: &[T], y: u8, grad: &mut [T]) -> T {
        dispatch!(self, m => m.loss_grad_unchecked(x, y, grad))
    }

    fn logit(&self, x: &[T]) -> Option<T> {
        dispatch!(self, m => m.logit(x))
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::ParamLength { expected, got })
    }
}

fn check_dim<T: Scalar, M: Model<T>>(model: &M, x: &[T]) -> Result<(), ModelError> {
    if x.len() == model.input_dim() {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        })
    }
}

pub fn per_sample_loss<T: Scalar, M: Model<T>>(model: &M, x: &[T], y: u8) -> Result<T, ModelError> {
    check_dim(model, x)?;
    Ok(model.loss_unchecked(x, y))
}

pub fn per_sample_grad<T: Scalar, M: Model<T>>(
    model: &M,
    x: &[T],
    y: u8,
) -> Result<Vec<T>, ModelError> {
    check_dim(model, x)?;
    let mut g = vec![T::zero(); model.num_params()];
    model.loss_grad_unchecked(x, y, &mut g);
    Ok(g)
}

/// How per-sample work is reduced across threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Indices are cut into fixed chunks of [`REDUCTION_CHUNK`]; each chunk is
    /// summed in list order and the chunk partials are added left to right.
    /// Results are bitwise identical regardless of thread count.
    #[default]
    Deterministic,
    /// Work-stealing reduction; summation order depends on scheduling.
    Parallel,
}

pub const REDUCTION_CHUNK: usize = 64;

/// Per-batch sums of per-sample gradients, squared gradient norms and losses.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats<T> {
    pub grad_sum: Vec<T>,
    pub sq_norm_sum: T,
    pub loss_sum: T,
    pub count: usize,
}

impl<T: Scalar> GradStats<T> {
    pub fn zeros(p: usize) -> Self {
        Self {
            grad_sum: vec![T::zero(); p],
            sq_norm_sum: T::zero(),
            loss_sum: T::zero(),
            count: 0,
        }
    }

    pub fn merge(&mut self, other: &GradStats<T>) {
        add_into(&mut self.grad_sum, &other.grad_sum);
        self.sq_norm_sum += other.sq_norm_sum;
        self.loss_sum += other.loss_sum;
        self.count += other.count;
    }

    fn push_sample<M: Model<T>>(&mut self, model: &M, x: &[T], y: u8, scratch: &mut [T]) {
        self.loss_sum += model.loss_grad_unchecked(x, y, scratch);
        self.sq_norm_sum += sq_norm(scratch);
        add_into(&mut self.grad_sum, scratch);
        self.count += 1;
    }

    /// `‖Σ ∇ℓ‖²`.
    pub fn grad_sum_sq_norm(&self) -> T {
        sq_norm(&self.grad_sum)
    }

    pub fn is_finite(&self) -> bool {
        self.sq_norm_sum.is_finite()
            && self.loss_sum.is_finite()
            && self.grad_sum.iter().all(|g| g.is_finite())
    }
}

fn check_indices<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
) -> Result<(), ModelError> {
    if indices.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if data.dim() != model.input_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    if let Some(&index) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(ModelError::IndexOutOfRange {
            index,
            len: data.len(),
        });
    }
    Ok(())
}

fn chunk_stats<T: Scalar, M: Model<T>>(model: &M, data: &Dataset<T>, chunk: &[usize]) -> GradStats<T> {
    let p = model.num_params();
    let mut stats = GradStats::zeros(p);
    let mut scratch = vec![T::zero(); p];
    for &i in chunk {
        stats.push_sample(model, data.row(i), data.label(i), &mut scratch);
    }
    stats
}

/// Sum of per-sample gradients, squared norms and losses over `indices`.
pub fn batch_grad_stats<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    reduction: Reduction,
) -> Result<GradStats<T>, ModelError> {
    check_indices(model, data, indices)?;
    Ok(batch_grad_stats_unchecked(model, data, indices, reduction))
}

pub(crate) fn batch_grad_stats_unchecked<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    reduction: Reduction,
) -> GradStats<T> {
    let p = model.num_params();
    if indices.len() <= REDUCTION_CHUNK {
        return chunk_stats(model, data, indices);
    }
    match reduction {
        Reduction::Deterministic => {
            let partials: Vec<GradStats<T>> = indices
                .par_chunks(REDUCTION_CHUNK)
                .map(|c| chunk_stats(model, data, c))
                .collect();
            let mut total = GradStats::zeros(p);
            for part in &partials {
                total.merge(part);
            }
            total
        }
        Reduction::Parallel => indices
            .par_iter()
            .fold(
                || (GradStats::zeros(p), vec![T::zero(); p]),
                |(mut stats, mut scratch), &i| {
                    stats.push_sample(model, data.row(i), data.label(i), &mut scratch);
                    (stats, scratch)
                },
            )
            .map(|(stats, _)| stats)
            .reduce(
                || GradStats::zeros(p),
                |mut a, b| {
                    a.merge(&b);
                    a
                },
            ),
    }
}

/// Mean loss and (for classifiers) accuracy over `indices`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<T> {
    pub mean_loss: T,
    pub accuracy: Option<T>,
}

pub fn evaluate<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
    reduction: Reduction,
) -> Result<Evaluation<T>, ModelError> {
    check_indices(model, data, indices)?;
    let chunk = |c: &[usize]| -> (T, usize) {
        let mut loss = T::zero();
        let mut correct = 0usize;
        for &i in c {
            let (x, y) = (data.row(i), data.label(i));
            match model.logit(x) {
                Some(s) => {
                    loss += bce_with_logit(s, y);
                    correct += usize::from(u8::from(s > T::zero()) == y);
                }
                None => loss += model.loss_unchecked(x, y),
            }
        }
        (loss, correct)
    };
    let (loss, correct) = match reduction {
        Reduction::Deterministic => indices
            .par_chunks(REDUCTION_CHUNK)
            .map(chunk)
            .collect::<Vec<_>>()
            .into_iter()
            .fold((T::zero(), 0), |(l, c), (dl, dc)| (l + dl, c + dc)),
        Reduction::Parallel => indices
            .par_chunks(REDUCTION_CHUNK)
            .map(chunk)
            .reduce(|| (T::zero(), 0), |(l, c), (dl, dc)| (l + dl, c + dc)),
    };
    let n = T::of(indices.len() as f64);
    let accuracy = model
        .logit(data.row(indices[0]))
        .map(|_| T::of(correct as f64) / n);
    Ok(Evaluation {
        mean_loss: loss / n,
        accuracy,
    })
}

/// Like [`evaluate`] but fails for models without a classification output.
pub fn accuracy<T: Scalar, M: Model<T>>(
    model: &M,
    data: &Dataset<T>,
    indices: &[usize],
) -> Result<T, ModelError> {
    evaluate(model, data, indices, Reduction::Deterministic)?
        .accuracy
        .ok_or(ModelError::NotClassifier)
}
