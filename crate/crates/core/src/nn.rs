//! A small feedforward classifier with hand-written gradients.
//!
//! The model is either linear softmax (`hidden_dim = 0`) or one hidden
//! rectifier layer. Weights are stored `fan_in × fan_out` so a forward pass
//! is `x·W + b`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::priors::ClassPrior;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OSNN1";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite logits")]
    NonFinite,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid sample weights: {0}")]
    Weights(String),
    #[error("class {0} has zero training samples")]
    EmptyClass(usize),
    #[error("prior must sum to 1, sums to {0}")]
    Prior(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weights);
        for i in 0..out.rows() {
            out.row_mut(i)
                .iter_mut()
                .zip(&self.bias)
                .for_each(|(o, b)| *o += b);
        }
        out
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

/// Parameters `θ` of the classifier `f(x; θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Dense>,
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
}

/// Gradients share the parameter layout.
pub type Gradients = MlpParams;

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        let layers = if hidden_dim == 0 {
            vec![Dense::zeros(input_dim, num_classes)]
        } else {
            vec![
                Dense::zeros(input_dim, hidden_dim),
                Dense::zeros(hidden_dim, num_classes),
            ]
        };
        Self {
            layers,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(input_dim, hidden_dim, num_classes);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weights.rows() as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn init_seeded(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self::init(
            input_dim,
            hidden_dim,
            num_classes,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let (input_dim, hidden_dim, num_classes) = match layers.as_slice() {
            [only] => (only.weights.rows(), 0, only.weights.cols()),
            [first, second] => {
                if first.weights.cols() != second.weights.rows() {
                    return Err(NnError::Shape("layer chain does not connect".into()));
                }
                (
                    first.weights.rows(),
                    first.weights.cols(),
                    second.weights.cols(),
                )
            }
            other => {
                return Err(NnError::Shape(format!(
                    "expected 1 or 2 layers, got {}",
                    other.len()
                )));
            }
        };
        for l in &layers {
            if l.bias.len() != l.weights.cols() {
                return Err(NnError::Shape(
                    "bias length must equal weight columns".into(),
                ));
            }
            if !l.values().all(|v| v.is_finite()) {
                return Err(NnError::Format("non-finite parameter".into()));
            }
        }
        Ok(Self {
            layers,
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters in a fixed order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn to_bits(&self) -> Vec<u64> {
        self.values().map(|v| v.to_bits()).collect()
    }
}

struct Activations {
    pre_hidden: Option<Matrix>,
    hidden: Option<Matrix>,
    logits: Matrix,
}

fn check_batch(params: &MlpParams, batch: &Matrix) -> Result<()> {
    if batch.cols() != params.input_dim {
        return Err(NnError::Shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            params.input_dim
        )));
    }
    Ok(())
}

fn forward_cached(params: &MlpParams, batch: &Matrix) -> Result<Activations> {
    check_batch(params, batch)?;
    match params.layers.as_slice() {
        [out] => Ok(Activations {
            pre_hidden: None,
            hidden: None,
            logits: out.apply(batch),
        }),
        [first, out] => {
            let pre = first.apply(batch);
            let mut hidden = pre.clone();
            hidden
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = v.max(0.0));
            let logits = out.apply(&hidden);
            Ok(Activations {
                pre_hidden: Some(pre),
                hidden: Some(hidden),
                logits,
            })
        }
        _ => unreachable!("constructors guarantee one or two layers"),
    }
}

/// Logits `B×K` for a batch `B×d`.
pub fn forward(params: &MlpParams, batch: &Matrix) -> Result<Matrix> {
    Ok(forward_cached(params, batch)?.logits)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        sums.iter_mut().zip(m.row(i)).for_each(|(s, v)| *s += v);
    }
    sums
}

/// Exact parameter gradients of `Σ_b ⟨grad_logits_b, f(x_b)⟩`.
///
/// The rectifier's subgradient at zero is zero.
pub fn backward(params: &MlpParams, batch: &Matrix, grad_logits: &Matrix) -> Result<Gradients> {
    let acts = forward_cached(params, batch)?;
    if grad_logits.rows() != batch.rows() || grad_logits.cols() != params.num_classes {
        return Err(NnError::Shape(format!(
            "grad_logits is {}×{}, expected {}×{}",
            grad_logits.rows(),
            grad_logits.cols(),
            batch.rows(),
            params.num_classes
        )));
    }
    let layers = match (&acts.pre_hidden, &acts.hidden) {
        (Some(pre), Some(hidden)) => {
            let out = &params.layers[1];
            let d_out = Dense {
                weights: hidden.t_matmul(grad_logits),
                bias: column_sums(grad_logits),
            };
            let mut d_pre = grad_logits.matmul_t(&out.weights);
            d_pre
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .for_each(|(g, &z)| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            let d_first = Dense {
                weights: batch.t_matmul(&d_pre),
                bias: column_sums(&d_pre),
            };
            vec![d_first, d_out]
        }
        _ => vec![Dense {
            weights: batch.t_matmul(grad_logits),
            bias: column_sums(grad_logits),
        }],
    };
    Ok(MlpParams {
        layers,
        input_dim: params.input_dim,
        hidden_dim: params.hidden_dim,
        num_classes: params.num_classes,
    })
}

/// Mean loss over a batch and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
}

/// Numerically stable softmax of one row, returning `(probs, log_sum_exp)`.
pub fn softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

fn check_logits(logits: &Matrix) -> Result<()> {
    if logits.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite)
    }
}

/// `mean_b w_b · (−log softmax(z_b)[y_b])`, gradient `w_b (p_b − e_{y_b}) / B`.
pub fn softmax_xent(
    logits: &Matrix,
    labels: &[usize],
    sample_weights: Option<&[f64]>,
) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(NnError::Shape(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(w) = sample_weights {
        if w.len() != b {
            return Err(NnError::Weights(format!(
                "{} weights for {b} samples",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NnError::Weights(
                "weights must be finite and non-negative".into(),
            ));
        }
    }
    let mut grad = Matrix::zeros(b, k);
    if b == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(NnError::Label {
                label: y,
                classes: k,
            });
        }
        let w = sample_weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let (probs, lse) = softmax_row(row);
        total += w * (lse - row[y]);
        let g = grad.row_mut(i);
        for (j, p) in probs.into_iter().enumerate() {
            g[j] = w * scale * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}

/// Cross-entropy on logits shifted by `log n_y`.
pub fn balanced_softmax_xent(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<LossOutput> {
    if prior.num_classes() != logits.cols() {
        return Err(NnError::Shape(format!(
            "prior has {} classes, logits have {}",
            prior.num_classes(),
            logits.cols()
        )));
    }
    if let Some(j) = prior.counts().iter().position(|&n| n == 0) {
        return Err(NnError::EmptyClass(j));
    }
    let shifts: Vec<f64> = prior.counts().iter().map(|&n| (n as f64).ln()).collect();
    let mut adjusted = logits.clone();
    for i in 0..adjusted.rows() {
        adjusted
            .row_mut(i)
            .iter_mut()
            .zip(&shifts)
            .for_each(|(z, s)| *z += s);
    }
    softmax_xent(&adjusted, labels, None)
}

/// `mean_b Σ_y −P(y) log softmax(z_b)[y]`.
pub fn oe_prior_xent(logits: &Matrix, prior: &[f64]) -> Result<LossOutput> {
    check_logits(logits)?;
    let (b, k) = (logits.rows(), logits.cols());
    if prior.len() != k {
        return Err(NnError::Shape(format!(
            "prior has {} entries, logits have {k}",
            prior.len()
        )));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || prior.iter().any(|p| *p < 0.0) {
        return Err(NnError::Prior(sum));
    }
    let mut grad = Matrix::zeros(b, k);
    if b == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let (probs, lse) = softmax_row(row);
        total += prior
            .iter()
            .zip(row)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, z)| p * (lse - z))
            .sum::<f64>();
        // d/dz Σ_y −P(y)(z_y − lse) = softmax · ΣP − P
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = scale * (probs[j] * sum - prior[j]);
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    2e-4
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Momentum buffers mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    velocity: Gradients,
}

impl OptimState {
    pub fn new(params: &MlpParams, config: OptimConfig) -> Self {
        Self {
            config,
            velocity: MlpParams::zeros(params.input_dim, params.hidden_dim, params.num_classes),
        }
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

/// `g' = g + λθ;  v ← μv + g';  θ ← θ − lr·v`.
pub fn sgd_step(params: &mut MlpParams, grads: &Gradients, state: &mut OptimState, lr: f64) {
    let OptimConfig {
        momentum,
        weight_decay,
    } = state.config;
    for ((theta, g), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.velocity.values_mut())
    {
        let g = g + weight_decay * *theta;
        *v = momentum * *v + g;
        *theta -= lr * *v;
    }
}

/// Linear warmup followed by multiplicative step decay at milestones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            warmup_epochs: 5,
            milestones: vec![160, 180],
            decay_factor: 0.01,
            total_epochs: 200,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(NnError::Schedule(format!(
                "base_lr must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0) {
            return Err(NnError::Schedule("decay_factor must be > 0".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NnError::Schedule(
                "milestones must be strictly increasing".into(),
            ));
        }
        if self
            .milestones
            .first()
            .is_some_and(|&m| m <= self.warmup_epochs)
        {
            return Err(NnError::Schedule(
                "milestones must come after warmup".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}

/// Largest relative discrepancy between analytic gradients of the mean
/// cross-entropy and central finite differences.
pub fn grad_check(params: &MlpParams, batch: &Matrix, labels: &[usize], eps: f64) -> Result<f64> {
    let loss_at = |p: &MlpParams| -> Result<f64> {
        Ok(softmax_xent(&forward(p, batch)?, labels, None)?.loss)
    };
    let out = softmax_xent(&forward(params, batch)?, labels, None)?;
    let analytic: Vec<f64> = backward(params, batch, &out.grad)?
        .values()
        .copied()
        .collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (idx, &ga) in analytic.iter().enumerate() {
        let orig = *probe.values().nth(idx).expect("index");
        *probe.values_mut().nth(idx).expect("index") = orig + eps;
        let up = loss_at(&probe)?;
        *probe.values_mut().nth(idx).expect("index") = orig - eps;
        let down = loss_at(&probe)?;
        *probe.values_mut().nth(idx).expect("index") = orig;
        let fd = (up - down) / (2.0 * eps);
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Writes an `OSNN1` checkpoint.
pub fn write_checkpoint<P: AsRef<Path>>(params: &MlpParams, path: P) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        buf.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
        for v in layer.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<MlpParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(NnError::Format("short read".into()));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(5)? != CHECKPOINT_MAGIC {
        return Err(NnError::Format("bad magic, expected OSNN1".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = read_u32(take(4)?);
    if !(1..=2).contains(&count) {
        return Err(NnError::Format(format!("unsupported layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(take(4)?);
        let cols = read_u32(take(4)?);
        let mut vals: Vec<f64> = take((rows * cols + cols) * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bias = vals.split_off(rows * cols);
        layers.push(Dense {
            weights: Matrix::from_vec(rows, cols, vals).expect("shape"),
            bias,
        });
    }
    if !cursor.is_empty() {
        return Err(NnError::Format("trailing bytes".into()));
    }
    MlpParams::from_layers(layers)
}
