//! Training loops: open-sampling and the baselines it composes with.
//!
//! Every iteration pairs a minibatch of training samples with a minibatch of
//! auxiliary instances drawn uniformly (with replacement) from the pool. For
//! open-sampling each auxiliary instance gets a fresh label `ỹ ~ Γ` and the
//! objective is
//!
//! ```text
//! L_total = L_base(train batch) + η · mean_i ω_{ỹ_i} · CE(f(x̃_i), ỹ_i)
//! ```
//!
//! Randomness comes from three independent streams derived from the run
//! seed (initialisation, shuffling, auxiliary sampling), so switching the
//! regulariser on or off leaves the other two untouched.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AuxiliaryPool, LabeledDataset};
use crate::matrix::Matrix;
use crate::metrics::{self, MetricsError};
use crate::nn::{self, Gradients, LrSchedule, MlpParams, NnError, OptimConfig, OptimState};
use crate::priors::{self, ClassPrior, ClassWeights, LabelDistributionKind, PriorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("method {0} needs an auxiliary pool")]
    MissingAux(&'static str),
    #[error("train set has {train} classes, test set has {test}")]
    ClassMismatch { train: usize, test: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss on the training minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseLoss {
    Standard,
    /// Cross-entropy weighted by inverse effective class sizes.
    CbRw,
    BalancedSoftmax,
}

/// Term computed on the auxiliary minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularizer {
    None,
    /// Cross-entropy against labels sampled from a label distribution.
    OpenSampling,
    /// Cross-entropy against the training prior (outlier exposure).
    OutlierExposure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Standard,
    OpenSampling,
    CbRw,
    BalancedSoftmax,
    Oe,
    #[serde(rename = "balanced-softmax+open-sampling")]
    BalancedSoftmaxOpenSampling,
    #[serde(rename = "cb-rw+open-sampling")]
    CbRwOpenSampling,
}

impl Method {
    pub fn parts(self) -> (BaseLoss, Regularizer) {
        match self {
            Self::Standard => (BaseLoss::Standard, Regularizer::None),
            Self::OpenSampling => (BaseLoss::Standard, Regularizer::OpenSampling),
            Self::CbRw => (BaseLoss::CbRw, Regularizer::None),
            Self::BalancedSoftmax => (BaseLoss::BalancedSoftmax, Regularizer::None),
            Self::Oe => (BaseLoss::Standard, Regularizer::OutlierExposure),
            Self::BalancedSoftmaxOpenSampling => {
                (BaseLoss::BalancedSoftmax, Regularizer::OpenSampling)
            }
            Self::CbRwOpenSampling => (BaseLoss::CbRw, Regularizer::OpenSampling),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::OpenSampling => "open-sampling",
            Self::CbRw => "cb-rw",
            Self::BalancedSoftmax => "balanced-softmax",
            Self::Oe => "oe",
            Self::BalancedSoftmaxOpenSampling => "balanced-softmax+open-sampling",
            Self::CbRwOpenSampling => "cb-rw+open-sampling",
        }
    }

    pub fn needs_aux(self) -> bool {
        self.parts().1 != Regularizer::None
    }
}

fn default_eta() -> f64 {
    1.5
}
fn default_true() -> bool {
    true
}
fn default_beta_cb() -> f64 {
    0.9999
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Strength of the auxiliary term; also the outlier-exposure weight.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// `α` for the complementary distribution; `None` means `max β + min β`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub label_dist: LabelDistributionKind,
    /// Weight auxiliary samples by `ω_ỹ = K·p(ỹ)`; unit weights otherwise.
    #[serde(default = "default_true")]
    pub use_class_weights: bool,
    /// Draw one label per pool instance up front instead of every iteration.
    #[serde(default)]
    pub fixed_labels: bool,
    /// `β` of the effective-number weights used by CB-RW.
    #[serde(default = "default_beta_cb")]
    pub beta_cb: f64,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_train: usize,
    /// Auxiliary minibatch size; defaults to `batch_train`.
    #[serde(default)]
    pub batch_aux: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            eta: default_eta(),
            alpha: None,
            label_dist: LabelDistributionKind::default(),
            use_class_weights: true,
            fixed_labels: false,
            beta_cb: default_beta_cb(),
            hidden_dim: 0,
            epochs: default_epochs(),
            batch_train: default_batch(),
            batch_aux: None,
            seed,
            schedule: LrSchedule::default(),
            optim: OptimConfig::default(),
        }
    }

    pub fn aux_batch_size(&self) -> usize {
        self.batch_aux.unwrap_or(self.batch_train)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if self.batch_train == 0 || self.aux_batch_size() == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return bad(format!("alpha must be > 0, got {a}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta_cb) {
            return bad(format!("beta_cb must lie in [0, 1), got {}", self.beta_cb));
        }
        if !(self.optim.momentum >= 0.0) || !(self.optim.weight_decay >= 0.0) {
            return bad("momentum and weight_decay must be >= 0".into());
        }
        self.schedule.validate()?;
        let open = self.method.parts().1 == Regularizer::OpenSampling;
        if !open {
            if self.fixed_labels {
                return bad(format!(
                    "fixed_labels requires an open-sampling method, not {}",
                    self.method.name()
                ));
            }
            if self.label_dist != LabelDistributionKind::default() {
                return bad(format!(
                    "label_dist requires an open-sampling method, not {}",
                    self.method.name()
                ));
            }
        }
        Ok(())
    }

    /// Label distribution for auxiliary instances under this config.
    pub fn label_probs(&self, prior: &ClassPrior) -> Result<Vec<f64>> {
        let kind = match &self.label_dist {
            LabelDistributionKind::Complementary { alpha: None } => {
                LabelDistributionKind::Complementary { alpha: self.alpha }
            }
            other => other.clone(),
        };
        Ok(kind.resolve(prior)?)
    }
}

/// Inverse-CDF sampler over class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSampler {
    cdf: Vec<f64>,
    last_nonzero: usize,
}

impl LabelSampler {
    pub fn new(probs: &[f64]) -> Result<Self> {
        priors::validate_distribution(probs, probs.len(), 1e-9)?;
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last_nonzero = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Ok(Self { cdf, last_nonzero })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.last_nonzero)
            .min(self.last_nonzero)
    }
}

/// `m` i.i.d. labels from `probs`.
pub fn sample_aux_labels<R: Rng>(probs: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let sampler = LabelSampler::new(probs)?;
    Ok((0..m).map(|_| sampler.sample(rng)).collect())
}

/// Draws auxiliary minibatches and their labels.
#[derive(Debug, Clone)]
pub struct AuxBatcher {
    pool_len: usize,
    batch: usize,
    sampler: LabelSampler,
    fixed: Option<Vec<usize>>,
}

impl AuxBatcher {
    /// With `fixed_labels`, every pool instance receives one label now that
    /// it keeps for the whole run.
    pub fn new<R: Rng>(
        pool_len: usize,
        batch: usize,
        probs: &[f64],
        fixed_labels: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if pool_len == 0 || batch == 0 {
            return Err(TrainError::EmptyBatch);
        }
        let sampler = LabelSampler::new(probs)?;
        let fixed = fixed_labels.then(|| (0..pool_len).map(|_| sampler.sample(rng)).collect());
        Ok(Self {
            pool_len,
            batch,
            sampler,
            fixed,
        })
    }

    /// Pool indices (uniform, with replacement) and their labels.
    pub fn next_batch<R: Rng>(&self, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.batch)
            .map(|_| rng.random_range(0..self.pool_len))
            .collect();
        let labels = match &self.fixed {
            Some(fixed) => idx.iter().map(|&i| fixed[i]).collect(),
            None => (0..self.batch).map(|_| self.sampler.sample(rng)).collect(),
        };
        (idx, labels)
    }

    /// Pool indices only, for regularisers that ignore labels.
    pub fn next_indices<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.batch)
            .map(|_| rng.random_range(0..self.pool_len))
            .collect()
    }
}

/// Per-step loss breakdown: `total = base + eta · aux`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub base: f64,
    pub aux: f64,
    pub total: f64,
}

/// The training-batch loss and anything it needs.
#[derive(Debug, Clone)]
pub enum BaseTerm {
    Standard,
    Weighted(ClassWeights),
    Balanced(ClassPrior),
}

impl BaseTerm {
    pub fn build(base: BaseLoss, prior: &ClassPrior, beta_cb: f64) -> Result<Self> {
        Ok(match base {
            BaseLoss::Standard => Self::Standard,
            BaseLoss::CbRw => Self::Weighted(priors::cb_effective_weights(prior, beta_cb)?),
            BaseLoss::BalancedSoftmax => Self::Balanced(prior.clone()),
        })
    }

    fn loss(&self, logits: &Matrix, labels: &[usize]) -> Result<nn::LossOutput> {
        Ok(match self {
            Self::Standard => nn::softmax_xent(logits, labels, None)?,
            Self::Weighted(w) => {
                let sw: Vec<f64> = labels.iter().map(|&y| w.get(y)).collect();
                nn::softmax_xent(logits, labels, Some(&sw))?
            }
            Self::Balanced(prior) => nn::balanced_softmax_xent(logits, labels, prior)?,
        })
    }
}

/// The auxiliary-batch term for one step.
pub enum AuxTerm<'a> {
    None,
    Labeled {
        features: &'a Matrix,
        labels: &'a [usize],
        weights: &'a ClassWeights,
    },
    Prior {
        features: &'a Matrix,
        prior: &'a [f64],
    },
}

/// One SGD step on `L_base + eta · L_aux`. With `eta = 0` the auxiliary
/// term is neither evaluated nor reported, so the step is bit-identical to a
/// base-only step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut MlpParams,
    state: &mut OptimState,
    lr: f64,
    features: &Matrix,
    labels: &[usize],
    base: &BaseTerm,
    aux: AuxTerm<'_>,
    eta: f64,
) -> Result<StepLosses> {
    if features.rows() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let logits = nn::forward(params, features)?;
    let base_out = base.loss(&logits, labels)?;
    let mut grads: Gradients = nn::backward(params, features, &base_out.grad)?;

    let aux = if eta == 0.0 { AuxTerm::None } else { aux };
    let aux_out = match aux {
        AuxTerm::None => None,
        AuxTerm::Labeled {
            features,
            labels,
            weights,
        } => {
            if features.rows() == 0 {
                return Err(TrainError::EmptyBatch);
            }
            let z = nn::forward(params, features)?;
            let sw: Vec<f64> = labels.iter().map(|&y| weights.get(y)).collect();
            Some((features, nn::softmax_xent(&z, labels, Some(&sw))?))
        }
        AuxTerm::Prior { features, prior } => {
            if features.rows() == 0 {
                return Err(TrainError::EmptyBatch);
            }
            let z = nn::forward(params, features)?;
            Some((features, nn::oe_prior_xent(&z, prior)?))
        }
    };
    let aux_loss = match aux_out {
        Some((x, out)) => {
            let g = nn::backward(params, x, &out.grad)?;
            grads.add_scaled(&g, eta);
            out.loss
        }
        None => 0.0,
    };
    nn::sgd_step(params, &grads, state, lr);
    Ok(StepLosses {
        base: base_out.loss,
        aux: aux_loss,
        total: base_out.loss + eta * aux_loss,
    })
}

/// One open-sampling step: draws `ỹ ~ Γ` for the auxiliary batch, then
/// descends on `CE(train) + eta · ω-weighted CE(aux)`.
#[allow(clippy::too_many_arguments)]
pub fn open_sampling_step<R: Rng>(
    params: &mut MlpParams,
    state: &mut OptimState,
    lr: f64,
    train_features: &Matrix,
    train_labels: &[usize],
    aux_features: &Matrix,
    sampler: &LabelSampler,
    weights: &ClassWeights,
    eta: f64,
    rng: &mut R,
) -> Result<(StepLosses, Vec<usize>)> {
    if train_features.cols() != aux_features.cols() {
        return Err(TrainError::Dimension(format!(
            "train features have {} columns, auxiliary {}",
            train_features.cols(),
            aux_features.cols()
        )));
    }
    let labels: Vec<usize> = (0..aux_features.rows())
        .map(|_| sampler.sample(rng))
        .collect();
    let losses = train_step(
        params,
        state,
        lr,
        train_features,
        train_labels,
        &BaseTerm::Standard,
        AuxTerm::Labeled {
            features: aux_features,
            labels: &labels,
            weights,
        },
        eta,
    )?;
    Ok((losses, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub base_loss: f64,
    pub aux_loss: f64,
    pub test_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_params: MlpParams,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<StepLosses>,
    pub config: TrainConfig,
    /// Auxiliary label distribution and weights actually used, if any.
    pub label_probs: Option<Vec<f64>>,
    pub class_weights: Option<ClassWeights>,
    pub wall_time_secs: f64,
}

/// Independent generator `stream` of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const AUX_STREAM: u64 = 2;

pub fn train_run(
    config: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    aux: Option<&AuxiliaryPool>,
) -> Result<RunResult> {
    let started = Instant::now();
    config.validate()?;
    let k = train.num_classes();
    if test.num_classes() != k {
        return Err(TrainError::ClassMismatch {
            train: k,
            test: test.num_classes(),
        });
    }
    if test.dim() != train.dim() {
        return Err(TrainError::Dimension(format!(
            "train d={}, test d={}",
            train.dim(),
            test.dim()
        )));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (base_kind, reg) = config.method.parts();
    let aux = match (reg, aux) {
        (Regularizer::None, _) => None,
        (_, None) => return Err(TrainError::MissingAux(config.method.name())),
        (_, Some(pool)) => {
            if pool.dim() != train.dim() {
                return Err(TrainError::Dimension(format!(
                    "train d={}, auxiliary d={}",
                    train.dim(),
                    pool.dim()
                )));
            }
            Some(pool)
        }
    };

    let prior = ClassPrior::from_counts(&train.class_counts())?;
    let base = BaseTerm::build(base_kind, &prior, config.beta_cb)?;

    let mut init_rng = stream_rng(config.seed, INIT_STREAM);
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut aux_rng = stream_rng(config.seed, AUX_STREAM);

    let mut params = MlpParams::init(train.dim(), config.hidden_dim, k, &mut init_rng);
    let mut state = OptimState::new(&params, config.optim);

    let (label_probs, class_weights, aux_prior) = match reg {
        Regularizer::OpenSampling => {
            let probs = config.label_probs(&prior)?;
            let weights = if config.use_class_weights {
                priors::weights_from_probs(&probs)
            } else {
                ClassWeights::uniform(k)
            };
            (Some(probs), Some(weights), None)
        }
        Regularizer::OutlierExposure => (None, None, Some(prior.betas().to_vec())),
        Regularizer::None => (None, None, None),
    };
    let batcher = match aux {
        Some(pool) => {
            let probs = label_probs
                .clone()
                .unwrap_or_else(|| vec![1.0 / k as f64; k]);
            Some(AuxBatcher::new(
                pool.len(),
                config.aux_batch_size(),
                &probs,
                config.fixed_labels,
                &mut aux_rng,
            )?)
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_base, mut sum_aux, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_train) {
            let x = train.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let losses = match (reg, aux, &batcher) {
                (Regularizer::OpenSampling, Some(pool), Some(b)) => {
                    let (idx, labels) = b.next_batch(&mut aux_rng);
                    let ax = pool.features().select_rows(&idx);
                    train_step(
                        &mut params,
                        &mut state,
                        lr,
                        &x,
                        &y,
                        &base,
                        AuxTerm::Labeled {
                            features: &ax,
                            labels: &labels,
                            weights: class_weights.as_ref().expect("set for open-sampling"),
                        },
                        config.eta,
                    )?
                }
                (Regularizer::OutlierExposure, Some(pool), Some(b)) => {
                    let ax = pool.features().select_rows(&b.next_indices(&mut aux_rng));
                    train_step(
                        &mut params,
                        &mut state,
                        lr,
                        &x,
                        &y,
                        &base,
                        AuxTerm::Prior {
                            features: &ax,
                            prior: aux_prior.as_deref().expect("set for outlier exposure"),
                        },
                        config.eta,
                    )?
                }
                _ => train_step(
                    &mut params,
                    &mut state,
                    lr,
                    &x,
                    &y,
                    &base,
                    AuxTerm::None,
                    config.eta,
                )?,
            };
            sum_total += losses.total;
            sum_base += losses.base;
            sum_aux += losses.aux;
            steps += 1;
            step_losses.push(losses);
        }
        let report = metrics::accuracy(&params, test)?;
        let steps = steps as f64;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: sum_total / steps,
            base_loss: sum_base / steps,
            aux_loss: sum_aux / steps,
            test_acc: report.overall_acc,
            per_class_acc: report.per_class_acc,
        });
    }
    Ok(RunResult {
        final_params: params,
        history,
        step_losses,
        config: config.clone(),
        label_probs,
        class_weights,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_classes, gen_gaussian_split, gen_ood_pool, PoolSpec};
    use crate::priors::prior_from_counts;

    fn quick(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_train: 16,
            hidden_dim: 6,
            schedule: LrSchedule {
                base_lr: 0.05,
                warmup_epochs: 1,
                milestones: vec![4],
                decay_factor: 0.1,
                total_epochs: 6,
            },
            ..TrainConfig::new(method, seed)
        }
    }

    fn task() -> (LabeledDataset, LabeledDataset, AuxiliaryPool) {
        let (train, test) =
            gen_gaussian_split(3, 4, &[60, 20, 6], &[20, 20, 20], 3.0, 1.0, 1).unwrap();
        let pool = gen_ood_pool(&PoolSpec::Gaussian { scale: 2.0 }, 100, 4, 3).unwrap();
        (train, test, pool)
    }

    #[test]
    fn label_sampling() {
        let mut rng = stream_rng(1, 0);
        assert!(sample_aux_labels(&[0.0, 1.0], 500, &mut rng)
            .unwrap()
            .iter()
            .all(|&y| y == 1));

        let mut rng = stream_rng(2, 0);
        let labels = sample_aux_labels(&[0.1; 10], 100_000, &mut rng).unwrap();
        let mut freq = [0usize; 10];
        labels.iter().for_each(|&y| freq[y] += 1);
        for f in freq {
            assert!((f as f64 / 1e5 - 0.1).abs() < 0.01);
        }

        let a = sample_aux_labels(&[0.2, 0.3, 0.5], 50, &mut stream_rng(9, 2)).unwrap();
        let b = sample_aux_labels(&[0.2, 0.3, 0.5], 50, &mut stream_rng(9, 2)).unwrap();
        assert_eq!(a, b);
        assert!(sample_aux_labels(&[0.2, 0.2], 5, &mut rng).is_err());
    }

    #[test]
    fn labels_are_fresh_unless_fixed() {
        let probs = [0.2, 0.3, 0.5];
        let mut rng = stream_rng(4, 2);
        let fresh = AuxBatcher::new(20, 10, &probs, false, &mut rng).unwrap();
        let epoch = |rng: &mut ChaCha8Rng| {
            (0..10)
                .flat_map(|_| fresh.next_batch(rng).1)
                .collect::<Vec<_>>()
        };
        let (e1, e2) = (epoch(&mut rng), epoch(&mut rng));
        assert_ne!(e1, e2);

        let fixed = AuxBatcher::new(20, 10, &probs, true, &mut rng).unwrap();
        let mut seen = [None; 20];
        for _ in 0..50 {
            let (idx, labels) = fixed.next_batch(&mut rng);
            for (i, y) in idx.into_iter().zip(labels) {
                assert_eq!(*seen[i].get_or_insert(y), y);
            }
        }
    }

    #[test]
    fn open_sampling_step_examples() {
        // Zero-initialised linear model on zero inputs: all logits are 0.
        let mut params = MlpParams::zeros(3, 0, 2);
        let mut state = OptimState::new(&params, OptimConfig::default());
        let x = Matrix::zeros(1, 3);
        let sampler = LabelSampler::new(&[0.0, 1.0]).unwrap();
        let w = ClassWeights::from_raw(&[0.5, 1.5]).unwrap();
        let (losses, labels) = open_sampling_step(
            &mut params,
            &mut state,
            0.1,
            &x,
            &[0],
            &x,
            &sampler,
            &w,
            1.0,
            &mut stream_rng(0, 2),
        )
        .unwrap();
        assert_eq!(labels, vec![1]);
        let ln2 = 2f64.ln();
        assert!((losses.total - (ln2 + 1.5 * ln2)).abs() < 1e-15);

        // Uniform labels with unit weights: the sum of two plain CE terms.
        let mut params = MlpParams::init_seeded(3, 0, 2, 5);
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let ax = Matrix::from_rows(&[vec![1.0, 1.0, -1.0]]).unwrap();
        let z = nn::forward(&params, &x).unwrap();
        let az = nn::forward(&params, &ax).unwrap();
        let sampler = LabelSampler::new(&[0.5, 0.5]).unwrap();
        let (losses, labels) = open_sampling_step(
            &mut params,
            &mut state,
            0.1,
            &x,
            &[1],
            &ax,
            &sampler,
            &ClassWeights::uniform(2),
            1.0,
            &mut stream_rng(1, 2),
        )
        .unwrap();
        let expected = nn::softmax_xent(&z, &[1], None).unwrap().loss
            + nn::softmax_xent(&az, &labels, None).unwrap().loss;
        assert!((losses.total - expected).abs() < 1e-15);

        assert!(matches!(
            open_sampling_step(
                &mut params,
                &mut state,
                0.1,
                &Matrix::zeros(0, 3),
                &[],
                &ax,
                &sampler,
                &ClassWeights::uniform(2),
                1.0,
                &mut stream_rng(1, 2),
            ),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn eta_zero_step_matches_plain_step() {
        let p0 = MlpParams::init_seeded(3, 4, 2, 8);
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.3]]).unwrap();
        let ax = Matrix::from_rows(&[vec![1.0, 1.0, -1.0]]).unwrap();
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (
            OptimState::new(&a, OptimConfig::default()),
            OptimState::new(&b, OptimConfig::default()),
        );
        train_step(
            &mut a,
            &mut sa,
            0.1,
            &x,
            &[0, 1],
            &BaseTerm::Standard,
            AuxTerm::None,
            0.0,
        )
        .unwrap();
        let w = ClassWeights::uniform(2);
        train_step(
            &mut b,
            &mut sb,
            0.1,
            &x,
            &[0, 1],
            &BaseTerm::Standard,
            AuxTerm::Labeled {
                features: &ax,
                labels: &[1],
                weights: &w,
            },
            0.0,
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn run_reductions() {
        let (train, test, pool) = task();
        let std = train_run(&quick(Method::Standard, 3), &train, &test, None).unwrap();
        let os = train_run(
            &TrainConfig {
                eta: 0.0,
                ..quick(Method::OpenSampling, 3)
            },
            &train,
            &test,
            Some(&pool),
        )
        .unwrap();
        assert_eq!(std.final_params.to_bits(), os.final_params.to_bits());
        assert_eq!(
            std.history.iter().map(|h| h.test_acc).collect::<Vec<_>>(),
            os.history.iter().map(|h| h.test_acc).collect::<Vec<_>>()
        );

        let bs = train_run(&quick(Method::BalancedSoftmax, 3), &train, &test, None).unwrap();
        let bsos = train_run(
            &TrainConfig {
                eta: 0.0,
                ..quick(Method::BalancedSoftmaxOpenSampling, 3)
            },
            &train,
            &test,
            Some(&pool),
        )
        .unwrap();
        assert_eq!(bs.final_params.to_bits(), bsos.final_params.to_bits());

        let cb0 = train_run(
            &TrainConfig {
                beta_cb: 0.0,
                ..quick(Method::CbRw, 3)
            },
            &train,
            &test,
            None,
        )
        .unwrap();
        assert_eq!(cb0.final_params.to_bits(), std.final_params.to_bits());

        // Deterministic under a repeated seed.
        let again = train_run(&quick(Method::Standard, 3), &train, &test, None).unwrap();
        assert_eq!(again.final_params.to_bits(), std.final_params.to_bits());
    }

    #[test]
    fn run_contracts() {
        let (train, test, pool) = task();
        let zero = train_run(
            &TrainConfig {
                epochs: 0,
                ..quick(Method::Standard, 1)
            },
            &train,
            &test,
            None,
        )
        .unwrap();
        assert!(zero.history.is_empty());
        assert_eq!(
            zero.final_params,
            MlpParams::init(4, 6, 3, &mut stream_rng(1, INIT_STREAM))
        );

        assert!(matches!(
            train_run(&quick(Method::OpenSampling, 1), &train, &test, None),
            Err(TrainError::MissingAux(_))
        ));
        assert!(matches!(
            train_run(&quick(Method::Oe, 1), &train, &test, None),
            Err(TrainError::MissingAux(_))
        ));
        let other_k = gen_gaussian_classes(4, 4, &[5; 4], 3.0, 1.0, 2).unwrap();
        assert!(matches!(
            train_run(&quick(Method::Standard, 1), &train, &other_k, None),
            Err(TrainError::ClassMismatch { .. })
        ));
        let bad = TrainConfig {
            fixed_labels: true,
            ..quick(Method::Standard, 1)
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            eta: -1.0,
            ..quick(Method::OpenSampling, 1)
        };
        assert!(bad.validate().is_err());

        let run = train_run(&quick(Method::OpenSampling, 2), &train, &test, Some(&pool)).unwrap();
        assert_eq!(run.history.len(), 6);
        for s in &run.step_losses {
            assert!((s.total - (s.base + 1.5 * s.aux)).abs() < 1e-9);
        }
        for h in &run.history {
            assert!((0.0..=1.0).contains(&h.test_acc));
        }
        let oe = train_run(&quick(Method::Oe, 2), &train, &test, Some(&pool)).unwrap();
        assert!(oe.step_losses.iter().all(|s| s.aux > 0.0));
    }

    #[test]
    fn oe_term_on_uniform_logits() {
        let mut params = MlpParams::zeros(2, 0, 4);
        let mut state = OptimState::new(&params, OptimConfig::default());
        let x = Matrix::zeros(3, 2);
        let prior = [0.25; 4];
        let out = train_step(
            &mut params,
            &mut state,
            0.0,
            &x,
            &[0, 1, 2],
            &BaseTerm::Standard,
            AuxTerm::Prior {
                features: &x,
                prior: &prior,
            },
            1.0,
        )
        .unwrap();
        assert!((out.aux - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cb_term_weights_by_class() {
        let prior = prior_from_counts(&[10, 1]).unwrap();
        match BaseTerm::build(BaseLoss::CbRw, &prior, 0.9).unwrap() {
            BaseTerm::Weighted(w) => assert!(w.get(1) > w.get(0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separable_task_is_learned() {
        // Two classes at ±6 along the first axis with σ = 0.5: the margin
        // exceeds 10σ, so a linear model separates them perfectly.
        let (train, test) = gen_gaussian_split(2, 2, &[40, 40], &[50, 50], 6.0, 0.5, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_train: 16,
            schedule: LrSchedule {
                base_lr: 0.1,
                warmup_epochs: 2,
                milestones: vec![40],
                decay_factor: 0.1,
                total_epochs: 50,
            },
            ..TrainConfig::new(Method::Standard, 0)
        };
        let run = train_run(&cfg, &train, &test, None).unwrap();
        assert_eq!(run.history.last().unwrap().test_acc, 1.0);
    }
}
