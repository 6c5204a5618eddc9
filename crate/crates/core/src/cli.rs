//! Config-driven experiment runner behind the `open-rebalance` binary.
//!
//! Each invocation reads one JSON document whose `"command"` field names the
//! subcommand. The document is validated in full (unknown keys are errors)
//! and every input is loaded before any training starts. Result files embed
//! the SHA-256 of the canonicalised config and are byte-identical across
//! re-runs; wall-clock timings go to `run.log` only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, AuxiliaryPool, DataError, LabeledDataset, PoolSpec};
use crate::matrix::Matrix;
use crate::metrics::{
    self, GroupAccuracy, GroupThresholds, MetricsError, OodScores, PositiveClass,
};
use crate::nn::{self, MlpParams, NnError};
use crate::oracle::{self, DiscreteJoint, OodMarginal, OracleError};
use crate::priors::{LabelDistributionKind, PriorError};
use crate::train::{self, Regularizer, RunResult, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config is for command `{found}`, but `{expected}` was requested")]
    CommandMismatch { expected: String, found: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{} of {total} runs failed:\n{}", failed.len(), failed.join("\n"))]
    Partial { failed: Vec<String>, total: usize },
}

pub type Result<T> = std::result::Result<T, CliError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Train,
    Sweep,
    EvalOod,
    BayesCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Train => "train",
            Self::Sweep => "sweep",
            Self::EvalOod => "eval-ood",
            Self::BayesCheck => "bayes-check",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "open-rebalance",
    version,
    about = "Long-tailed rebalancing experiments with label-randomised auxiliary data"
)]
pub struct Args {
    pub command: Command,
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Upper bound on concurrently executing runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Config schema

fn default_radius() -> f64 {
    3.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_clusters() -> usize {
    8
}
fn default_blob_width() -> usize {
    5
}
fn default_low() -> f64 {
    -1.0
}
fn default_high() -> f64 {
    1.0
}

/// Long-tailed Gaussian classes with a balanced test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub dim: usize,
    /// Training count of the largest class.
    pub n_max: u64,
    pub ratio: f64,
    pub test_per_class: u64,
    #[serde(default = "default_radius")]
    pub mean_radius: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn counts(&self) -> Result<Vec<u64>> {
        Ok(data::longtail_counts(self.n_max, self.num_classes, self.ratio)?.counts)
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        data::class_means(self.num_classes, self.dim, self.mean_radius, self.seed)
    }

    pub fn build(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let counts = self.counts()?;
        let test = vec![self.test_per_class; self.num_classes];
        Ok(data::gen_gaussian_split(
            self.num_classes,
            self.dim,
            &counts,
            &test,
            self.mean_radius,
            self.sigma,
            self.seed,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticTask),
    /// Native-format train and test files.
    Files {
        train: PathBuf,
        test: PathBuf,
    },
    /// CIFAR-10 binary batches; the training set is subsampled to a long-tail
    /// profile whose head size defaults to the smallest full class.
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        ratio: f64,
        #[serde(default)]
        n_max: Option<u64>,
        seed: u64,
    },
}

/// Synthetic pool recipes. Shifted mixtures take their class means from a
/// synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolRecipe {
    Gaussian {
        #[serde(default = "default_one")]
        scale: f64,
    },
    Rademacher {
        #[serde(default = "default_one")]
        scale: f64,
    },
    Blobs {
        #[serde(default = "default_blob_width")]
        width: usize,
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_high")]
        high: f64,
    },
    ShiftedMixture {
        margin: f64,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_one")]
        sigma: f64,
        #[serde(default = "default_one")]
        spread: f64,
    },
}

impl PoolRecipe {
    fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Rademacher { .. } => "rademacher",
            Self::Blobs { .. } => "blobs",
            Self::ShiftedMixture { .. } => "shifted-mixture",
        }
    }

    fn spec(&self, class_means: Option<&[Vec<f64>]>) -> Result<PoolSpec> {
        Ok(match self {
            Self::Gaussian { scale } => PoolSpec::Gaussian { scale: *scale },
            Self::Rademacher { scale } => PoolSpec::Rademacher { scale: *scale },
            Self::Blobs { width, low, high } => PoolSpec::Blobs {
                width: *width,
                low: *low,
                high: *high,
            },
            Self::ShiftedMixture {
                margin,
                clusters,
                sigma,
                spread,
            } => match class_means {
                Some(means) => PoolSpec::ShiftedMixture {
                    class_means: means.to_vec(),
                    margin: *margin,
                    clusters: *clusters,
                    sigma: *sigma,
                    spread: *spread,
                },
                None => return invalid("shifted-mixture pools need a synthetic dataset"),
            },
        })
    }
}

/// Either a generated pool (`recipe` + `size` + `seed`) or a pool file,
/// optionally truncated to `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub recipe: Option<PoolRecipe>,
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl PoolConfig {
    fn validate(&self) -> Result<()> {
        match (&self.recipe, &self.file) {
            (Some(_), Some(_)) | (None, None) => {
                invalid("a pool needs exactly one of `recipe` and `file`")
            }
            (Some(_), None) if self.size.unwrap_or(0) == 0 => {
                invalid("generated pools need a positive `size`")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match (&self.recipe, &self.file) {
            (Some(r), _) => r.name().to_string(),
            (None, Some(f)) => f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            (None, None) => String::new(),
        }
    }

    fn load(&self, dim: usize, class_means: Option<&[Vec<f64>]>) -> Result<AuxiliaryPool> {
        self.validate()?;
        let pool = match (&self.recipe, &self.file) {
            (Some(recipe), _) => data::gen_ood_pool(
                &recipe.spec(class_means)?,
                self.size.unwrap_or(0),
                dim,
                self.seed,
            )?,
            (None, Some(path)) => {
                let pool = data::read_pool(path)?;
                match self.size {
                    Some(size) => pool.truncated(size)?,
                    None => pool,
                }
            }
            (None, None) => unreachable!("validated"),
        };
        if pool.dim() != dim {
            return invalid(format!(
                "pool `{}` has dimension {}, expected {dim}",
                self.name(),
                pool.dim()
            ));
        }
        Ok(pool)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub aux: Option<PoolConfig>,
    #[serde(default)]
    pub ood: Vec<PoolConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub aux: Option<PoolConfig>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Pools scored with MSP after training.
    #[serde(default)]
    pub ood: Vec<PoolConfig>,
    #[serde(default)]
    pub groups: GroupThresholds,
}

/// An `α` grid value: a number, `"M"` for the default `max β + min β`,
/// `"mcd"` for `max β`, or `"inf"` for the uniform limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaValue {
    Value(f64),
    Named(String),
}

impl AlphaValue {
    fn validate(&self) -> Result<()> {
        match self {
            Self::Value(a) if !(*a > 0.0) => invalid(format!("alpha must be > 0, got {a}")),
            Self::Named(s) if !matches!(s.as_str(), "M" | "mcd" | "inf") => invalid(format!(
                "alpha must be a number, \"M\", \"mcd\" or \"inf\", got {s:?}"
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Value(a) => a.to_string(),
            Self::Named(s) => s.clone(),
        }
    }

    /// Numeric value for a given prior; `inf` maps to `f64::INFINITY`.
    pub fn resolve(&self, betas: &[f64]) -> f64 {
        let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = betas.iter().copied().fold(f64::INFINITY, f64::min);
        match self {
            Self::Value(a) => *a,
            Self::Named(s) => match s.as_str() {
                "M" => max + min,
                "mcd" => max,
                _ => f64::INFINITY,
            },
        }
    }

    fn apply(&self, config: &mut TrainConfig) {
        match self {
            Self::Value(a) => {
                config.alpha = Some(*a);
                config.label_dist = LabelDistributionKind::Complementary { alpha: None };
            }
            Self::Named(s) => match s.as_str() {
                "M" => {
                    config.alpha = None;
                    config.label_dist = LabelDistributionKind::Complementary { alpha: None };
                }
                "mcd" => config.label_dist = LabelDistributionKind::Mcd,
                _ => config.label_dist = LabelDistributionKind::Uniform,
            },
        }
    }
}

/// Axes of a sweep. Empty axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<AlphaValue>,
    #[serde(default)]
    pub label_dist: Vec<LabelDistributionKind>,
    #[serde(default)]
    pub aux_size: Vec<usize>,
}

impl SweepGrid {
    fn is_empty(&self) -> bool {
        self.eta.is_empty()
            && self.alpha.is_empty()
            && self.label_dist.is_empty()
            && self.aux_size.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub aux: Option<PoolConfig>,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub grid: SweepGrid,
    #[serde(default)]
    pub groups: GroupThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOodConfig {
    pub checkpoint: PathBuf,
    pub test: PathBuf,
    pub pools: Vec<PoolConfig>,
    #[serde(default)]
    pub positive: PositiveClass,
}

fn default_max_support() -> usize {
    20
}
fn default_max_classes() -> usize {
    10
}

/// Imbalance/toxicity grid for one explicit source table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    /// Non-negative weights `[x][y]`, normalised to a joint table.
    pub source: Vec<Vec<f64>>,
    pub n: f64,
    pub px: Vec<f64>,
    pub alphas: Vec<AlphaValue>,
    pub ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesCheckConfig {
    pub cases: usize,
    #[serde(default = "default_max_support")]
    pub max_support: usize,
    #[serde(default = "default_max_classes")]
    pub max_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub curve: Option<CurveSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Synth(SynthConfig),
    Train(TrainCommandConfig),
    Sweep(SweepConfig),
    EvalOod(EvalOodConfig),
    BayesCheck(BayesCheckConfig),
}

impl ExperimentConfig {
    pub fn command(&self) -> Command {
        match self {
            Self::Synth(_) => Command::Synth,
            Self::Train(_) => Command::Train,
            Self::Sweep(_) => Command::Sweep,
            Self::EvalOod(_) => Command::EvalOod,
            Self::BayesCheck(_) => Command::BayesCheck,
        }
    }

    /// Static checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Synth(c) => {
                c.task.counts()?;
                if c.task.dim < 2 {
                    return invalid("task dim must be >= 2");
                }
                c.aux
                    .iter()
                    .chain(&c.ood)
                    .try_for_each(PoolConfig::validate)
            }
            Self::Train(c) => {
                if c.seeds.is_empty() {
                    return invalid("`seeds` must list at least one seed");
                }
                validate_run(&c.train, c.aux.as_ref())?;
                c.ood.iter().try_for_each(PoolConfig::validate)
            }
            Self::Sweep(c) => {
                if c.seeds.is_empty() {
                    return invalid("`seeds` must list at least one seed");
                }
                if c.grid.is_empty() {
                    return invalid("sweep grid is empty");
                }
                if !c.grid.alpha.is_empty() && !c.grid.label_dist.is_empty() {
                    return invalid("the alpha and label_dist axes cannot be combined");
                }
                let open = c.base.method.parts().1 == Regularizer::OpenSampling;
                if !c.grid.alpha.is_empty() && !open {
                    return invalid(format!(
                        "an alpha axis needs an open-sampling method, not {}",
                        c.base.method.name()
                    ));
                }
                if c.grid.eta.iter().any(|e| !(*e >= 0.0)) {
                    return invalid("eta values must be >= 0");
                }
                c.grid.alpha.iter().try_for_each(AlphaValue::validate)?;
                for config in sweep_points(c).into_iter().map(|p| p.config) {
                    validate_run(&config, c.aux.as_ref())?;
                }
                Ok(())
            }
            Self::EvalOod(c) => {
                if c.pools.is_empty() {
                    return invalid("`pools` must list at least one pool");
                }
                c.pools.iter().try_for_each(PoolConfig::validate)
            }
            Self::BayesCheck(c) => {
                if c.max_support == 0 || c.max_classes < 2 {
                    return invalid("max_support must be >= 1 and max_classes >= 2");
                }
                if let Some(curve) = &c.curve {
                    curve.alphas.iter().try_for_each(AlphaValue::validate)?;
                    if curve.alphas.is_empty() || curve.ms.is_empty() {
                        return invalid("curve alphas and ms must be non-empty");
                    }
                }
                Ok(())
            }
        }
    }
}

fn validate_run(config: &TrainConfig, aux: Option<&PoolConfig>) -> Result<()> {
    config.validate()?;
    if config.method.needs_aux() && aux.is_none() {
        return Err(TrainError::MissingAux(config.method.name()).into());
    }
    if let Some(aux) = aux {
        aux.validate()?;
    }
    Ok(())
}

/// Parses, canonicalises and validates a config document. Returns the config
/// and the hex SHA-256 of its canonical form.
pub fn parse_config(text: &str) -> Result<(ExperimentConfig, String)> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    // serde_json maps keep keys sorted, so this is a canonical rendering.
    let canonical = serde_json::to_string(&value)?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let config: ExperimentConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok((config, hash))
}

pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Shared plumbing

/// Train/test sets plus the class means of synthetic tasks.
struct Task {
    train: LabeledDataset,
    test: LabeledDataset,
    class_means: Option<Vec<Vec<f64>>>,
}

fn load_task(spec: &DatasetSpec) -> Result<Task> {
    let task = match spec {
        DatasetSpec::Synthetic(t) => {
            let (train, test) = t.build()?;
            Task {
                train,
                test,
                class_means: Some(t.class_means()),
            }
        }
        DatasetSpec::Files { train, test } => Task {
            train: data::read_dataset(train)?,
            test: data::read_dataset(test)?,
            class_means: None,
        },
        DatasetSpec::Cifar10 {
            train,
            test,
            ratio,
            n_max,
            seed,
        } => {
            let full = data::read_cifar10_binary(train)?;
            let smallest = full.class_counts().into_iter().min().unwrap_or(0);
            let profile =
                data::longtail_counts(n_max.unwrap_or(smallest), full.num_classes(), *ratio)?;
            Task {
                train: data::subsample_longtail(&full, &profile, *seed)?,
                test: data::read_cifar10_binary(test)?,
                class_means: None,
            }
        }
    };
    if task.train.num_classes() != task.test.num_classes() || task.train.dim() != task.test.dim() {
        return invalid("train and test sets disagree on classes or dimension");
    }
    Ok(task)
}

struct Output<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.bytes(name, &bytes)
    }

    /// Record an externally written file.
    fn track(&mut self, name: &str) {
        let path = self.path(name);
        self.written.push(path);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Mean accuracy over the two classes with the fewest training samples.
pub fn minority_accuracy(per_class: &[Option<f64>], train_counts: &[u64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by_key(|&j| train_counts[j]);
    let accs: Vec<f64> = order.iter().take(2).filter_map(|&j| per_class[j]).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Runs `command` with the config at `config_path`, writing into `out`.
/// Returns the result files written (the timing log excluded).
pub fn run(command: Command, config_path: &Path, out: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let (config, hash) = load_config(config_path)?;
    if config.command() != command {
        return Err(CliError::CommandMismatch {
            expected: command.name().into(),
            found: config.command().name().into(),
        });
    }
    let mut output = Output::new(out)?;
    let mut log = String::new();
    let result = match &config {
        ExperimentConfig::Synth(c) => cmd_synth(c, &hash, &mut output),
        ExperimentConfig::Train(c) => cmd_train(c, &hash, jobs, &mut output, &mut log),
        ExperimentConfig::Sweep(c) => cmd_sweep(c, &hash, jobs, &mut output, &mut log),
        ExperimentConfig::EvalOod(c) => cmd_eval_ood(c, &hash, &mut output),
        ExperimentConfig::BayesCheck(c) => cmd_bayes_check(c, &hash, &mut output),
    };
    let _ = writeln!(
        log,
        "{} config_hash={hash} wall_time_secs={:.3} status={}",
        command.name(),
        started.elapsed().as_secs_f64(),
        if result.is_ok() { "ok" } else { "failed" }
    );
    let log_path = out.join("run.log");
    fs::write(&log_path, log).map_err(|source| CliError::Io {
        path: log_path,
        source,
    })?;
    result.map(|()| output.written)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    config_hash: &'a str,
    num_classes: usize,
    dim: usize,
    ratio: f64,
    seed: u64,
    train_counts: Vec<u64>,
    test_counts: Vec<u64>,
    files: Vec<String>,
}

fn cmd_synth(c: &SynthConfig, hash: &str, out: &mut Output<'_>) -> Result<()> {
    let (train, test) = c.task.build()?;
    let means = c.task.class_means();
    let mut files = vec!["train.osds".to_string(), "test.osds".to_string()];
    let mut pools = Vec::new();
    if let Some(aux) = &c.aux {
        pools.push(("aux.osds".to_string(), aux.load(c.task.dim, Some(&means))?));
    }
    for pool in &c.ood {
        pools.push((
            format!("ood_{}.osds", pool.name()),
            pool.load(c.task.dim, Some(&means))?,
        ));
    }
    data::write_dataset(&train, out.path("train.osds"))?;
    out.track("train.osds");
    data::write_dataset(&test, out.path("test.osds"))?;
    out.track("test.osds");
    for (name, pool) in &pools {
        data::write_pool(pool, out.path(name))?;
        out.track(name);
        files.push(name.clone());
    }
    out.json(
        "manifest.json",
        &SynthManifest {
            config_hash: hash,
            num_classes: c.task.num_classes,
            dim: c.task.dim,
            ratio: c.task.ratio,
            seed: c.task.seed,
            train_counts: train.class_counts(),
            test_counts: test.class_counts(),
            files,
        },
    )
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    pub overall_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub minority_acc: Option<f64>,
    pub group_acc: GroupAccuracy,
    pub ood: Vec<OodScores>,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    config_hash: &'a str,
    method: &'static str,
    seed: u64,
    config: &'a TrainConfig,
    train_counts: Vec<u64>,
    label_probs: Option<&'a [f64]>,
    class_weights: Option<&'a [f64]>,
    final_metrics: &'a FinalMetrics,
    history: &'a [train::EpochRecord],
}

pub fn final_metrics(
    params: &MlpParams,
    task_train: &LabeledDataset,
    test: &LabeledDataset,
    ood: &[(String, AuxiliaryPool)],
    groups: GroupThresholds,
) -> Result<FinalMetrics> {
    let report = metrics::accuracy(params, test)?;
    let counts = task_train.class_counts();
    let group_acc = metrics::group_accuracy(&report.per_class_acc, &counts, groups)?;
    let mut scores = Vec::new();
    if !ood.is_empty() {
        let in_scores = metrics::msp_scores(params, test.features())?;
        for (name, pool) in ood {
            let out_scores = metrics::msp_scores(params, pool.features())?;
            scores.push(metrics::ood_scores(
                name,
                &in_scores,
                &out_scores,
                PositiveClass::Out,
            )?);
        }
    }
    Ok(FinalMetrics {
        overall_acc: report.overall_acc,
        minority_acc: minority_accuracy(&report.per_class_acc, &counts),
        per_class_acc: report.per_class_acc,
        group_acc,
        ood: scores,
    })
}

fn history_csv(hash: &str, run: &RunResult, k: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = [
        "config_hash",
        "epoch",
        "lr",
        "train_loss",
        "base_loss",
        "aux_loss",
        "test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..k).map(|j| format!("acc_class_{j}")));
    let rows = run
        .history
        .iter()
        .map(|h| {
            let mut row = vec![
                hash.to_string(),
                h.epoch.to_string(),
                h.lr.to_string(),
                h.train_loss.to_string(),
                h.base_loss.to_string(),
                h.aux_loss.to_string(),
                h.test_acc.to_string(),
            ];
            row.extend(h.per_class_acc.iter().map(|a| fmt_opt(*a)));
            row
        })
        .collect();
    (header, rows)
}

fn load_ood(
    pools: &[PoolConfig],
    dim: usize,
    means: Option<&[Vec<f64>]>,
) -> Result<Vec<(String, AuxiliaryPool)>> {
    pools
        .iter()
        .map(|p| Ok((p.name(), p.load(dim, means)?)))
        .collect()
}

fn cmd_train(
    c: &TrainCommandConfig,
    hash: &str,
    jobs: usize,
    out: &mut Output<'_>,
    log: &mut String,
) -> Result<()> {
    let task = load_task(&c.dataset)?;
    let means = task.class_means.as_deref();
    let aux = c
        .aux
        .as_ref()
        .map(|a| a.load(task.train.dim(), means))
        .transpose()?;
    let ood = load_ood(&c.ood, task.train.dim(), means)?;

    let pool = thread_pool(jobs)?;
    let results: Vec<Result<(RunResult, FinalMetrics)>> = pool.install(|| {
        c.seeds
            .par_iter()
            .map(|&seed| {
                let config = TrainConfig {
                    seed,
                    ..c.train.clone()
                };
                let run = train::train_run(&config, &task.train, &task.test, aux.as_ref())?;
                let fm = final_metrics(&run.final_params, &task.train, &task.test, &ood, c.groups)?;
                Ok((run, fm))
            })
            .collect()
    });

    let mut failed = Vec::new();
    let counts = task.train.class_counts();
    for (&seed, result) in c.seeds.iter().zip(results) {
        match result {
            Ok((run, fm)) => {
                let _ = writeln!(
                    log,
                    "train seed={seed} wall_time_secs={:.3}",
                    run.wall_time_secs
                );
                out.json(
                    &format!("result_seed{seed}.json"),
                    &RunReport {
                        config_hash: hash,
                        method: run.config.method.name(),
                        seed,
                        config: &run.config,
                        train_counts: counts.clone(),
                        label_probs: run.label_probs.as_deref(),
                        class_weights: run.class_weights.as_ref().map(|w| w.omegas()),
                        final_metrics: &fm,
                        history: &run.history,
                    },
                )?;
                let (header, rows) = history_csv(hash, &run, task.train.num_classes());
                out.csv(&format!("history_seed{seed}.csv"), &header, &rows)?;
                let name = format!("checkpoint_seed{seed}.osnn");
                nn::write_checkpoint(&run.final_params, out.path(&name))?;
                out.track(&name);
            }
            Err(e) => failed.push(format!("seed {seed}: {e}")),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed,
            total: c.seeds.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// sweep

struct SweepPoint {
    eta: String,
    alpha: String,
    label_dist: String,
    aux_size: Option<usize>,
    config: TrainConfig,
}

fn sweep_points(c: &SweepConfig) -> Vec<SweepPoint> {
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    let mut points = Vec::new();
    for eta in axis(&c.grid.eta) {
        for alpha in axis(&c.grid.alpha) {
            for dist in axis(&c.grid.label_dist) {
                for aux_size in axis(&c.grid.aux_size) {
                    let mut config = c.base.clone();
                    if let Some(eta) = eta {
                        config.eta = eta;
                    }
                    if let Some(a) = &alpha {
                        a.apply(&mut config);
                    }
                    if let Some(d) = &dist {
                        config.label_dist = d.clone();
                    }
                    points.push(SweepPoint {
                        eta: config.eta.to_string(),
                        alpha: match (&alpha, config.alpha) {
                            (Some(a), _) => a.label(),
                            (None, Some(a)) => a.to_string(),
                            (None, None) => "M".into(),
                        },
                        label_dist: config.label_dist.label(),
                        aux_size,
                        config,
                    });
                }
            }
        }
    }
    points
}

struct SweepRun {
    overall: f64,
    minority: Option<f64>,
    groups: GroupAccuracy,
}

fn cmd_sweep(
    c: &SweepConfig,
    hash: &str,
    jobs: usize,
    out: &mut Output<'_>,
    log: &mut String,
) -> Result<()> {
    let task = load_task(&c.dataset)?;
    let aux = c
        .aux
        .as_ref()
        .map(|a| a.load(task.train.dim(), task.class_means.as_deref()))
        .transpose()?;
    let points = sweep_points(c);
    let mut pools = Vec::with_capacity(points.len());
    for p in &points {
        pools.push(match (&aux, p.aux_size) {
            (Some(pool), Some(size)) => Some(pool.truncated(size)?),
            (Some(pool), None) => Some(pool.clone()),
            (None, _) => None,
        });
    }

    let jobs_list: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| c.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let pool = thread_pool(jobs)?;
    let results: Vec<Result<(SweepRun, f64)>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(p, seed)| {
                let config = TrainConfig {
                    seed,
                    ..points[p].config.clone()
                };
                let run = train::train_run(&config, &task.train, &task.test, pools[p].as_ref())?;
                let fm = final_metrics(&run.final_params, &task.train, &task.test, &[], c.groups)?;
                Ok((
                    SweepRun {
                        overall: fm.overall_acc,
                        minority: fm.minority_acc,
                        groups: fm.group_acc,
                    },
                    run.wall_time_secs,
                ))
            })
            .collect()
    });

    let header: Vec<String> = [
        "config_hash",
        "point",
        "eta",
        "alpha",
        "label_dist",
        "aux_size",
        "seed",
        "runs",
        "overall_acc",
        "overall_acc_std",
        "minority_acc",
        "minority_acc_std",
        "many_acc",
        "medium_acc",
        "few_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let mut results = results.into_iter();
    for (pi, point) in points.iter().enumerate() {
        let prefix = |seed: String, runs: usize| {
            vec![
                hash.to_string(),
                pi.to_string(),
                point.eta.clone(),
                point.alpha.clone(),
                point.label_dist.clone(),
                point.aux_size.map(|s| s.to_string()).unwrap_or_default(),
                seed,
                runs.to_string(),
            ]
        };
        let mut done: Vec<SweepRun> = Vec::new();
        for &seed in &c.seeds {
            match results.next().expect("one result per job") {
                Ok((r, secs)) => {
                    let _ = writeln!(log, "sweep point={pi} seed={seed} wall_time_secs={secs:.3}");
                    let mut row = prefix(seed.to_string(), 1);
                    row.extend([
                        r.overall.to_string(),
                        String::new(),
                        fmt_opt(r.minority),
                        String::new(),
                        fmt_opt(r.groups.many),
                        fmt_opt(r.groups.medium),
                        fmt_opt(r.groups.few),
                    ]);
                    rows.push(row);
                    done.push(r);
                }
                Err(e) => failed.push(format!("point {pi} seed {seed}: {e}")),
            }
        }
        if done.is_empty() {
            continue;
        }
        let overall: Vec<f64> = done.iter().map(|r| r.overall).collect();
        let minority: Vec<f64> = done.iter().filter_map(|r| r.minority).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let group_mean = |f: fn(&GroupAccuracy) -> Option<f64>| {
            let v: Vec<f64> = done.iter().filter_map(|r| f(&r.groups)).collect();
            fmt_opt(mean(&v))
        };
        let mut row = prefix("all".into(), done.len());
        row.extend([
            fmt_opt(mean(&overall)),
            std_dev(&overall).to_string(),
            fmt_opt(mean(&minority)),
            if minority.is_empty() {
                String::new()
            } else {
                std_dev(&minority).to_string()
            },
            group_mean(|g| g.many),
            group_mean(|g| g.medium),
            group_mean(|g| g.few),
        ]);
        rows.push(row);
    }
    out.csv("sweep.csv", &header, &rows)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed,
            total: jobs_list.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// eval-ood

/// Per-pool rows followed by their column-wise mean.
pub fn ood_table(
    in_scores: &[f64],
    pools: &[(String, Vec<f64>)],
    positive: PositiveClass,
) -> Result<Vec<OodScores>> {
    let mut rows = Vec::with_capacity(pools.len() + 1);
    for (name, out_scores) in pools {
        rows.push(metrics::ood_scores(name, in_scores, out_scores, positive)?);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        rows.push(OodScores {
            pool: "average".into(),
            fpr95: rows.iter().map(|r| r.fpr95).sum::<f64>() / n,
            auroc: rows.iter().map(|r| r.auroc).sum::<f64>() / n,
            aupr: rows.iter().map(|r| r.aupr).sum::<f64>() / n,
            aupr_positive: positive,
        });
    }
    Ok(rows)
}

fn cmd_eval_ood(c: &EvalOodConfig, hash: &str, out: &mut Output<'_>) -> Result<()> {
    let params = nn::read_checkpoint(&c.checkpoint)?;
    let test = data::read_dataset(&c.test)?;
    if params.input_dim() != test.dim() {
        return invalid(format!(
            "checkpoint expects dimension {}, test set has {}",
            params.input_dim(),
            test.dim()
        ));
    }
    let ood = load_ood(&c.pools, test.dim(), None)?;
    let in_scores = metrics::msp_scores(&params, test.features())?;
    let mut pools = Vec::with_capacity(ood.len());
    for (name, pool) in &ood {
        pools.push((name.clone(), metrics::msp_scores(&params, pool.features())?));
    }
    let table = ood_table(&in_scores, &pools, c.positive)?;
    let header: Vec<String> = [
        "config_hash",
        "pool",
        "fpr95",
        "auroc",
        "aupr",
        "aupr_positive",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                hash.to_string(),
                r.pool.clone(),
                r.fpr95.to_string(),
                r.auroc.to_string(),
                r.aupr.to_string(),
                match r.aupr_positive {
                    PositiveClass::In => "in".into(),
                    PositiveClass::Out => "out".into(),
                },
            ]
        })
        .collect();
    out.csv("ood.csv", &header, &rows)
}

// ---------------------------------------------------------------------------
// bayes-check

#[derive(Debug, Clone, Serialize)]
pub struct CaseViolation {
    pub case: usize,
    pub disjoint: bool,
    pub instances: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StressCase {
    pub description: String,
    pub m: f64,
    pub violations: usize,
    pub instances: Vec<usize>,
    pub flipped_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveReportRow {
    pub alpha: String,
    pub alpha_value: Option<f64>,
    pub m: f64,
    /// `None` when a class has no mass in the mixed prior.
    pub imbalance_ratio: Option<f64>,
    pub flipped_count: usize,
    pub flipped_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BayesReport {
    pub config_hash: String,
    pub cases_run: usize,
    pub disjoint_cases: usize,
    pub violations: usize,
    pub violating_cases: Vec<CaseViolation>,
    pub stress: StressCase,
    pub curve: Vec<CurveReportRow>,
}

/// A fixed case where one-hot auxiliary labels overturn source predictions.
pub fn one_hot_stress() -> Result<StressCase> {
    let source = DiscreteJoint::new(
        Matrix::from_rows(&[vec![0.40, 0.30], vec![0.25, 0.05]]).expect("rectangular"),
    )?;
    let ood = OodMarginal::new(vec![0.5, 0.5], vec![0.0, 1.0])?;
    let m = 10.0;
    let tox = oracle::toxicity_count(&source, &ood, 1.0, m)?;
    Ok(StressCase {
        description: "two-instance source, auxiliary mass spread over both instances, every auxiliary label = class 1"
            .into(),
        m,
        violations: tox.flipped_count,
        instances: tox.flipped,
        flipped_mass: tox.flipped_mass,
    })
}

pub fn bayes_check(c: &BayesCheckConfig, hash: &str) -> Result<BayesReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut violating = Vec::new();
    let mut violations = 0;
    let mut disjoint_cases = 0;
    for i in 0..c.cases {
        let disjoint = i % 2 == 1;
        let case = oracle::random::case(&mut rng, c.max_support, c.max_classes, disjoint);
        disjoint_cases += usize::from(case.disjoint);
        let report = oracle::theorem1_check(&case.source, &case.px, case.n, case.m)?;
        if !report.holds {
            violations += report.violations.len();
            violating.push(CaseViolation {
                case: i,
                disjoint: case.disjoint,
                instances: report.violations,
            });
        }
    }
    let mut curve = Vec::new();
    if let Some(spec) = &c.curve {
        let weights = Matrix::from_rows(&spec.source)
            .ok_or_else(|| CliError::Config("curve source is ragged".into()))?;
        let source = DiscreteJoint::from_weights(weights)?;
        let betas = source.marginal_y();
        let alphas: Vec<f64> = spec.alphas.iter().map(|a| a.resolve(&betas)).collect();
        let table = oracle::rebalance_curve(&source, spec.n, &spec.px, &alphas, &spec.ms)?;
        let per_alpha = spec.ms.len();
        for (i, row) in table.into_iter().enumerate() {
            let a = &spec.alphas[i / per_alpha];
            curve.push(CurveReportRow {
                alpha: a.label(),
                alpha_value: row.alpha.is_finite().then_some(row.alpha),
                m: row.m,
                imbalance_ratio: row
                    .imbalance_ratio
                    .is_finite()
                    .then_some(row.imbalance_ratio),
                flipped_count: row.flipped_count,
                flipped_mass: row.flipped_mass,
            });
        }
    }
    Ok(BayesReport {
        config_hash: hash.to_string(),
        cases_run: c.cases,
        disjoint_cases,
        violations,
        violating_cases: violating,
        stress: one_hot_stress()?,
        curve,
    })
}

fn cmd_bayes_check(c: &BayesCheckConfig, hash: &str, out: &mut Output<'_>) -> Result<()> {
    let report = bayes_check(c, hash)?;
    out.json("bayes_check.json", &report)
}
