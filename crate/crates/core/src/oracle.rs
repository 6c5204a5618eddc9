//! Exact Bayes-classifier calculations on finite probability tables.
//!
//! A [`DiscreteJoint`] is a table `P(x, y)` over `S` instances and `K`
//! classes. Mixing it with auxiliary mass `P_out(x)·P_out(y)` in proportion
//! `N : M` gives
//!
//! ```text
//! P_mix(x, y) = N/(N+M) · P_s(x, y) + M/(N+M) · P_out(x) · P_out(y)
//! ```
//!
//! With a uniform `P_out(y)` the second term is constant across classes for
//! every `x`, so the Bayes prediction on the source support is unchanged.
//! Non-uniform label distributions can flip predictions; [`toxicity_count`]
//! measures how much.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::priors::{self, PriorError};

/// Relative width of the tie band: scores within `TIE_REL · max(row)` of
/// the row maximum are ties, resolved toward the lowest class index.
pub const TIE_REL: f64 = 1e-12;

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("instance {0} has zero probability mass; its posterior is undefined")]
    ZeroMass(usize),
    #[error("instance {index} out of range for support size {size}")]
    OutOfRange { index: usize, size: usize },
    #[error("invalid mixing weights n={n}, m={m}")]
    Weights { n: f64, m: f64 },
    #[error("label distribution has {got} classes, table has {want}")]
    ClassMismatch { got: usize, want: usize },
    #[error(transparent)]
    Prior(#[from] PriorError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() || v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(OracleError::InvalidTable(format!(
            "{what} must be non-empty and non-negative"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(OracleError::InvalidTable(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Joint probability table `P(x, y)`, rows are instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    table: Matrix,
}

impl DiscreteJoint {
    pub fn new(table: Matrix) -> Result<Self> {
        if table.cols() < 2 {
            return Err(OracleError::InvalidTable("need at least 2 classes".into()));
        }
        check_distribution(table.as_slice(), "table")?;
        Ok(Self { table })
    }

    /// Normalises non-negative weights into a table.
    pub fn from_weights(weights: Matrix) -> Result<Self> {
        let sum: f64 = weights.as_slice().iter().sum();
        if !(sum > 0.0) || weights.as_slice().iter().any(|w| *w < 0.0) {
            return Err(OracleError::InvalidTable(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        let data = weights.as_slice().iter().map(|w| w / sum).collect();
        Self::new(Matrix::from_vec(weights.rows(), weights.cols(), data).expect("shape"))
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn support_size(&self) -> usize {
        self.table.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.table.cols()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.table.get(x, y)
    }

    /// `P(x)` for every instance.
    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.table.rows())
            .map(|i| self.table.row(i).iter().sum())
            .collect()
    }

    /// `P(y)` for every class.
    pub fn marginal_y(&self) -> Vec<f64> {
        let mut py = vec![0.0; self.table.cols()];
        for i in 0..self.table.rows() {
            py.iter_mut()
                .zip(self.table.row(i))
                .for_each(|(a, b)| *a += b);
        }
        py
    }

    /// Instances with positive mass.
    pub fn support(&self) -> Vec<usize> {
        self.marginal_x()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Auxiliary marginals in product form `P_out(x)·P_out(y)`.
///
/// Index `i < S` of `px` refers to source instance `i`; indices beyond the
/// source support are new instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMarginal {
    px: Vec<f64>,
    py: Vec<f64>,
}

impl OodMarginal {
    pub fn new(px: Vec<f64>, py: Vec<f64>) -> Result<Self> {
        check_distribution(&px, "P_out(x)")?;
        check_distribution(&py, "P_out(y)")?;
        Ok(Self { px, py })
    }

    pub fn uniform_labels(px: Vec<f64>, num_classes: usize) -> Result<Self> {
        Self::new(px, vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn py(&self) -> &[f64] {
        &self.py
    }
}

/// Bayes prediction for a row of joint scores.
fn bayes_row(row: &[f64]) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let band = TIE_REL * max.abs();
    row.iter().position(|&v| v >= max - band).unwrap_or(0)
}

/// `argmax_y P(x, y)`, which equals `argmax_y P(x|y)P(y)`.
pub fn bayes_predict(joint: &DiscreteJoint, x: usize) -> Result<usize> {
    if x >= joint.support_size() {
        return Err(OracleError::OutOfRange {
            index: x,
            size: joint.support_size(),
        });
    }
    let row = joint.table.row(x);
    if row.iter().sum::<f64>() <= 0.0 {
        return Err(OracleError::ZeroMass(x));
    }
    Ok(bayes_row(row))
}

/// Mixture of the source table and auxiliary mass in proportion `n : m`,
/// over the union of both supports.
pub fn mix(source: &DiscreteJoint, ood: &OodMarginal, n: f64, m: f64) -> Result<DiscreteJoint> {
    if !(n >= 0.0 && m >= 0.0 && n + m > 0.0) || !n.is_finite() || !m.is_finite() {
        return Err(OracleError::Weights { n, m });
    }
    let k = source.num_classes();
    if ood.py.len() != k {
        return Err(OracleError::ClassMismatch {
            got: ood.py.len(),
            want: k,
        });
    }
    let rows = source.support_size().max(ood.px.len());
    let (ws, wo) = (n / (n + m), m / (n + m));
    let mut table = Matrix::zeros(rows, k);
    for x in 0..rows {
        let px = ood.px.get(x).copied().unwrap_or(0.0);
        for y in 0..k {
            let src = if x < source.support_size() {
                source.get(x, y)
            } else {
                0.0
            };
            table.set(x, y, ws * src + wo * px * ood.py[y]);
        }
    }
    Ok(DiscreteJoint { table })
}

/// Source-support instances whose Bayes prediction differs after mixing.
fn flips(source: &DiscreteJoint, mixed: &DiscreteJoint) -> Vec<usize> {
    source
        .support()
        .into_iter()
        .filter(|&x| bayes_row(source.table.row(x)) != bayes_row(mixed.table.row(x)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub holds: bool,
    pub violations: Vec<usize>,
}

/// Checks that mixing with uniformly labelled auxiliary mass leaves every
/// source-support prediction unchanged.
pub fn theorem1_check(
    source: &DiscreteJoint,
    px: &[f64],
    n: f64,
    m: f64,
) -> Result<InvarianceReport> {
    let ood = OodMarginal::uniform_labels(px.to_vec(), source.num_classes())?;
    let mixed = mix(source, &ood, n, m)?;
    let violations = flips(source, &mixed);
    Ok(InvarianceReport {
        holds: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toxicity {
    pub flipped_count: usize,
    /// Source mass `Σ P_s(x)` over flipped instances.
    pub flipped_mass: f64,
    pub flipped: Vec<usize>,
}

pub fn toxicity_count(
    source: &DiscreteJoint,
    ood: &OodMarginal,
    n: f64,
    m: f64,
) -> Result<Toxicity> {
    let mixed = mix(source, ood, n, m)?;
    let flipped = flips(source, &mixed);
    let px = source.marginal_x();
    Ok(Toxicity {
        flipped_count: flipped.len(),
        flipped_mass: flipped.iter().map(|&x| px[x]).sum(),
        flipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    pub m: f64,
    /// `max/min` of the mixed label prior; infinite if a class has no mass.
    pub imbalance_ratio: f64,
    pub flipped_count: usize,
    pub flipped_mass: f64,
}

/// Imbalance and toxicity of the complementary labelling over a grid of
/// `α` (may include `+∞`) and auxiliary sizes `m`.
pub fn rebalance_curve(
    source: &DiscreteJoint,
    n: f64,
    px: &[f64],
    alphas: &[f64],
    ms: &[f64],
) -> Result<Vec<CurveRow>> {
    if alphas.is_empty() || ms.is_empty() {
        return Err(OracleError::InvalidTable(
            "alpha and m grids must be non-empty".into(),
        ));
    }
    let betas = source.marginal_y();
    let mut rows = Vec::with_capacity(alphas.len() * ms.len());
    for &alpha in alphas {
        let gammas = priors::complementary_rates(&betas, alpha)?;
        let ood = OodMarginal::new(px.to_vec(), gammas.clone())?;
        for &m in ms {
            let mixed: Vec<f64> = betas
                .iter()
                .zip(&gammas)
                .map(|(b, g)| (n * b + m * g) / (n + m))
                .collect();
            let max = mixed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = mixed.iter().copied().fold(f64::INFINITY, f64::min);
            let tox = toxicity_count(source, &ood, n, m)?;
            rows.push(CurveRow {
                alpha,
                m,
                imbalance_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
                flipped_count: tox.flipped_count,
                flipped_mass: tox.flipped_mass,
            });
        }
    }
    Ok(rows)
}

/// Random cases for exercising the oracle.
pub mod random {
    use super::*;
    use rand::Rng;

    /// One randomly drawn source table and auxiliary marginal.
    #[derive(Debug, Clone)]
    pub struct Case {
        pub source: DiscreteJoint,
        pub px: Vec<f64>,
        pub n: f64,
        pub m: f64,
        pub disjoint: bool,
    }

    /// Table with integer weights in `1..=1000`, so entries are rationals.
    pub fn joint<R: Rng>(rng: &mut R, support: usize, classes: usize) -> DiscreteJoint {
        let w: Vec<f64> = (0..support * classes)
            .map(|_| rng.random_range(1..=1000) as f64)
            .collect();
        DiscreteJoint::from_weights(Matrix::from_vec(support, classes, w).expect("shape"))
            .expect("valid")
    }

    fn simplex<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..len)
            .map(|_| rng.random_range(1..=1000) as f64)
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// Support `2..=max_support`, classes `2..=max_classes`, `N/M` log-uniform
    /// in `[1e-3, 1e3]`. Disjoint cases place all auxiliary mass on new
    /// instances; overlapping ones spread it over source and new instances.
    pub fn case<R: Rng>(
        rng: &mut R,
        max_support: usize,
        max_classes: usize,
        disjoint: bool,
    ) -> Case {
        let s = rng.random_range(2..=max_support.max(2));
        let k = rng.random_range(2..=max_classes.max(2));
        let source = joint(rng, s, k);
        let extra = rng.random_range(1..=s);
        let px = if disjoint {
            let mut px = vec![0.0; s];
            px.extend(simplex(rng, extra));
            px
        } else {
            simplex(rng, s + extra)
        };
        let log_ratio: f64 = rng.random_range(-3.0..=3.0);
        let n = 1.0;
        let m = n / 10f64.powf(log_ratio);
        Case {
            source,
            px,
            n,
            m,
            disjoint,
        }
    }
}
