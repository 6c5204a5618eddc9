//! Label-distribution arithmetic.
//!
//! A [`ClassPrior`] holds the per-class training counts `n_j` and their
//! frequencies `β_j = n_j / N`. From it we derive the complementary label
//! distribution used to label auxiliary instances,
//!
//! ```text
//! Γ_j = (α − β_j) / (K·α − 1),     α ≥ max_j β_j
//! ```
//!
//! whose special case `α = max β` is the minimum complementary distribution
//! (MCD): the smallest auxiliary set that fully balances the class counts.
//! `α → ∞` flattens `Γ` toward uniform.
//!
//! Auxiliary losses are weighted by `ω_j = K·Γ_j`, which sums to `K`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used to detect `K·α − 1 = 0`.
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error(
        "alpha {alpha} is below the minimum admissible value {min_alpha} (max class frequency)"
    )]
    AlphaOutOfRange { alpha: f64, min_alpha: f64 },
    #[error(
        "degenerate complementary distribution: K·alpha − 1 = {0} (uniform prior at alpha = 1/K)"
    )]
    Degenerate(f64),
    #[error("class-balanced beta must lie in [0, 1), got {0}")]
    InvalidBetaCb(f64),
    #[error(
        "class {class} has no samples; its effective number is undefined for beta_cb = {beta_cb}"
    )]
    EmptyClass { class: usize, beta_cb: f64 },
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
}

pub type Result<T> = std::result::Result<T, PriorError>;

/// Per-class training counts and the frequencies derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: Vec<u64>,
    total: u64,
    betas: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(PriorError::InvalidPrior(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(PriorError::InvalidPrior("all class counts are zero".into()));
        }
        let n = total as f64;
        let betas = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            counts: counts.to_vec(),
            total,
            betas,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn max_beta(&self) -> f64 {
        self.betas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_beta(&self) -> f64 {
        self.betas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_uniform(&self) -> bool {
        self.counts.iter().all(|&c| c == self.counts[0])
    }

    /// Index of the smallest class (lowest index on ties).
    pub fn smallest_class(&self) -> usize {
        let min = self.counts.iter().min().copied().unwrap_or(0);
        self.counts.iter().position(|&c| c == min).unwrap_or(0)
    }
}

/// Shorthand for [`ClassPrior::from_counts`].
pub fn prior_from_counts(counts: &[u64]) -> Result<ClassPrior> {
    ClassPrior::from_counts(counts)
}

/// Complementary rates for an arbitrary frequency vector.
///
/// `alpha = +∞` yields the uniform limit. Callers are responsible for
/// `betas` summing to one.
pub fn complementary_rates(betas: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let k = betas.len();
    if k < 2 {
        return Err(PriorError::InvalidPrior(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    let max_beta = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if alpha.is_nan() || alpha < max_beta {
        return Err(PriorError::AlphaOutOfRange {
            alpha,
            min_alpha: max_beta,
        });
    }
    if alpha.is_infinite() {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let denom = k as f64 * alpha - 1.0;
    if denom <= DEGENERATE_EPS {
        return Err(PriorError::Degenerate(denom));
    }
    // Σ_j (α − β_j) equals K·α − 1; dividing by the realised sum keeps Σ Γ at 1
    // to rounding.
    let numer: Vec<f64> = betas.iter().map(|&b| alpha - b).collect();
    let sum: f64 = numer.iter().sum();
    Ok(numer.into_iter().map(|v| v / sum).collect())
}

/// Label distribution for auxiliary instances, inversely related to the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryDistribution {
    gammas: Vec<f64>,
    alpha: f64,
    source: ClassPrior,
    degenerate: bool,
}

impl ComplementaryDistribution {
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn source(&self) -> &ClassPrior {
        &self.source
    }

    /// True when built from a uniform prior at `α = 1/K`, where the closed
    /// form divides by zero and a uniform fallback was returned instead.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn num_classes(&self) -> usize {
        self.gammas.len()
    }
}

pub fn complementary(prior: &ClassPrior, alpha: f64) -> Result<ComplementaryDistribution> {
    let gammas = complementary_rates(prior.betas(), alpha)?;
    Ok(ComplementaryDistribution {
        gammas,
        alpha,
        source: prior.clone(),
        degenerate: false,
    })
}

/// Minimum complementary distribution, `α = max β`.
///
/// A uniform prior needs no auxiliary data; the result is then the uniform
/// distribution with [`ComplementaryDistribution::is_degenerate`] set.
pub fn mcd(prior: &ClassPrior) -> ComplementaryDistribution {
    let alpha = prior.max_beta();
    match complementary(prior, alpha) {
        Ok(dist) => dist,
        Err(_) => {
            let k = prior.num_classes();
            ComplementaryDistribution {
                gammas: vec![1.0 / k as f64; k],
                alpha,
                source: prior.clone(),
                degenerate: true,
            }
        }
    }
}

/// `max β + min β`.
pub fn default_alpha(prior: &ClassPrior) -> f64 {
    prior.max_beta() + prior.min_beta()
}

/// Per-class loss weights for auxiliary samples, normalised to sum to `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    omegas: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            omegas: vec![1.0; k],
        }
    }

    /// Rescales non-negative raw weights so they sum to their count.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PriorError::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(PriorError::InvalidDistribution(
                "weights sum to zero".into(),
            ));
        }
        let k = raw.len() as f64;
        Ok(Self {
            omegas: raw.iter().map(|w| w * k / sum).collect(),
        })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn get(&self, class: usize) -> f64 {
        self.omegas[class]
    }

    /// The weights rescaled to a probability vector.
    pub fn to_distribution(&self) -> Vec<f64> {
        let k = self.omegas.len() as f64;
        self.omegas.iter().map(|w| w / k).collect()
    }
}

/// `ω_j = K·Γ_j`.
pub fn class_weights(dist: &ComplementaryDistribution) -> ClassWeights {
    weights_from_probs(dist.gammas())
}

/// `ω_j = K·p_j` for any label distribution `p`.
pub fn weights_from_probs(probs: &[f64]) -> ClassWeights {
    let k = probs.len() as f64;
    ClassWeights {
        omegas: probs.iter().map(|p| p * k).collect(),
    }
}

/// Inverse effective-number weights `(1 − b)/(1 − b^{n_j})`, rescaled to sum `K`.
pub fn cb_effective_weights(prior: &ClassPrior, beta_cb: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta_cb) {
        return Err(PriorError::InvalidBetaCb(beta_cb));
    }
    let mut raw = Vec::with_capacity(prior.num_classes());
    for (class, &n) in prior.counts().iter().enumerate() {
        if beta_cb == 0.0 {
            raw.push(1.0);
            continue;
        }
        if n == 0 {
            return Err(PriorError::EmptyClass { class, beta_cb });
        }
        let effective = (1.0 - beta_cb.powf(n as f64)) / (1.0 - beta_cb);
        raw.push(1.0 / effective);
    }
    ClassWeights::from_raw(&raw)
}

/// Auxiliary-set size `⌈N·(K·α − 1)⌉` that balances the classes when labels
/// are allocated proportionally to `Γ(α)`.
///
/// Integer allocation leaves a residual imbalance of at most `K` samples.
pub fn required_aux_size(prior: &ClassPrior, alpha: f64) -> Result<u64> {
    let max_beta = prior.max_beta();
    if alpha.is_nan() || alpha < max_beta || alpha.is_infinite() {
        return Err(PriorError::AlphaOutOfRange {
            alpha,
            min_alpha: max_beta,
        });
    }
    let k = prior.num_classes() as f64;
    let exact = prior.total() as f64 * (k * alpha - 1.0);
    // Absorb rounding in K·α so that exact integers are not bumped up by one.
    let m = (exact - 1e-9 * exact.abs().max(1.0)).ceil().max(0.0);
    Ok(m as u64)
}

/// Label prior of the training set augmented with `aux_size` auxiliary
/// instances labelled according to `gammas`.
pub fn mixed_prior(prior: &ClassPrior, gammas: &[f64], aux_size: u64) -> Vec<f64> {
    let n = prior.total() as f64;
    let m = aux_size as f64;
    prior
        .counts()
        .iter()
        .zip(gammas)
        .map(|(&c, &g)| (c as f64 + m * g) / (n + m))
        .collect()
}

/// Which label distribution auxiliary instances are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LabelDistributionKind {
    /// `Γ(α)`; `None` uses [`default_alpha`].
    Complementary {
        #[serde(default)]
        alpha: Option<f64>,
    },
    Mcd,
    Uniform,
    /// Inverse effective-number weights normalised to sum to one.
    ClassBalanced {
        beta_cb: f64,
    },
    /// The training prior `β` itself.
    OriginalPrior,
    /// All mass on the smallest class.
    SmallestClass,
}

impl Default for LabelDistributionKind {
    fn default() -> Self {
        Self::Complementary { alpha: None }
    }
}

/// Default `beta_cb` for the class-balanced label distribution.
pub const DEFAULT_LABEL_BETA_CB: f64 = 0.9999;

impl LabelDistributionKind {
    /// Probability vector over classes for this kind.
    pub fn resolve(&self, prior: &ClassPrior) -> Result<Vec<f64>> {
        let k = prior.num_classes();
        match self {
            Self::Complementary { alpha } => {
                let alpha = alpha.unwrap_or_else(|| default_alpha(prior));
                if prior.is_uniform() && alpha <= prior.max_beta() {
                    return Ok(mcd(prior).gammas);
                }
                Ok(complementary(prior, alpha)?.gammas)
            }
            Self::Mcd => Ok(mcd(prior).gammas),
            Self::Uniform => Ok(vec![1.0 / k as f64; k]),
            Self::ClassBalanced { beta_cb } => {
                Ok(cb_effective_weights(prior, *beta_cb)?.to_distribution())
            }
            Self::OriginalPrior => Ok(prior.betas().to_vec()),
            Self::SmallestClass => {
                let mut p = vec![0.0; k];
                p[prior.smallest_class()] = 1.0;
                Ok(p)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Complementary { alpha: Some(a) } => format!("complementary({a})"),
            Self::Complementary { alpha: None } => "complementary".into(),
            Self::Mcd => "mcd".into(),
            Self::Uniform => "uniform".into(),
            Self::ClassBalanced { beta_cb } => format!("class-balanced({beta_cb})"),
            Self::OriginalPrior => "original-prior".into(),
            Self::SmallestClass => "smallest-class".into(),
        }
    }
}

/// Checks that `probs` is a probability vector over `k` classes.
pub fn validate_distribution(probs: &[f64], k: usize, tol: f64) -> Result<()> {
    if probs.len() != k {
        return Err(PriorError::InvalidDistribution(format!(
            "expected {k} entries, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PriorError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(PriorError::InvalidDistribution(format!(
            "entries sum to {sum}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn prior_ratios() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        assert_eq!(p.betas(), &[0.75, 0.25]);
        let p = prior_from_counts(&[5, 5, 5, 5]).unwrap();
        assert_eq!(p.betas(), &[0.25; 4]);
    }

    #[test]
    fn prior_rejects_bad_counts() {
        assert!(prior_from_counts(&[]).is_err());
        assert!(prior_from_counts(&[4]).is_err());
        assert!(prior_from_counts(&[0, 0, 0]).is_err());
    }

    #[test]
    fn longtail_prior_head_frequency() {
        let profile = crate::data::longtail_counts(5000, 10, 100.0).unwrap();
        let total: u64 = profile.counts.iter().sum();
        let p = prior_from_counts(&profile.counts).unwrap();
        assert_eq!(p.total(), total);
        assert!((p.betas()[0] - 5000.0 / total as f64).abs() < 1e-15);
        assert!((p.betas()[0] - 0.403).abs() < 5e-4, "{}", p.betas()[0]);
        let expected_alpha = 5000.0 / total as f64 + 50.0 / total as f64;
        assert!((default_alpha(&p) - expected_alpha).abs() < 1e-15);
    }

    #[test]
    fn complementary_examples() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        assert!(close(
            complementary(&p, 1.0).unwrap().gammas(),
            &[0.25, 0.75],
            1e-15
        ));
        assert_eq!(complementary(&p, 0.75).unwrap().gammas(), &[0.0, 1.0]);
        assert!(close(
            complementary(&p, 1e6).unwrap().gammas(),
            &[0.5, 0.5],
            1e-5
        ));
    }

    #[test]
    fn complementary_rejects_small_alpha() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        match complementary(&p, 0.5) {
            Err(PriorError::AlphaOutOfRange { min_alpha, .. }) => assert_eq!(min_alpha, 0.75),
            other => panic!("unexpected {other:?}"),
        }
        let u = prior_from_counts(&[2, 2]).unwrap();
        assert!(matches!(
            complementary(&u, 0.5),
            Err(PriorError::Degenerate(_))
        ));
    }

    #[test]
    fn mcd_examples() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        let d = mcd(&p);
        assert_eq!(d.gammas(), &[0.0, 1.0]);
        assert!(!d.is_degenerate());

        let p = prior_from_counts(&[1, 2, 2]).unwrap();
        assert!(close(mcd(&p).gammas(), &[1.0, 0.0, 0.0], 1e-15));

        let d = mcd(&prior_from_counts(&[5, 5]).unwrap());
        assert!(d.is_degenerate());
        assert_eq!(d.gammas(), &[0.5, 0.5]);
    }

    #[test]
    fn default_alpha_examples() {
        assert_eq!(default_alpha(&prior_from_counts(&[3, 1]).unwrap()), 1.0);
        let u = prior_from_counts(&[7; 10]).unwrap();
        assert!((default_alpha(&u) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn class_weight_examples() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        assert_eq!(
            class_weights(&complementary(&p, 1.0).unwrap()).omegas(),
            &[0.5, 1.5]
        );
        assert_eq!(
            class_weights(&complementary(&p, 0.75).unwrap()).omegas(),
            &[0.0, 2.0]
        );
        let w = weights_from_probs(&[0.1; 10]);
        assert!(w.omegas().iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cb_weight_examples() {
        let p = prior_from_counts(&[10, 1]).unwrap();
        assert_eq!(cb_effective_weights(&p, 0.0).unwrap().omegas(), &[1.0, 1.0]);

        // (1 − 0.9^10)/0.1 evaluated by repeated multiplication.
        let mut pow = 1.0f64;
        for _ in 0..10 {
            pow *= 0.9;
        }
        let effective = (1.0 - pow) / 0.1;
        assert!((effective - 6.513215599).abs() < 1e-9);
        let raw = [1.0 / effective, 1.0];
        let s = raw[0] + raw[1];
        let w = cb_effective_weights(&p, 0.9).unwrap();
        assert!(close(
            w.omegas(),
            &[2.0 * raw[0] / s, 2.0 * raw[1] / s],
            1e-12
        ));
        assert!((raw[0] - 0.15353).abs() < 1e-5);

        let eq = cb_effective_weights(&prior_from_counts(&[5, 5]).unwrap(), 0.77).unwrap();
        assert_eq!(eq.omegas()[0], eq.omegas()[1]);
    }

    #[test]
    fn cb_weight_errors() {
        let p = prior_from_counts(&[10, 0]).unwrap();
        assert!(matches!(
            cb_effective_weights(&p, 0.5),
            Err(PriorError::EmptyClass { class: 1, .. })
        ));
        assert!(cb_effective_weights(&p, 0.0).is_ok());
        assert!(matches!(
            cb_effective_weights(&p, 1.0),
            Err(PriorError::InvalidBetaCb(_))
        ));
    }

    /// Finds the smallest total `M` whose proportional allocation balances the
    /// counts, by trying every allocation of `M` instances over two classes.
    fn brute_force_balance(counts: [u64; 2]) -> (u64, [u64; 2]) {
        for m in 0..100u64 {
            for a in 0..=m {
                let totals = [counts[0] + a, counts[1] + m - a];
                if totals[0] == totals[1] {
                    return (m, totals);
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn required_aux_size_examples() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        let m = required_aux_size(&p, 0.75).unwrap();
        assert_eq!((m, [3, 3]), brute_force_balance([3, 1]));
        let m = required_aux_size(&p, 1.0).unwrap();
        assert_eq!(m, 4);
        let g = complementary(&p, 1.0).unwrap();
        let alloc: Vec<f64> = g.gammas().iter().map(|x| x * m as f64).collect();
        assert_eq!(alloc, vec![1.0, 3.0]);
        assert_eq!(3.0 + alloc[0], 1.0 + alloc[1]);

        let u = prior_from_counts(&[4; 10]).unwrap();
        assert_eq!(required_aux_size(&u, 0.1).unwrap(), 0);
        assert!(required_aux_size(&p, 0.5).is_err());
    }

    #[test]
    fn mixed_prior_examples() {
        let p = prior_from_counts(&[3, 1]).unwrap();
        assert_eq!(mixed_prior(&p, &[0.5, 0.5], 0), p.betas());
        assert_eq!(mixed_prior(&p, &[0.0, 1.0], 2), vec![0.5, 0.5]);
        assert_eq!(mixed_prior(&p, &[0.5, 0.5], 4), vec![0.625, 0.375]);
    }

    #[test]
    fn label_kinds_resolve() {
        let p = prior_from_counts(&[6, 3, 1]).unwrap();
        for kind in [
            LabelDistributionKind::default(),
            LabelDistributionKind::Mcd,
            LabelDistributionKind::Uniform,
            LabelDistributionKind::ClassBalanced {
                beta_cb: DEFAULT_LABEL_BETA_CB,
            },
            LabelDistributionKind::OriginalPrior,
            LabelDistributionKind::SmallestClass,
        ] {
            let probs = kind.resolve(&p).unwrap();
            validate_distribution(&probs, 3, 1e-12).unwrap();
        }
        assert_eq!(
            LabelDistributionKind::SmallestClass.resolve(&p).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        let json =
            serde_json::to_string(&LabelDistributionKind::ClassBalanced { beta_cb: 0.9 }).unwrap();
        assert_eq!(json, r#"{"kind":"class-balanced","beta_cb":0.9}"#);
    }

    fn arb_counts() -> impl Strategy<Value = Vec<u64>> {
        prop::collection::vec(1u64..500, 2..12)
    }

    proptest! {
        #[test]
        fn gammas_are_a_distribution(counts in arb_counts(), extra in 0.0f64..5.0) {
            let p = prior_from_counts(&counts).unwrap();
            prop_assume!(!p.is_uniform());
            let d = complementary(&p, p.max_beta() + extra).unwrap();
            let s: f64 = d.gammas().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(d.gammas().iter().all(|&g| g >= 0.0));
            let w = class_weights(&d);
            let ws: f64 = w.omegas().iter().sum();
            prop_assert!((ws - counts.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn flattening_is_monotone(counts in arb_counts(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let p = prior_from_counts(&counts).unwrap();
            prop_assume!(!p.is_uniform());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let k = counts.len() as f64;
            let dev = |x: f64| {
                complementary(&p, p.max_beta() + x).unwrap().gammas().iter()
                    .map(|g| (g - 1.0 / k).abs()).fold(0.0, f64::max)
            };
            prop_assert!(dev(hi) <= dev(lo) + 1e-15);
        }

        #[test]
        fn mcd_zero_and_inverse_order(counts in arb_counts(), extra in 0.0f64..2.0) {
            let p = prior_from_counts(&counts).unwrap();
            prop_assume!(!p.is_uniform());
            let m = mcd(&p);
            let max = p.max_beta();
            for (b, g) in p.betas().iter().zip(m.gammas()) {
                if *b == max { prop_assert_eq!(*g, 0.0); }
            }
            let d = complementary(&p, max + extra).unwrap();
            let (b, g) = (p.betas(), d.gammas());
            for i in 0..b.len() {
                for j in 0..b.len() {
                    if b[i] <= b[j] { prop_assert!(g[i] >= g[j] - 1e-15); }
                }
            }
        }

        #[test]
        fn balance_identity(counts in arb_counts(), extra in 0.0f64..1.0) {
            let p = prior_from_counts(&counts).unwrap();
            prop_assume!(!p.is_uniform());
            let alpha = p.max_beta() + extra;
            let d = complementary(&p, alpha).unwrap();
            let m = required_aux_size(&p, alpha).unwrap();
            let mixed = mixed_prior(&p, d.gammas(), m);
            let k = counts.len() as f64;
            let bound = k / (p.total() as f64 + m as f64);
            for q in mixed {
                prop_assert!((q - 1.0 / k).abs() <= bound);
            }
        }

        #[test]
        fn cb_weights_sum_to_k(counts in arb_counts(), b in 0.0f64..0.9999) {
            let p = prior_from_counts(&counts).unwrap();
            let w = cb_effective_weights(&p, b).unwrap();
            let s: f64 = w.omegas().iter().sum();
            prop_assert!((s - counts.len() as f64).abs() < 1e-12);
        }
    }
}
