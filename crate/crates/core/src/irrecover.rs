//! Data irrecoverability: Fano lower bounds on the failure probability of
//! any adversary, the minimum noise levels they imply, and Monte Carlo MAP
//! adversaries that test those bounds.
//!
//! All information quantities are in nats.

use std::f64::consts::LN_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::perturb::{perturb_gaussian, perturb_signflip, MechanismKind, PerturbationSpec};
use crate::rng::{derive_seed, signed_bernoulli, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrrecovClass {
    /// `n` Ising samples on `sqrt(p)` nodes, Gaussian noise on each sample.
    MleIsing,
    /// `n` binary GLM labels with additive Gaussian noise.
    GlmLabels,
    /// `n` binary matrix entries with additive Gaussian noise.
    PcaEntries,
    /// `n` binary matrix entries published through a sign flip.
    MaxmarginFlip,
}

impl IrrecovClass {
    pub fn name(self) -> &'static str {
        match self {
            IrrecovClass::MleIsing => "mle_ising",
            IrrecovClass::GlmLabels => "glm_labels",
            IrrecovClass::PcaEntries => "pca_entries",
            IrrecovClass::MaxmarginFlip => "maxmargin_flip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrrecovQuery {
    pub problem_kind: IrrecovClass,
    pub gamma: f64,
    pub n: usize,
    /// Statistic dimension `p = d^2` for `d` Ising nodes.
    #[serde(default)]
    pub p: Option<usize>,
}

impl IrrecovQuery {
    pub fn new(problem_kind: IrrecovClass, gamma: f64, n: usize) -> Self {
        Self {
            problem_kind,
            gamma,
            n,
            p: None,
        }
    }

    pub fn ising(gamma: f64, n: usize, p: usize) -> Self {
        Self {
            problem_kind: IrrecovClass::MleIsing,
            gamma,
            n,
            p: Some(p),
        }
    }

    fn sqrt_p(&self) -> Result<f64> {
        match self.p {
            Some(p) if p >= 1 => Ok((p as f64).sqrt()),
            _ => Err(Error::InvalidParameter("mle_ising needs p >= 1".into())),
        }
    }

    /// Checks the range of `gamma` and the theorem's feasibility conditions.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        let n = self.n as f64;
        match self.problem_kind {
            IrrecovClass::MleIsing => {
                let sp = self.sqrt_p()?;
                let cap = 1.0 - 4.0 / (n * sp);
                if self.gamma > cap {
                    return Err(Error::InfeasibleQuery(format!(
                        "gamma = {} exceeds 1 - 4/(n sqrt(p)) = {cap}",
                        self.gamma
                    )));
                }
                if n > (sp / 4.0).exp2() {
                    return Err(Error::InfeasibleQuery(format!(
                        "n = {} exceeds 2^(sqrt(p)/4) = {}",
                        self.n,
                        (sp / 4.0).exp2()
                    )));
                }
            }
            _ => {
                let cap = 1.0 - 2.0 / n;
                if self.gamma > cap {
                    return Err(Error::InfeasibleQuery(format!(
                        "gamma = {} exceeds 1 - 2/n = {cap}",
                        self.gamma
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `1 - (I + log 2) / H`, or 0 when `H <= I + log 2`.
pub fn fano_failure_bound(entropy: f64, mutual_info_bound: f64) -> Result<f64> {
    if !(entropy > 0.0) {
        return Err(Error::NonPositiveEntropy(entropy));
    }
    if entropy <= mutual_info_bound + LN_2 {
        return Ok(0.0);
    }
    Ok(1.0 - (mutual_info_bound + LN_2) / entropy)
}

/// Failure bound for an `(eps, 0)`-private mechanism, where `b(eps, 0) = eps`.
pub fn privacy_failure_bound(eps: f64, entropy: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eps must be >= 0, got {eps}"
        )));
    }
    fano_failure_bound(entropy, eps)
}

/// Entropy (or its lower bound) of the data prior: `n log 2` for binary data,
/// `n sqrt(p) log 2 - n log n` for Ising datasets identified up to permutation.
pub fn data_entropy(query: &IrrecovQuery) -> Result<f64> {
    let n = query.n as f64;
    match query.problem_kind {
        IrrecovClass::MleIsing => Ok(n * query.sqrt_p()? * LN_2 - n * n.ln()),
        _ => Ok(n * LN_2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseThreshold {
    /// `sigma_eta^2 >= min_variance`.
    Variance { min_variance: f64 },
    /// `q` in the open interval `(lower, upper)`. `statement_upper` is the
    /// narrower endpoint `1/2 + (1 - gamma) log 2 / 8`.
    FlipProbability {
        lower: f64,
        upper: f64,
        statement_upper: f64,
    },
}

impl NoiseThreshold {
    /// Whether the mechanism meets the threshold.
    pub fn admits(&self, pert: &PerturbationSpec) -> bool {
        match *self {
            NoiseThreshold::Variance { min_variance } => pert.noise_sd().powi(2) >= min_variance,
            NoiseThreshold::FlipProbability { lower, upper, .. } => {
                pert.kind == MechanismKind::SignFlip && pert.q > lower && pert.q < upper
            }
        }
    }
}

/// Minimum noise guaranteeing failure probability at least `gamma`.
pub fn min_noise_variance(query: &IrrecovQuery) -> Result<NoiseThreshold> {
    query.validate()?;
    let slack = 1.0 - query.gamma;
    Ok(match query.problem_kind {
        IrrecovClass::MleIsing => NoiseThreshold::Variance {
            min_variance: 4.0 / (slack * LN_2),
        },
        IrrecovClass::GlmLabels | IrrecovClass::PcaEntries => NoiseThreshold::Variance {
            min_variance: 8.0 / (slack * LN_2),
        },
        IrrecovClass::MaxmarginFlip => NoiseThreshold::FlipProbability {
            lower: 0.5,
            upper: 0.5 + slack / 8.0,
            statement_upper: 0.5 + slack * LN_2 / 8.0,
        },
    })
}

fn mechanism_mismatch(query: &IrrecovQuery, pert: &PerturbationSpec) -> Error {
    Error::InvalidCombination(format!(
        "{} mechanism for {}",
        pert.kind.name(),
        query.problem_kind.name()
    ))
}

fn gaussian_sigma(query: &IrrecovQuery, pert: &PerturbationSpec) -> Result<f64> {
    pert.validate()?;
    match (query.problem_kind, pert.kind) {
        (IrrecovClass::MleIsing, MechanismKind::IsingClamp | MechanismKind::GaussianAdditive)
        | (IrrecovClass::GlmLabels | IrrecovClass::PcaEntries, MechanismKind::GaussianAdditive) => {
            Ok(pert.sigma_eta)
        }
        (_, MechanismKind::Identity) if query.problem_kind != IrrecovClass::MaxmarginFlip => {
            Ok(0.0)
        }
        _ => Err(mechanism_mismatch(query, pert)),
    }
}

fn flip_q(query: &IrrecovQuery, pert: &PerturbationSpec) -> Result<f64> {
    pert.validate()?;
    match pert.kind {
        MechanismKind::SignFlip => Ok(pert.q),
        MechanismKind::Identity => Ok(1.0),
        _ => Err(mechanism_mismatch(query, pert)),
    }
}

/// Pairwise-KL upper bound on `I(X; M(X))`: `4n / sigma^2` for labels and
/// entries, `2 n sqrt(p) / sigma^2` for Ising samples and
/// `(n/4)(2q - 1) log(q / (1 - q))` for sign flips.
pub fn pairwise_kl_mi_bound(query: &IrrecovQuery, pert: &PerturbationSpec) -> Result<f64> {
    let n = query.n as f64;
    match query.problem_kind {
        IrrecovClass::MaxmarginFlip => {
            let q = flip_q(query, pert)?;
            if q == 0.5 {
                return Ok(0.0);
            }
            Ok(n / 4.0 * (2.0 * q - 1.0) * (q / (1.0 - q)).ln())
        }
        IrrecovClass::MleIsing => {
            let s2 = gaussian_sigma(query, pert)?.powi(2);
            Ok(2.0 * n * query.sqrt_p()? / s2)
        }
        IrrecovClass::GlmLabels | IrrecovClass::PcaEntries => {
            let s2 = gaussian_sigma(query, pert)?.powi(2);
            Ok(4.0 * n / s2)
        }
    }
}

/// Fano lower bound on the failure probability of any adversary.
pub fn failure_lower_bound(query: &IrrecovQuery, pert: &PerturbationSpec) -> Result<f64> {
    fano_failure_bound(data_entropy(query)?, pairwise_kl_mi_bound(query, pert)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryResult {
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub gamma_target: f64,
    /// `sqrt(gamma (1 - gamma) / trials)`.
    pub stderr: f64,
    pub pass: bool,
}

impl AdversaryResult {
    pub fn from_counts(trials: usize, failures: usize, gamma: f64) -> Self {
        let failure_rate = failures as f64 / trials as f64;
        let stderr = (gamma * (1.0 - gamma) / trials as f64).sqrt();
        Self {
            trials,
            failures,
            failure_rate,
            gamma_target: gamma,
            stderr,
            pass: failure_rate >= gamma - 3.0 * stderr,
        }
    }
}

pub const MIN_ADVERSARY_TRIALS: usize = 1000;
/// Largest Ising instance the exhaustive MAP adversary accepts.
pub const ISING_MAX_NODES: usize = 4;
pub const ISING_MAX_SAMPLES: usize = 3;

/// Runs the MAP adversary against `trials` datasets drawn from the uniform
/// binary prior and counts failures of exact recovery.
///
/// Label and entry noise is decoded by sign thresholding, sign flips by the
/// identity map and Ising samples by exhaustive MAP over sample multisets,
/// with success judged up to permutation of the samples.
pub fn simulate_adversary(
    query: &IrrecovQuery,
    pert: &PerturbationSpec,
    trials: usize,
) -> Result<AdversaryResult> {
    let outcomes = adversary_outcomes(query, pert, trials)?;
    let failures = outcomes.iter().filter(|&&f| f).count();
    Ok(AdversaryResult::from_counts(trials, failures, query.gamma))
}

/// Per-trial outcomes of [`simulate_adversary`]: `true` where recovery failed.
pub fn adversary_outcomes(
    query: &IrrecovQuery,
    pert: &PerturbationSpec,
    trials: usize,
) -> Result<Vec<bool>> {
    if trials < MIN_ADVERSARY_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_ADVERSARY_TRIALS} trials, got {trials}"
        )));
    }
    if !(query.gamma > 0.0 && query.gamma <= 1.0) || query.n == 0 {
        return Err(Error::InvalidParameter(
            "gamma must lie in (0, 1] and n >= 1".into(),
        ));
    }
    let trial = |t: usize| -> Result<bool> {
        let seed = derive_seed(pert.seed, t as u64);
        match query.problem_kind {
            IrrecovClass::GlmLabels | IrrecovClass::PcaEntries => {
                let sigma = gaussian_sigma(query, pert)?;
                let x = uniform_signs(query.n, seed);
                let noisy = perturb_gaussian(
                    &x,
                    &PerturbationSpec::gaussian(sigma, derive_seed(seed, 1))?,
                )?;
                Ok(noisy.iter().zip(&x).any(|(&z, &v)| sign(z) != v))
            }
            IrrecovClass::MaxmarginFlip => {
                let q = flip_q(query, pert)?;
                let x = Matrix::from_vec(1, query.n, uniform_signs(query.n, seed))?;
                let out =
                    perturb_signflip(&x, &PerturbationSpec::sign_flip(q, derive_seed(seed, 1))?)?;
                Ok(out.as_slice() != x.as_slice())
            }
            IrrecovClass::MleIsing => {
                let sigma = gaussian_sigma(query, pert)?;
                let d = ising_nodes(query)?;
                let x = uniform_signs(query.n * d, seed);
                let noisy = perturb_gaussian(
                    &x,
                    &PerturbationSpec::gaussian(sigma, derive_seed(seed, 1))?,
                )?;
                let guess = ising_map_decode(&Matrix::from_vec(query.n, d, noisy)?, sigma)?;
                let truth = Matrix::from_vec(query.n, d, x)?;
                Ok(sorted_rows(&guess) != sorted_rows(&truth))
            }
        }
    };
    (0..trials).into_par_iter().map(trial).collect()
}

fn ising_nodes(query: &IrrecovQuery) -> Result<usize> {
    let p = query
        .p
        .ok_or_else(|| Error::InvalidParameter("mle_ising needs p".into()))?;
    let d = (p as f64).sqrt().round() as usize;
    if d * d != p {
        return Err(Error::InvalidParameter(format!(
            "p = {p} is not a perfect square"
        )));
    }
    if d > ISING_MAX_NODES || query.n > ISING_MAX_SAMPLES {
        return Err(Error::IntractableInstance(format!(
            "exhaustive MAP needs sqrt(p) <= {ISING_MAX_NODES} and n <= {ISING_MAX_SAMPLES}, got sqrt(p) = {d}, n = {}",
            query.n
        )));
    }
    Ok(d)
}

fn uniform_signs(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    (0..len)
        .map(|_| signed_bernoulli::<f64, _>(&mut rng, 0.5))
        .collect()
}

fn sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn sorted_rows(m: &Matrix<f64>) -> Vec<Vec<i8>> {
    let mut rows: Vec<Vec<i8>> = (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .map(|&v| if v > 0.0 { 1 } else { -1 })
                .collect()
        })
        .collect();
    rows.sort();
    rows
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Exhaustive MAP estimate of the sample multiset behind `observed`
/// (`n x d`, each row a `{-1, +1}^d` sample plus `N(0, sigma^2)` noise) under
/// the uniform iid prior. Rows of the result are in canonical order.
pub fn ising_map_decode(observed: &Matrix<f64>, sigma: f64) -> Result<Matrix<f64>> {
    let (n, d) = (observed.rows(), observed.cols());
    if d > ISING_MAX_NODES || n > ISING_MAX_SAMPLES {
        return Err(Error::IntractableInstance(format!(
            "exhaustive MAP over {n} samples on {d} nodes"
        )));
    }
    let vector = |code: usize| -> Vec<f64> {
        (0..d)
            .map(|j| if code >> j & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    };
    if sigma == 0.0 {
        let signs: Vec<f64> = observed.as_slice().iter().map(|&z| sign(z)).collect();
        let m = Matrix::from_vec(n, d, signs)?;
        let rows: Vec<f64> = sorted_rows(&m)
            .into_iter()
            .flatten()
            .map(f64::from)
            .collect();
        return Matrix::from_vec(n, d, rows);
    }
    let codes = 1usize << d;
    let s2 = sigma * sigma;
    // score[i][c]: log-likelihood of row i given sample c, up to a constant
    let score: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..codes)
                .map(|c| {
                    vector(c)
                        .iter()
                        .zip(observed.row(i))
                        .map(|(v, z)| v * z)
                        .sum::<f64>()
                        / s2
                })
                .collect()
        })
        .collect();
    let perms = permutations(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut multiset = vec![0usize; n];
    loop {
        let mut orderings: Vec<Vec<usize>> = perms
            .iter()
            .map(|p| p.iter().map(|&k| multiset[k]).collect())
            .collect();
        orderings.sort();
        orderings.dedup();
        let terms: Vec<f64> = orderings
            .iter()
            .map(|o| o.iter().enumerate().map(|(i, &c)| score[i][c]).sum())
            .collect();
        let lp = log_sum_exp(&terms);
        if best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, multiset.clone()));
        }
        // next nondecreasing tuple
        let Some(k) = (0..n).rev().find(|&k| multiset[k] + 1 < codes) else {
            break;
        };
        let v = multiset[k] + 1;
        multiset[k..].iter_mut().for_each(|m| *m = v);
    }
    let (_, ms) = best.expect("at least one multiset");
    let m = Matrix::from_vec(n, d, ms.iter().flat_map(|&c| vector(c)).collect())?;
    let rows: Vec<f64> = sorted_rows(&m)
        .into_iter()
        .flatten()
        .map(f64::from)
        .collect();
    Matrix::from_vec(n, d, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn gauss(sigma: f64, seed: u64) -> PerturbationSpec {
        PerturbationSpec::gaussian(sigma, seed).unwrap()
    }

    #[test]
    fn fano_examples() {
        let b = fano_failure_bound(10.0, LN_2).unwrap();
        assert!((b - (1.0 - 2.0 * LN_2 / 10.0)).abs() < 1e-15);
        assert!((b - 0.8614).abs() < 1e-4);
        assert_eq!(fano_failure_bound(1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            fano_failure_bound(0.0, 0.0),
            Err(Error::NonPositiveEntropy(_))
        ));
        assert_eq!(
            privacy_failure_bound(0.5, 20.0).unwrap(),
            1.0 - (0.5 + LN_2) / 20.0
        );
    }

    #[test]
    fn thresholds() {
        let t = min_noise_variance(&IrrecovQuery::ising(0.5, 2, 64)).unwrap();
        assert_eq!(
            t,
            NoiseThreshold::Variance {
                min_variance: 8.0 / LN_2
            }
        );
        let t = min_noise_variance(&IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 100)).unwrap();
        let NoiseThreshold::Variance { min_variance } = t else {
            panic!()
        };
        assert!((min_variance - 23.083).abs() < 1e-3);
        let t =
            min_noise_variance(&IrrecovQuery::new(IrrecovClass::MaxmarginFlip, 0.5, 100)).unwrap();
        let NoiseThreshold::FlipProbability {
            lower,
            upper,
            statement_upper,
        } = t
        else {
            panic!()
        };
        assert_eq!((lower, upper), (0.5, 0.5625));
        assert!(statement_upper < upper);
        assert!(matches!(
            min_noise_variance(&IrrecovQuery::new(IrrecovClass::GlmLabels, 0.999, 100)),
            Err(Error::InfeasibleQuery(_))
        ));
        assert!(matches!(
            min_noise_variance(&IrrecovQuery::ising(0.1, 3, 16)),
            Err(Error::InfeasibleQuery(_))
        ));
    }

    #[test]
    fn mi_bound_examples() {
        let glm = IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 100);
        let v = pairwise_kl_mi_bound(&glm, &gauss((16.0 / LN_2).sqrt(), 0)).unwrap();
        assert!((v - 400.0 * LN_2 / 16.0).abs() < 1e-12);
        assert!((v - 17.329).abs() < 1e-3);
        let ising = IrrecovQuery::ising(0.5, 1, 16);
        let v = pairwise_kl_mi_bound(&ising, &gauss(8f64.sqrt(), 0)).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let mm = IrrecovQuery::new(IrrecovClass::MaxmarginFlip, 0.5, 100);
        assert!(
            pairwise_kl_mi_bound(&mm, &PerturbationSpec::sign_flip(0.55, 0).unwrap()).unwrap()
                > 0.0
        );
        let half = PerturbationSpec {
            q: 0.5,
            ..PerturbationSpec::sign_flip(0.6, 0).unwrap()
        };
        assert_eq!(
            pairwise_kl_mi_bound(&mm, &half),
            Err(Error::InvalidParameter(
                "sign_flip needs q in (1/2, 1], got 0.5".into()
            ))
        );
        assert!(matches!(
            pairwise_kl_mi_bound(&mm, &gauss(1.0, 0)),
            Err(Error::InvalidCombination(_))
        ));
    }

    #[test]
    fn noiseless_labels_are_recovered() {
        let q = IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 37);
        let r = simulate_adversary(&q, &gauss(0.0, 3), 1000).unwrap();
        assert_eq!(r.failures, 0);
        assert!(!r.pass);
    }

    #[test]
    fn label_failure_matches_gaussian_oracle() {
        let per_label = Normal::new(0.0, 1.0).unwrap().cdf(-0.5);
        assert!((per_label - 0.3085).abs() < 1e-4);
        let expected = 1.0 - (1.0 - per_label).powi(10);
        let q = IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 10);
        let r = simulate_adversary(&q, &gauss(2.0, 11), 20_000).unwrap();
        let se = (expected * (1.0 - expected) / 20_000.0).sqrt();
        assert!(
            (r.failure_rate - expected).abs() < 4.0 * se,
            "{} vs {expected}",
            r.failure_rate
        );
        let q1 = IrrecovQuery::new(IrrecovClass::PcaEntries, 0.2, 1);
        let r = simulate_adversary(&q1, &gauss(2.0, 12), 20_000).unwrap();
        let se = (per_label * (1.0 - per_label) / 20_000.0).sqrt();
        assert!((r.failure_rate - per_label).abs() < 4.0 * se);
    }

    #[test]
    fn sign_flip_failure_matches_product() {
        let q = IrrecovQuery::new(IrrecovClass::MaxmarginFlip, 0.5, 5);
        let r =
            simulate_adversary(&q, &PerturbationSpec::sign_flip(0.8, 5).unwrap(), 20_000).unwrap();
        let expected = 1.0 - 0.8f64.powi(5);
        let se = (expected * (1.0 - expected) / 20_000.0).sqrt();
        assert!((r.failure_rate - expected).abs() < 4.0 * se);
        let r = simulate_adversary(&q, &PerturbationSpec::identity(), 1000).unwrap();
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn failure_rate_is_monotone_in_noise() {
        let q = IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 20);
        let rates: Vec<f64> = [0.3, 0.5, 0.8]
            .iter()
            .map(|&s| {
                simulate_adversary(&q, &gauss(s, 9), 2000)
                    .unwrap()
                    .failure_rate
            })
            .collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
        let q = IrrecovQuery::new(IrrecovClass::MaxmarginFlip, 0.5, 20);
        let rates: Vec<f64> = [0.99, 0.97, 0.9]
            .iter()
            .map(|&p| {
                simulate_adversary(&q, &PerturbationSpec::sign_flip(p, 9).unwrap(), 2000)
                    .unwrap()
                    .failure_rate
            })
            .collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    }

    #[test]
    fn ising_limits() {
        let big = IrrecovQuery::ising(0.1, 2, 25);
        assert!(matches!(
            simulate_adversary(&big, &gauss(1.0, 0), 1000),
            Err(Error::IntractableInstance(_))
        ));
        let q = IrrecovQuery::ising(0.1, 2, 8);
        assert!(matches!(
            simulate_adversary(&q, &gauss(1.0, 0), 1000),
            Err(Error::InvalidParameter(_))
        ));
        let q = IrrecovQuery::ising(0.1, 2, 4);
        let r = simulate_adversary(&q, &gauss(0.05, 1), 1000).unwrap();
        assert_eq!(r.failures, 0);
    }

    /// Posterior over multisets by brute force over ordered datasets.
    fn brute_force_map(observed: &Matrix<f64>, sigma: f64) -> Vec<Vec<i8>> {
        use std::collections::BTreeMap;
        let (n, d) = (observed.rows(), observed.cols());
        let codes = 1usize << d;
        let mut post: BTreeMap<Vec<Vec<i8>>, f64> = BTreeMap::new();
        for idx in 0..codes.pow(n as u32) {
            let mut rows = Vec::new();
            let mut loglik = 0.0;
            for i in 0..n {
                let c = idx / codes.pow(i as u32) % codes;
                let v: Vec<i8> = (0..d)
                    .map(|j| if c >> j & 1 == 1 { 1 } else { -1 })
                    .collect();
                for j in 0..d {
                    let z = observed[(i, j)] - f64::from(v[j]);
                    loglik -= z * z / (2.0 * sigma * sigma);
                }
                rows.push(v);
            }
            rows.sort();
            *post.entry(rows).or_insert(0.0) += loglik.exp();
        }
        post.into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn exhaustive_map_matches_brute_force() {
        use crate::rng::normal;
        for (t, &(n, d)) in [(2usize, 2usize), (3, 2), (2, 3), (3, 1)]
            .iter()
            .cycle()
            .take(40)
            .enumerate()
        {
            let mut rng = stream_rng(99, t as u64);
            let vals: Vec<f64> = (0..n * d)
                .map(|_| {
                    signed_bernoulli::<f64, _>(&mut rng, 0.5) + 1.5 * normal::<f64, _>(&mut rng)
                })
                .collect();
            let obs = Matrix::from_vec(n, d, vals).unwrap();
            let got = ising_map_decode(&obs, 1.5).unwrap();
            assert_eq!(sorted_rows(&got), brute_force_map(&obs, 1.5), "case {t}");
        }
    }

    fn feasible_tuple(class: IrrecovClass, u: (f64, f64, f64)) -> IrrecovQuery {
        match class {
            IrrecovClass::MleIsing => {
                let d = 4 + (u.1 * 40.0) as usize;
                let n_max = ((d as f64 / 4.0).exp2().floor() as usize).min(1000);
                let n = 2 + (u.2 * (n_max - 1) as f64) as usize % (n_max - 1);
                let cap = 1.0 - 4.0 / (n as f64 * d as f64);
                IrrecovQuery::ising(cap * (0.001 + 0.998 * u.0), n, d * d)
            }
            _ => {
                let n = 3 + (u.1 * 1000.0) as usize;
                let cap = 1.0 - 2.0 / n as f64;
                IrrecovQuery::new(class, cap * (0.001 + 0.998 * u.0), n)
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn thresholds_imply_the_target(
            u in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
            v in 0.0f64..1.0,
        ) {
            for class in [IrrecovClass::MleIsing, IrrecovClass::GlmLabels, IrrecovClass::PcaEntries, IrrecovClass::MaxmarginFlip] {
                let q = feasible_tuple(class, u);
                q.validate().unwrap();
                let pert = match min_noise_variance(&q).unwrap() {
                    NoiseThreshold::Variance { min_variance } => gauss(min_variance.sqrt() * (1.0 + v), 0),
                    NoiseThreshold::FlipProbability { upper, .. } => {
                        PerturbationSpec::sign_flip(0.5 + (upper - 0.5) * (1.0 - v).max(1e-9), 0).unwrap()
                    }
                };
                let bound = failure_lower_bound(&q, &pert).unwrap();
                prop_assert!(bound >= q.gamma, "{:?}: {} < {}", q, bound, q.gamma);
            }
        }
    }
}
