//! Local perturbation mechanisms and Monte Carlo checks of their moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exp_family::{Dataset, Hypothesis, ProblemSpec};
use crate::linalg::Matrix;
use crate::rng::{normal, signed_bernoulli, stream_rng, StreamRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    GaussianAdditive,
    IsingClamp,
    SignFlip,
    Identity,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::GaussianAdditive => "gaussian_additive",
            MechanismKind::IsingClamp => "ising_clamp",
            MechanismKind::SignFlip => "sign_flip",
            MechanismKind::Identity => "identity",
        }
    }
}

/// A noise mechanism and its parameters. `sigma_eta` is used by the Gaussian
/// kinds, `q = P[eta = +1]` by sign flipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: MechanismKind,
    #[serde(default)]
    pub sigma_eta: f64,
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl PerturbationSpec {
    pub fn identity() -> Self {
        Self {
            kind: MechanismKind::Identity,
            sigma_eta: 0.0,
            q: 1.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma_eta: f64, seed: u64) -> Result<Self> {
        let s = Self {
            kind: MechanismKind::GaussianAdditive,
            sigma_eta,
            q: 1.0,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn ising_clamp(sigma_eta: f64, seed: u64) -> Result<Self> {
        let s = Self {
            kind: MechanismKind::IsingClamp,
            sigma_eta,
            q: 1.0,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sign_flip(q: f64, seed: u64) -> Result<Self> {
        let s = Self {
            kind: MechanismKind::SignFlip,
            sigma_eta: 0.0,
            q,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eta >= 0.0) || !self.sigma_eta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_eta must be finite and >= 0, got {}",
                self.sigma_eta
            )));
        }
        if self.kind == MechanismKind::SignFlip && !(self.q > 0.5 && self.q <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sign_flip needs q in (1/2, 1], got {}",
                self.q
            )));
        }
        Ok(())
    }

    /// Whether `E[psi(x, eta)] = t(x)` holds for the mechanism.
    pub fn is_unbiased(&self) -> bool {
        match self.kind {
            MechanismKind::SignFlip => self.q == 1.0,
            _ => true,
        }
    }

    /// Standard deviation of the additive noise (zero for non-Gaussian kinds).
    pub fn noise_sd(&self) -> f64 {
        match self.kind {
            MechanismKind::GaussianAdditive | MechanismKind::IsingClamp => self.sigma_eta,
            _ => 0.0,
        }
    }

    fn rng(&self) -> StreamRng {
        stream_rng(self.seed, 0)
    }

    fn expect(&self, kind: MechanismKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind {
                expected: kind.name(),
                got: self.kind.name(),
            });
        }
        self.validate()
    }
}

fn check_binary<T: Scalar>(values: &[T]) -> Result<()> {
    match values
        .iter()
        .enumerate()
        .find(|(_, &v)| v != T::one() && v != -T::one())
    {
        Some((index, &v)) => Err(Error::NonBinary {
            index,
            value: v.to_f64_lossy(),
        }),
        None => Ok(()),
    }
}

fn add_noise<T: Scalar, R: Rng + ?Sized>(data: &[T], sigma: f64, rng: &mut R) -> Vec<T> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let s = T::of(sigma);
    data.iter().map(|&x| x + s * normal::<T, _>(rng)).collect()
}

fn flip<T: Scalar, R: Rng + ?Sized>(data: &[T], q: f64, rng: &mut R) -> Vec<T> {
    if q == 1.0 {
        return data.to_vec();
    }
    data.iter()
        .map(|&x| x * signed_bernoulli::<T, _>(rng, q))
        .collect()
}

/// `psi(y, eta) = y + eta` with iid `eta ~ N(0, sigma_eta^2)`.
pub fn perturb_gaussian<T: Scalar>(data: &[T], spec: &PerturbationSpec) -> Result<Vec<T>> {
    spec.expect(MechanismKind::GaussianAdditive)?;
    Ok(add_noise(data, spec.sigma_eta, &mut spec.rng()))
}

/// `psi(x, eta) = x * eta` with `P[eta = +1] = q`.
pub fn perturb_signflip<T: Scalar>(
    matrix: &Matrix<T>,
    spec: &PerturbationSpec,
) -> Result<Matrix<T>> {
    spec.expect(MechanismKind::SignFlip)?;
    check_binary(matrix.as_slice())?;
    let out = flip(matrix.as_slice(), spec.q, &mut spec.rng());
    Matrix::from_vec(matrix.rows(), matrix.cols(), out)
}

/// Published Ising statistic: each sample (a row of `samples`, entries in
/// `{-1, +1}`) gets its own Gaussian noise vector, the outer products
/// `(x + eta)(x + eta)^T` are summed, the diagonal is removed and the
/// off-diagonal entries are clamped to `[-1, 1]`.
pub fn perturb_ising_stats<T: Scalar>(
    samples: &Matrix<T>,
    spec: &PerturbationSpec,
) -> Result<Matrix<T>> {
    spec.expect(MechanismKind::IsingClamp)?;
    check_binary(samples.as_slice())?;
    Ok(ising_statistic(samples, spec.sigma_eta, &mut spec.rng()))
}

pub(crate) fn ising_statistic<T: Scalar, R: Rng + ?Sized>(
    samples: &Matrix<T>,
    sigma: f64,
    rng: &mut R,
) -> Matrix<T> {
    let d = samples.cols();
    let mut acc = Matrix::zeros(d, d);
    for i in 0..samples.rows() {
        let z = add_noise(samples.row(i), sigma, rng);
        for a in 0..d {
            for b in 0..d {
                acc[(a, b)] = acc[(a, b)] + z[a] * z[b];
            }
        }
    }
    clamp_offdiagonal(&mut acc);
    acc
}

fn clamp_offdiagonal<T: Scalar>(m: &mut Matrix<T>) {
    for a in 0..m.rows() {
        for b in 0..m.cols() {
            m[(a, b)] = if a == b {
                T::zero()
            } else {
                m[(a, b)].max(-T::one()).min(T::one())
            };
        }
    }
}

/// Applies `pert` to a whole dataset of `spec`. Gaussian noise is added to
/// every observation; sign flipping requires `{-1, +1}` observations; the
/// Ising pipeline turns the `n x d` samples of an MLE problem into a
/// summed statistic of length `d * d`.
pub fn perturb_dataset<T: Scalar>(
    spec: &ProblemSpec<T>,
    data: &Dataset<T>,
    pert: &PerturbationSpec,
) -> Result<Dataset<T>> {
    pert.validate()?;
    let obs = match data {
        Dataset::Observations(m) => m,
        Dataset::SummedStatistic { .. } => {
            return Err(shape_err("raw observations", "summed statistic"));
        }
    };
    let mut rng = pert.rng();
    match pert.kind {
        MechanismKind::Identity => Ok(data.clone()),
        MechanismKind::GaussianAdditive => {
            let v = add_noise(obs.as_slice(), pert.sigma_eta, &mut rng);
            Ok(Dataset::Observations(Matrix::from_vec(
                obs.rows(),
                obs.cols(),
                v,
            )?))
        }
        MechanismKind::SignFlip => {
            check_binary(obs.as_slice())?;
            let v = flip(obs.as_slice(), pert.q, &mut rng);
            Ok(Dataset::Observations(Matrix::from_vec(
                obs.rows(),
                obs.cols(),
                v,
            )?))
        }
        MechanismKind::IsingClamp => {
            if !matches!(spec, ProblemSpec::Mle { .. }) {
                return Err(Error::InvalidCombination(format!(
                    "ising_clamp with {}",
                    spec.kind().name()
                )));
            }
            check_binary(obs.as_slice())?;
            let stat = ising_statistic(obs, pert.sigma_eta, &mut rng);
            Ok(Dataset::SummedStatistic {
                sum: stat.into_vec(),
                count: obs.rows(),
            })
        }
    }
}

/// The law of the perturbed data when it stays inside the model family:
/// sign flipping a max-margin matrix with `P[x = +1] = p` gives
/// `P[psi = +1] = q p + (1 - q)(1 - p)`. Unbiased mechanisms return `spec`.
pub fn perturbed_problem<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
) -> Result<ProblemSpec<T>> {
    pert.validate()?;
    if pert.is_unbiased() {
        return Ok(spec.clone());
    }
    match spec {
        ProblemSpec::MaxMargin {
            prob_plus,
            lipschitz_k,
        } => {
            let q = T::of(pert.q);
            let flipped: Vec<T> = prob_plus
                .as_slice()
                .iter()
                .map(|&p| q * p + (T::one() - q) * (T::one() - p))
                .collect();
            ProblemSpec::max_margin(
                Matrix::from_vec(prob_plus.rows(), prob_plus.cols(), flipped)?,
                *lipschitz_k,
            )
        }
        _ => Err(Error::InvalidCombination(format!(
            "{} with {}",
            pert.kind.name(),
            spec.kind().name()
        ))),
    }
}

/// Minimizer `theta*_eta` of the perturbed expected loss.
pub fn perturbed_true_hypothesis<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
) -> Result<Hypothesis<T>> {
    Ok(perturbed_problem(spec, pert)?.true_hypothesis())
}

/// Input of [`check_unbiased`].
#[derive(Debug, Clone)]
pub enum UnbiasedInput<T> {
    /// Statistic values `t(x)` fed through additive, flip or identity noise.
    Vector(Vec<T>),
    /// Ising samples (rows in `{-1, +1}^d`); the target is the noiseless
    /// published statistic, diagonal excluded.
    IsingSamples(Matrix<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnbiasedReport {
    /// Monte Carlo estimate of `E[psi] - t(x)` per checked coordinate.
    pub deviation: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pass: bool,
}

pub const MIN_UNBIASED_TRIALS: usize = 10_000;

type DrawFn = Box<dyn FnMut(&mut StreamRng) -> Vec<f64>>;

/// Monte Carlo check of `E_Q[psi(x, eta)] = t(x)`; passes iff every
/// coordinate deviation is within 4 standard errors.
pub fn check_unbiased<T: Scalar>(
    pert: &PerturbationSpec,
    input: &UnbiasedInput<T>,
    trials: usize,
) -> Result<UnbiasedReport> {
    pert.validate()?;
    if trials < MIN_UNBIASED_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "check_unbiased needs at least {MIN_UNBIASED_TRIALS} trials, got {trials}"
        )));
    }
    let mut rng = pert.rng();
    let (target, mut draw): (Vec<f64>, DrawFn) = match input {
        UnbiasedInput::Vector(t) => {
            let target = t.iter().map(|v| v.to_f64_lossy()).collect();
            let t = t.clone();
            let p = *pert;
            let f = move |rng: &mut StreamRng| -> Vec<f64> {
                let out = match p.kind {
                    MechanismKind::Identity => t.clone(),
                    MechanismKind::GaussianAdditive | MechanismKind::IsingClamp => {
                        add_noise(&t, p.sigma_eta, rng)
                    }
                    MechanismKind::SignFlip => t
                        .iter()
                        .map(|&x| x * signed_bernoulli::<T, _>(rng, p.q))
                        .collect(),
                };
                out.into_iter().map(|v| v.to_f64_lossy()).collect()
            };
            (target, Box::new(f))
        }
        UnbiasedInput::IsingSamples(samples) => {
            if pert.kind != MechanismKind::IsingClamp {
                return Err(Error::WrongKind {
                    expected: MechanismKind::IsingClamp.name(),
                    got: pert.kind.name(),
                });
            }
            check_binary(samples.as_slice())?;
            let d = samples.cols();
            let offdiag = move |m: Matrix<T>| -> Vec<f64> {
                (0..d)
                    .flat_map(|a| (0..d).filter(move |&b| b != a).map(move |b| (a, b)))
                    .map(|(a, b)| m[(a, b)].to_f64_lossy())
                    .collect()
            };
            let mut noiseless = rng.clone();
            let target = offdiag(ising_statistic(samples, 0.0, &mut noiseless));
            let samples = samples.clone();
            let sigma = pert.sigma_eta;
            let f = move |rng: &mut StreamRng| offdiag(ising_statistic(&samples, sigma, rng));
            (target, Box::new(f))
        }
    };
    let k = target.len();
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    for trial in 0..trials {
        let x = draw(&mut rng);
        for j in 0..k {
            let d = x[j] - mean[j];
            mean[j] += d / (trial + 1) as f64;
            m2[j] += d * (x[j] - mean[j]);
        }
    }
    let stderr: Vec<f64> = m2
        .iter()
        .map(|&s| (s / (trials - 1) as f64 / trials as f64).sqrt())
        .collect();
    let deviation: Vec<f64> = mean.iter().zip(&target).map(|(m, t)| m - t).collect();
    let pass = deviation
        .iter()
        .zip(&stderr)
        .zip(&target)
        .all(|((&d, &se), &t)| {
            if se > 0.0 {
                d.abs() <= 4.0 * se
            } else {
                d.abs() <= 1e-12 * (1.0 + t.abs())
            }
        });
    Ok(UnbiasedReport {
        deviation,
        stderr,
        pass,
    })
}

/// Monte Carlo estimate of a moment bound together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub lambda: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Slack allowed on the sub-Gaussian MGF bound.
pub const MGF_SLACK: f64 = 1.05;

/// Draws `psi = t + eta` with `t = sigma_x * s`, `s` Rademacher (sub-Gaussian
/// with parameter exactly `sigma_x`) and `eta ~ N(0, sigma_eta^2)`, and
/// checks `E[exp(lambda psi)] <= exp((sigma_x^2 + sigma_eta^2) lambda^2 / 2) * 1.05`
/// at each `lambda`.
pub fn subgaussian_mgf_check(
    sigma_x: f64,
    sigma_eta: f64,
    lambdas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<MomentCheck>> {
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least 2 draws".into()));
    }
    let psi = composed_draws(sigma_x, sigma_eta, draws, seed);
    let s2 = sigma_x * sigma_x + sigma_eta * sigma_eta;
    Ok(lambdas
        .iter()
        .map(|&lambda| {
            let (estimate, stderr) = mean_and_stderr(psi.iter().map(|&v| (lambda * v).exp()));
            let bound = (s2 * lambda * lambda / 2.0).exp() * MGF_SLACK;
            MomentCheck {
                lambda,
                estimate,
                stderr,
                bound,
                pass: estimate <= bound,
            }
        })
        .collect())
}

/// Checks `Var[psi] <= sigma_x^2 + sigma_eta^2 + 3 stderr` for the same
/// composition as [`subgaussian_mgf_check`].
pub fn variance_check(
    sigma_x: f64,
    sigma_eta: f64,
    draws: usize,
    seed: u64,
) -> Result<MomentCheck> {
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least 2 draws".into()));
    }
    let psi = composed_draws(sigma_x, sigma_eta, draws, seed);
    let (mean, _) = mean_and_stderr(psi.iter().copied());
    let (estimate, stderr) = mean_and_stderr(psi.iter().map(|&v| (v - mean) * (v - mean)));
    let bound = sigma_x * sigma_x + sigma_eta * sigma_eta;
    Ok(MomentCheck {
        lambda: 0.0,
        estimate,
        stderr,
        bound,
        pass: estimate <= bound + 3.0 * stderr,
    })
}

fn composed_draws(sigma_x: f64, sigma_eta: f64, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    (0..draws)
        .map(|_| {
            let s: f64 = signed_bernoulli(&mut rng, 0.5);
            let e: f64 = normal(&mut rng);
            sigma_x * s + sigma_eta * e
        })
        .collect()
}

fn mean_and_stderr(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exp_family::{empirical_loss, sample_data, Family};
    use proptest::prelude::*;

    #[test]
    fn zero_noise_is_exact() {
        let x = vec![1.0, -2.5, 3.25];
        let p = PerturbationSpec::gaussian(0.0, 9).unwrap();
        assert_eq!(perturb_gaussian(&x, &p).unwrap(), x);
        let m = Matrix::from_vec(1, 3, vec![1.0, -1.0, 1.0]).unwrap();
        let f = PerturbationSpec::sign_flip(1.0, 9).unwrap();
        assert_eq!(perturb_signflip(&m, &f).unwrap(), m);
    }

    #[test]
    fn gaussian_noise_moments() {
        let p = PerturbationSpec::gaussian(2.0, 1).unwrap();
        let n = 1_000_000;
        let out = perturb_gaussian(&vec![1.0f64; n], &p).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.006, "{mean}");
        let out = perturb_gaussian(&vec![0.0f64; n], &p).unwrap();
        let var = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
        // chi-square: sd of the estimate is 4 * sqrt(2 / n) ~ 0.0057
        assert!((var - 4.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn sign_flip_rate() {
        let p = PerturbationSpec::sign_flip(0.55, 3).unwrap();
        let m = Matrix::from_vec(1000, 1000, vec![1.0f64; 1_000_000]).unwrap();
        let out = perturb_signflip(&m, &p).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        let frac = out.as_slice().iter().filter(|&&v| v == 1.0).count() as f64 / 1e6;
        assert!((frac - 0.55).abs() < 0.0015, "{frac}");
    }

    #[test]
    fn sign_flip_rejects_bad_inputs() {
        assert!(PerturbationSpec::sign_flip(0.5, 0).is_err());
        assert!(PerturbationSpec::sign_flip(1.2, 0).is_err());
        let p = PerturbationSpec::sign_flip(0.9, 0).unwrap();
        let m = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            perturb_signflip(&m, &p),
            Err(Error::NonBinary { index: 1, .. })
        ));
        let g = PerturbationSpec::gaussian(1.0, 0).unwrap();
        assert!(matches!(
            perturb_signflip(&m, &g),
            Err(Error::WrongKind { .. })
        ));
        assert!(matches!(
            perturb_gaussian(&[1.0], &p),
            Err(Error::WrongKind { .. })
        ));
    }

    #[test]
    fn ising_statistic_examples() {
        let p = PerturbationSpec::ising_clamp(0.0, 0).unwrap();
        let one = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let s = perturb_ising_stats(&one, &p).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        let two = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let s = perturb_ising_stats(&two, &p).unwrap();
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(s[(0, 0)], 0.0);
        let bad = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            perturb_ising_stats(&bad, &p),
            Err(Error::NonBinary { .. })
        ));
    }

    #[test]
    fn unbiasedness_examples() {
        let g = PerturbationSpec::gaussian(1.5, 4).unwrap();
        let r = check_unbiased(&g, &UnbiasedInput::Vector(vec![0.7, -1.0]), 20_000).unwrap();
        assert!(r.pass, "{r:?}");

        let f = PerturbationSpec::sign_flip(0.55, 4).unwrap();
        let r = check_unbiased(&f, &UnbiasedInput::Vector(vec![1.0, -1.0]), 20_000).unwrap();
        assert!(!r.pass);
        // E[psi] - x = (2q - 2) x
        assert!((r.deviation[0] + 0.9).abs() < 0.05);

        let c = PerturbationSpec::ising_clamp(0.0, 4).unwrap();
        let x = Matrix::from_vec(1, 3, vec![1.0, -1.0, 1.0]).unwrap();
        let r = check_unbiased(&c, &UnbiasedInput::IsingSamples(x), 10_000).unwrap();
        assert!(r.pass);
        assert_eq!(r.deviation.len(), 6);

        assert!(check_unbiased(&g, &UnbiasedInput::Vector(vec![0.0]), 100).is_err());
    }

    #[test]
    fn identity_mechanism_leaves_the_loss_unchanged() {
        let spec = ProblemSpec::mle(Family::Bernoulli, vec![0.2, -0.4], 30).unwrap();
        let data = sample_data(&spec, &mut stream_rng(5, 0));
        let same = perturb_dataset(&spec, &data, &PerturbationSpec::identity()).unwrap();
        let th = Hypothesis::vector(vec![0.3, 0.1]).unwrap();
        assert_eq!(
            empirical_loss(&spec, &th, &data, false).unwrap(),
            empirical_loss(&spec, &th, &same, true).unwrap()
        );
    }

    #[test]
    fn flipped_maxmargin_law() {
        let spec =
            ProblemSpec::max_margin(Matrix::from_vec(1, 3, vec![1.0, 0.2, 0.5]).unwrap(), 1.0)
                .unwrap();
        let pert = PerturbationSpec::sign_flip(0.8, 0).unwrap();
        let ProblemSpec::MaxMargin { prob_plus, .. } = perturbed_problem(&spec, &pert).unwrap()
        else {
            unreachable!()
        };
        let want: [f64; 3] = [0.8, 0.8 * 0.2 + 0.2 * 0.8, 0.5];
        for (a, b) in prob_plus.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            perturbed_true_hypothesis(&spec, &pert).unwrap().values(),
            &[1.0, -1.0, 0.0]
        );
    }

    #[test]
    fn moment_compositions() {
        for se in [0.5, 2.0] {
            for c in subgaussian_mgf_check(1.0, se, &[-1.0, -0.5, 0.5, 1.0], 200_000, 2).unwrap() {
                assert!(c.pass, "{c:?}");
            }
            let v = variance_check(1.0, se, 200_000, 2).unwrap();
            assert!(v.pass, "{v:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mechanisms_are_deterministic(seed in any::<u64>(), sigma in 0.0f64..3.0, q in 0.51f64..1.0) {
            let x: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
            let g = PerturbationSpec::gaussian(sigma, seed).unwrap();
            prop_assert_eq!(perturb_gaussian(&x, &g).unwrap(), perturb_gaussian(&x, &g).unwrap());
            let m = Matrix::from_vec(3, 4, x).unwrap();
            let f = PerturbationSpec::sign_flip(q, seed).unwrap();
            prop_assert_eq!(perturb_signflip(&m, &f).unwrap(), perturb_signflip(&m, &f).unwrap());
            let c = PerturbationSpec::ising_clamp(sigma, seed).unwrap();
            let s = perturb_ising_stats(&m, &c).unwrap();
            prop_assert_eq!(&s, &perturb_ising_stats(&m, &c).unwrap());
            for a in 0..4 {
                prop_assert_eq!(s[(a, a)], 0.0);
                for b in 0..4 {
                    prop_assert!(s[(a, b)].abs() <= 1.0);
                }
            }
        }
    }
}
