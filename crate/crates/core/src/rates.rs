//! Concentration rates `eps_{n, delta}` for every problem class and
//! regularizer family, and the Monte Carlo harness that checks the
//! concentration bound and the perturbed loss-consistency inequality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{expected_loss, sample_data, Dataset, ProblemKind, ProblemSpec};
use crate::linalg::Matrix;
use crate::optimize::{minimize, penalty_parameter, SolveConfig};
use crate::perturb::{
    perturb_dataset, perturbed_problem, perturbed_true_hypothesis, PerturbationSpec,
};
use crate::regularize::{reg_value, scale, RegularizerKind, RegularizerSpec};
use crate::rng::{derive_seed, stream_rng};
use crate::scalar::{norm_inf, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Subgaussian,
    FiniteVariance,
}

/// Regularizer families with a published rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateColumn {
    /// l1, elastic net, total variation, sparse + low-rank.
    L1,
    KSupport {
        k: usize,
    },
    /// Tikhonov, multitask l1,inf, dirty multitask.
    TikhonovOrL1Inf,
    MultitaskL12,
    OverlapL12 {
        g: usize,
    },
    OverlapL1Inf {
        g: usize,
    },
    LowRank,
}

impl RateColumn {
    pub fn for_regularizer(kind: RegularizerKind) -> Self {
        match kind {
            RegularizerKind::L1 | RegularizerKind::ElasticNet => RateColumn::L1,
            RegularizerKind::Tikhonov => RateColumn::TikhonovOrL1Inf,
            RegularizerKind::GroupL12 => RateColumn::MultitaskL12,
            RegularizerKind::TraceNorm => RateColumn::LowRank,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RateColumn::L1 => "l1",
            RateColumn::KSupport { .. } => "k_support",
            RateColumn::TikhonovOrL1Inf => "tikhonov_or_l1inf",
            RateColumn::MultitaskL12 => "multitask_l12",
            RateColumn::OverlapL12 { .. } => "overlap_l12",
            RateColumn::OverlapL1Inf { .. } => "overlap_l1inf",
            RateColumn::LowRank => "low_rank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateQuery {
    pub problem_kind: ProblemKind,
    pub tail: Tail,
    pub sigma_x: f64,
    pub sigma_eta: f64,
    pub n: usize,
    pub p: usize,
    pub delta: f64,
    pub column: RateColumn,
    /// Design bound `B` (GLM, nonparametric).
    #[serde(default)]
    pub design_bound: Option<f64>,
    /// Number of basis functions `q_n` (nonparametric).
    #[serde(default)]
    pub basis_count: Option<usize>,
    /// Exponent `beta in (0, 1/2)` of the nonparametric order expressions.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Lipschitz constant `K` (max-margin).
    #[serde(default)]
    pub lipschitz_k: Option<f64>,
    /// Sign-flip keep probability `q` (max-margin).
    #[serde(default)]
    pub q: Option<f64>,
}

impl RateQuery {
    pub fn new(problem_kind: ProblemKind, tail: Tail, n: usize, p: usize, delta: f64) -> Self {
        Self {
            problem_kind,
            tail,
            sigma_x: 1.0,
            sigma_eta: 0.0,
            n,
            p,
            delta,
            column: RateColumn::L1,
            design_bound: None,
            basis_count: None,
            beta: None,
            lipschitz_k: None,
            q: None,
        }
    }

    /// `sigma = sqrt(sigma_x^2 + sigma_eta^2)`.
    pub fn sigma(&self) -> f64 {
        self.sigma_x.hypot(self.sigma_eta)
    }

    /// Fills the class parameters from a problem, mechanism and regularizer.
    pub fn for_problem<T: Scalar>(
        spec: &ProblemSpec<T>,
        pert: &PerturbationSpec,
        reg: &RegularizerSpec,
        tail: Tail,
        sigma_x: f64,
        delta: f64,
    ) -> Self {
        let mut q = Self::new(spec.kind(), tail, spec.n(), spec.dim(), delta);
        q.sigma_x = sigma_x;
        q.sigma_eta = pert.noise_sd();
        q.column = RateColumn::for_regularizer(reg.kind);
        q.design_bound = spec.design_bound().map(|b| b.to_f64_lossy());
        match spec {
            ProblemSpec::Nonparam {
                points,
                basis_count,
                ..
            } => {
                q.p = points.cols();
                q.basis_count = Some(*basis_count);
            }
            ProblemSpec::MaxMargin { lipschitz_k, .. } => {
                q.lipschitz_k = Some(lipschitz_k.to_f64_lossy());
                q.q = Some(if pert.is_unbiased() { 1.0 } else { pert.q });
            }
            _ => {}
        }
        q
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n == 0 || self.p == 0 {
            return bad("n and p must be >= 1".into());
        }
        if self.problem_kind != ProblemKind::MaxmarginMf && !(self.delta > 0.0 && self.delta < 1.0)
        {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_eta >= 0.0) || !self.sigma().is_finite() {
            return bad("noise parameters must be finite and >= 0".into());
        }
        if let Some(b) = self.design_bound {
            if !(b > 0.0) {
                return bad("design bound B must be positive".into());
            }
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0 && beta < 0.5) {
                return bad(format!("beta must lie in (0, 1/2), got {beta}"));
            }
        }
        Ok(())
    }

    fn need<V: Copy>(&self, v: Option<V>, what: &str) -> Result<V> {
        v.ok_or_else(|| {
            Error::InvalidParameter(format!("{} rate needs {what}", self.problem_kind.name()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    /// The value is an order expression with unit constant rather than a
    /// derived bound.
    pub order_only: bool,
}

/// Rate `eps_{n, delta}` for the query.
///
/// The l1 column of MLE, GLM and nonparametric regression carries exact
/// union-bound constants; max-margin l1 is exactly `2K / n`. Every other
/// entry is `sigma * tail * expression` with the tail factor
/// `sqrt(log(1/delta))` or `sqrt(1/delta)`, flagged `order_only`.
pub fn rate(query: &RateQuery) -> Result<Rate> {
    query.validate()?;
    let q = query;
    let (n, p) = (q.n as f64, q.p as f64);
    let sigma = q.sigma();
    let ln_p = p.ln();
    let na = || {
        Err(Error::InvalidCombination(format!(
            "{} / {} / {:?}",
            q.problem_kind.name(),
            q.column.name(),
            q.tail
        )))
    };
    let ng = || {
        Err(Error::NoGuarantee(format!(
            "{} / {} / {:?}",
            q.problem_kind.name(),
            q.column.name(),
            q.tail
        )))
    };
    let exact = |value: f64| {
        Ok(Rate {
            value,
            order_only: false,
        })
    };
    let tail = match q.tail {
        Tail::Subgaussian => (1.0 / q.delta).ln().sqrt(),
        Tail::FiniteVariance => (1.0 / q.delta).sqrt(),
    };
    let order = |expr: f64| {
        Ok(Rate {
            value: sigma * tail * expr,
            order_only: true,
        })
    };

    use RateColumn as C;
    use Tail::*;
    match q.problem_kind {
        ProblemKind::MleExpfam | ProblemKind::GlmFixed => {
            let b = if q.problem_kind == ProblemKind::GlmFixed {
                q.need(q.design_bound, "the design bound B")?
            } else {
                1.0
            };
            match (q.tail, q.column) {
                (Subgaussian, C::L1) => {
                    exact(sigma * b * (2.0 / n * (ln_p + (2.0 / q.delta).ln())).sqrt())
                }
                (FiniteVariance, C::L1) => exact(sigma * b * (p / (n * q.delta)).sqrt()),
                (_, C::LowRank) if q.problem_kind == ProblemKind::GlmFixed => na(),
                (Subgaussian, C::KSupport { k }) => order((k as f64 * ln_p / n).sqrt()),
                (Subgaussian, C::TikhonovOrL1Inf) | (Subgaussian, C::LowRank) => {
                    order((p * ln_p / n).sqrt())
                }
                (Subgaussian, C::MultitaskL12) => order(p.powf(0.25) * ln_p.sqrt() / n.sqrt()),
                (Subgaussian, C::OverlapL12 { g }) => order((g as f64 * ln_p / n).sqrt()),
                (Subgaussian, C::OverlapL1Inf { g }) => order(g as f64 * ln_p.sqrt() / n.sqrt()),
                (FiniteVariance, C::KSupport { k }) => order((k as f64 * p / n).sqrt()),
                (FiniteVariance, C::TikhonovOrL1Inf) | (FiniteVariance, C::LowRank) => {
                    order(p / n.sqrt())
                }
                (FiniteVariance, C::MultitaskL12) => order(p.powf(0.75) / n.sqrt()),
                (FiniteVariance, C::OverlapL12 { g }) => order((g as f64 * p / n).sqrt()),
                (FiniteVariance, C::OverlapL1Inf { g }) => order(g as f64 * p.sqrt() / n.sqrt()),
            }
        }
        ProblemKind::ExpfamPca => {
            // n = n1 * n2 entries
            let ln_n = n.ln();
            match (q.tail, q.column) {
                (Subgaussian, C::L1) => order((1.0 / n).sqrt()),
                (FiniteVariance, C::L1) => order((1.0 / n).sqrt()),
                (Subgaussian, C::TikhonovOrL1Inf) | (Subgaussian, C::LowRank) => {
                    order((ln_n / n).sqrt())
                }
                (Subgaussian, C::MultitaskL12) => order(ln_n.sqrt() / n.powf(0.75)),
                (FiniteVariance, C::MultitaskL12) => order(1.0 / n.powf(0.25)),
                (FiniteVariance, C::TikhonovOrL1Inf) | (FiniteVariance, C::LowRank) => ng(),
                _ => na(),
            }
        }
        ProblemKind::NonparamRegression => {
            let b = q.need(q.design_bound, "the design bound B")?;
            let order_np = |expr: f64| -> Result<Rate> {
                let beta = q.need(q.beta, "beta")?;
                order(expr / n.powf(0.5 - beta))
            };
            match (q.tail, q.column) {
                (Subgaussian, C::L1) => {
                    let qn = q.need(q.basis_count, "basis_count")? as f64;
                    exact(sigma * b * (2.0 / n * (ln_p + qn.ln() + (2.0 / q.delta).ln())).sqrt())
                }
                (FiniteVariance, C::L1) => {
                    let qn = q.need(q.basis_count, "basis_count")? as f64;
                    exact(sigma * b * (qn * p / (n * q.delta)).sqrt())
                }
                (_, C::LowRank) => na(),
                (Subgaussian, C::KSupport { k }) => order_np((k as f64 * ln_p).sqrt()),
                (Subgaussian, C::TikhonovOrL1Inf) => order_np(p * ln_p.sqrt()),
                (Subgaussian, C::MultitaskL12) => order_np((p * ln_p).sqrt()),
                (Subgaussian, C::OverlapL12 { g }) => order_np((g as f64 * ln_p).sqrt()),
                (Subgaussian, C::OverlapL1Inf { g }) => order_np(g as f64 * ln_p.sqrt()),
                (FiniteVariance, C::KSupport { k }) => order_np((k as f64 * p).sqrt()),
                (FiniteVariance, C::TikhonovOrL1Inf) => order_np(p.powf(1.5)),
                (FiniteVariance, C::MultitaskL12) => order_np(p),
                (FiniteVariance, C::OverlapL12 { .. })
                | (FiniteVariance, C::OverlapL1Inf { .. }) => na(),
            }
        }
        ProblemKind::MaxmarginMf => {
            let k = q.need(q.lipschitz_k, "the Lipschitz constant K")?;
            let plain = |value: f64| {
                Ok(Rate {
                    value,
                    order_only: true,
                })
            };
            match q.column {
                C::L1 => exact(2.0 * k / n),
                C::TikhonovOrL1Inf | C::LowRank => plain(1.0 / n.sqrt()),
                C::MultitaskL12 => plain(1.0 / n.powf(0.75)),
                _ => na(),
            }
        }
    }
}

/// `eps'_n`: zero for unbiased mechanisms, `2K(1 - q)/n` for sign flipping
/// in max-margin factorization.
pub fn perturbed_rate_prime(query: &RateQuery) -> f64 {
    match query.problem_kind {
        ProblemKind::MaxmarginMf => {
            let k = query.lipschitz_k.unwrap_or(0.0);
            let q = query.q.unwrap_or(1.0);
            2.0 * k * (1.0 - q) / query.n as f64
        }
        _ => 0.0,
    }
}

/// `|T_hat_eta - T_eta|_inf` in the class-specific form: the mean statistic
/// for MLE, `(1/n) sum_i (psi_i - mu_i) x_i` for the linear classes and
/// `(psi - mu) / n` entrywise for the matrix classes, where `mu` is the
/// expectation of the perturbed observation.
pub fn dual_norm_deviation<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
    data: &Dataset<T>,
) -> Result<T> {
    if pert.kind == crate::perturb::MechanismKind::IsingClamp {
        return Err(Error::InvalidCombination(
            "dual-norm deviation of the clamped Ising statistic".into(),
        ));
    }
    let target = perturbed_problem(spec, pert)?.expected_statistic();
    let (rows, cols) = spec.data_shape();
    let shape_ok = |m: &Matrix<T>| -> Result<()> {
        if (m.rows(), m.cols()) != (rows, cols) {
            return Err(crate::error::shape_err(
                format!("{rows}x{cols}"),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        Ok(())
    };
    let dev: Vec<T> = match (spec, data) {
        (ProblemSpec::Mle { .. }, Dataset::SummedStatistic { sum, count }) => {
            if sum.len() != target.len() {
                return Err(crate::error::shape_err(target.len(), sum.len()));
            }
            let c = T::of_usize(*count);
            sum.iter().zip(&target).map(|(&s, &t)| s / c - t).collect()
        }
        (ProblemSpec::Mle { .. }, Dataset::Observations(m)) => {
            if m.cols() != target.len() {
                return Err(crate::error::shape_err(target.len(), m.cols()));
            }
            let n = T::of_usize(m.rows());
            (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| m[(i, j)]).sum::<T>() / n - target[j])
                .collect()
        }
        (_, Dataset::Observations(m)) => {
            shape_ok(m)?;
            let n = T::of_usize(m.as_slice().len());
            let resid: Vec<T> = m
                .as_slice()
                .iter()
                .zip(&target)
                .map(|(&y, &mu)| (y - mu) / n)
                .collect();
            match spec.design() {
                Some(x) => x.tmatvec(&resid),
                None => resid,
            }
        }
        (_, Dataset::SummedStatistic { .. }) => {
            return Err(crate::error::shape_err("observations", "summed statistic"));
        }
    };
    Ok(norm_inf(&dev))
}

/// Settings shared by the Monte Carlo experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub trials: usize,
    pub n_grid: Vec<usize>,
    pub delta: f64,
    pub tail: Tail,
    /// Sub-Gaussian parameter (or standard deviation) of the clean statistic.
    pub sigma_x: f64,
    pub seed: u64,
}

impl ExperimentSetup {
    fn validate(&self, min_trials: usize) -> Result<()> {
        if self.trials < min_trials {
            return Err(Error::InvalidParameter(format!(
                "need at least {min_trials} trials per grid point, got {}",
                self.trials
            )));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::InvalidParameter(
                "n_grid must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }

    fn trial_seed(&self, grid_index: usize, trial: usize) -> u64 {
        derive_seed(self.seed, ((grid_index as u64) << 32) | trial as u64)
    }

    fn jobs(&self) -> Vec<(usize, usize)> {
        (0..self.n_grid.len())
            .flat_map(|g| (0..self.trials).map(move |t| (g, t)))
            .collect()
    }
}

/// One draw of data at size `n`: the raw sample and its perturbation.
fn draw<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let data = sample_data(spec, &mut stream_rng(seed, 0));
    let noisy = perturb_dataset(spec, &data, &pert.with_seed(derive_seed(seed, 1)))?;
    Ok((data, noisy))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub rate: f64,
    pub order_only: bool,
    pub quantile: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// `(n, trial, deviation)` for every trial.
    pub deviations: Vec<(usize, usize, f64)>,
    pub pass: bool,
}

/// Empirical `q`-quantile: the `ceil(q N)`-th smallest value.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Checks `P[|T_hat_eta - T_eta|_* <= eps_{n, delta}] >= 1 - delta` by
/// comparing the empirical `1 - delta` quantile of the deviation with the rate.
pub fn concentration_experiment<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
    reg: &RegularizerSpec,
    setup: &ExperimentSetup,
) -> Result<ConcentrationReport> {
    setup.validate(1)?;
    pert.validate()?;
    let specs: Vec<ProblemSpec<T>> = setup
        .n_grid
        .iter()
        .map(|&n| spec.with_sample_count(n))
        .collect::<Result<_>>()?;
    let deviations: Vec<(usize, usize, f64)> = setup
        .jobs()
        .into_par_iter()
        .map(|(g, t)| {
            let (_, noisy) = draw(&specs[g], pert, setup.trial_seed(g, t))?;
            let d = dual_norm_deviation(&specs[g], pert, &noisy)?;
            Ok((setup.n_grid[g], t, d.to_f64_lossy()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (g, s) in specs.iter().enumerate() {
        let q = RateQuery::for_problem(s, pert, reg, setup.tail, setup.sigma_x, setup.delta);
        let r = rate(&q)?;
        let devs: Vec<f64> = deviations
            .iter()
            .filter(|d| d.0 == setup.n_grid[g])
            .map(|d| d.2)
            .collect();
        let quantile = empirical_quantile(&devs, 1.0 - setup.delta);
        rows.push(ConcentrationRow {
            n: setup.n_grid[g],
            rate: r.value,
            order_only: r.order_only,
            quantile,
            pass: quantile <= r.value,
        });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(ConcentrationReport {
        rows,
        deviations,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub n: usize,
    pub trial: usize,
    /// `L(theta_hat_eta) - L(theta*)`.
    pub gap: f64,
    pub rhs: f64,
    pub dual_dev: f64,
    pub lambda: f64,
    pub solver_converged: bool,
    pub solver_gap: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn covered(&self) -> bool {
        self.error.is_none() && self.gap <= self.rhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub n: usize,
    pub eps: f64,
    pub eps_prime: f64,
    pub order_only: bool,
    pub lambda: f64,
    pub coverage: f64,
    pub median_gap: f64,
    pub median_rhs: f64,
    pub failed_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub records: Vec<TrialRecord>,
    pub per_n: Vec<GridSummary>,
    pub coverage: f64,
    /// OLS slope of `log median gap` against `log n` (needs two grid points
    /// with positive median gaps).
    pub fitted_exponent: Option<f64>,
}

/// Minimum trials per grid point for [`consistency_experiment`].
pub const MIN_CONSISTENCY_TRIALS: usize = 100;

/// For each `n` in the grid: draw data, perturb it, minimize the perturbed
/// objective with `lambda_n = alpha * eps_{n, delta}`, and compare the excess
/// expected loss with
/// `eps (alpha R(theta*_eta) + c(theta*_eta)) + eps' c(theta*) + xi`.
pub fn consistency_experiment<T: Scalar>(
    spec: &ProblemSpec<T>,
    pert: &PerturbationSpec,
    reg: &RegularizerSpec,
    cfg: &SolveConfig,
    setup: &ExperimentSetup,
) -> Result<ConsistencyReport> {
    setup.validate(MIN_CONSISTENCY_TRIALS)?;
    cfg.validate()?;
    pert.validate()?;
    reg.validate(spec.dim())?;
    struct Point<T> {
        spec: ProblemSpec<T>,
        summary: GridSummary,
        rhs: f64,
        l_star: T,
    }
    let alpha = T::of(cfg.alpha);
    let points: Vec<Point<T>> = setup
        .n_grid
        .iter()
        .map(|&n| {
            let s = spec.with_sample_count(n)?;
            let q = RateQuery::for_problem(&s, pert, reg, setup.tail, setup.sigma_x, setup.delta);
            let r = rate(&q)?;
            let eps_prime = perturbed_rate_prime(&q);
            let lambda = penalty_parameter(alpha, T::of(r.value))?;
            let star = s.true_hypothesis();
            let star_eta = perturbed_true_hypothesis(&s, pert)?;
            let rhs = r.value
                * (cfg.alpha * reg_value(reg, &star_eta)?.to_f64_lossy()
                    + scale(reg, &star_eta)?.to_f64_lossy())
                + eps_prime * scale(reg, &star)?.to_f64_lossy()
                + cfg.xi;
            let l_star = expected_loss(&s, &star)?;
            Ok(Point {
                spec: s,
                summary: GridSummary {
                    n,
                    eps: r.value,
                    eps_prime,
                    order_only: r.order_only,
                    lambda: lambda.to_f64_lossy(),
                    coverage: 0.0,
                    median_gap: f64::NAN,
                    median_rhs: rhs,
                    failed_trials: 0,
                },
                rhs,
                l_star,
            })
        })
        .collect::<Result<_>>()?;

    let records: Vec<TrialRecord> = setup
        .jobs()
        .into_par_iter()
        .map(|(g, t)| {
            let pt = &points[g];
            let mut rec = TrialRecord {
                n: pt.summary.n,
                trial: t,
                gap: f64::NAN,
                rhs: pt.rhs,
                dual_dev: f64::NAN,
                lambda: pt.summary.lambda,
                solver_converged: false,
                solver_gap: f64::INFINITY,
                error: None,
            };
            let outcome = (|| -> Result<()> {
                let (_, noisy) = draw(&pt.spec, pert, setup.trial_seed(g, t))?;
                if let Ok(d) = dual_norm_deviation(&pt.spec, pert, &noisy) {
                    rec.dual_dev = d.to_f64_lossy();
                }
                let (theta, cert) =
                    minimize(&pt.spec, &noisy, true, reg, T::of(pt.summary.lambda), cfg)?;
                rec.solver_converged = cert.converged;
                rec.solver_gap = cert.gap.to_f64_lossy();
                rec.gap = (expected_loss(&pt.spec, &theta)? - pt.l_star).to_f64_lossy();
                Ok(())
            })();
            if let Err(e) = outcome {
                rec.error = Some(e.to_string());
            }
            rec
        })
        .collect();

    let mut per_n = Vec::new();
    for pt in points {
        let mut s = pt.summary;
        let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.n == s.n).collect();
        s.failed_trials = rows.iter().filter(|r| r.error.is_some()).count();
        s.coverage = rows.iter().filter(|r| r.covered()).count() as f64 / rows.len() as f64;
        let gaps: Vec<f64> = rows
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| r.gap)
            .collect();
        if !gaps.is_empty() {
            s.median_gap = median(&gaps);
        }
        per_n.push(s);
    }
    let coverage = records.iter().filter(|r| r.covered()).count() as f64 / records.len() as f64;
    let pts: Vec<(f64, f64)> = per_n
        .iter()
        .filter(|s| s.median_gap > 0.0)
        .map(|s| ((s.n as f64).ln(), s.median_gap.ln()))
        .collect();
    Ok(ConsistencyReport {
        records,
        per_n,
        coverage,
        fitted_exponent: ols_slope(&pts),
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
