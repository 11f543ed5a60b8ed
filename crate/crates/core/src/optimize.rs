//! Approximate minimization of `L_hat(theta) + lambda R(theta)`.
//!
//! Smooth losses use proximal gradient descent with backtracking. The
//! suboptimality certificate comes from the prox-gradient mapping `g`, an
//! element of the subdifferential of the objective at the new iterate,
//! together with a strong-convexity modulus `mu` validated on a ball around
//! the iterate: `F(x) - F* <= |g|^2 / (2 mu)`.
//!
//! The hinge loss uses a proximal subgradient method with steps
//! `t0 / sqrt(k + 1)`; its certificate is the standard telescoping bound with
//! the distance to the minimizer bounded by `F(x) / lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{Dataset, EmpiricalLoss, Hypothesis, ProblemSpec};
use crate::regularize::{prox, reg_value, RegularizerKind, RegularizerSpec};
use crate::scalar::{norm2, norm_inf, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Backtracking,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::xi")]
    pub xi: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::step_rule")]
    pub step_rule: StepRule,
    #[serde(default = "defaults::tol_grad")]
    pub tol_grad: f64,
}

mod defaults {
    use super::StepRule;

    pub fn alpha() -> f64 {
        2.0
    }
    pub fn xi() -> f64 {
        1e-4
    }
    pub fn max_iters() -> usize {
        10_000
    }
    pub fn step_rule() -> StepRule {
        StepRule::Backtracking
    }
    pub fn tol_grad() -> f64 {
        1e-8
    }
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            xi: defaults::xi(),
            max_iters: defaults::max_iters(),
            step_rule: defaults::step_rule(),
            tol_grad: defaults::tol_grad(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 2.0) {
            return Err(Error::AlphaBelowTwo(self.alpha));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol_grad >= 0.0) {
            return Err(Error::InvalidParameter("tol_grad must be >= 0".into()));
        }
        if let StepRule::Fixed(s) = self.step_rule {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(
                    "fixed step must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveCertificate<T> {
    pub objective_value: T,
    /// Upper bound on `objective_value - min F` (infinite when no bound is
    /// available).
    pub gap: T,
    pub iterations: usize,
    pub converged: bool,
}

/// `lambda_n = alpha * eps_{n, delta}`.
pub fn penalty_parameter<T: Scalar>(alpha: T, eps_n_delta: T) -> Result<T> {
    if !(alpha >= T::two()) {
        return Err(Error::AlphaBelowTwo(alpha.to_f64_lossy()));
    }
    if !(eps_n_delta > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "eps_n_delta must be positive, got {eps_n_delta}"
        )));
    }
    Ok(alpha * eps_n_delta)
}

/// Minimizes the (perturbed) regularized empirical loss starting from zero.
pub fn minimize<T: Scalar>(
    spec: &ProblemSpec<T>,
    data: &Dataset<T>,
    perturbed: bool,
    reg: &RegularizerSpec,
    lambda_n: T,
    cfg: &SolveConfig,
) -> Result<(Hypothesis<T>, SolveCertificate<T>)> {
    let loss = EmpiricalLoss::new(spec, data, perturbed)?;
    let x0 = Hypothesis::zeros(spec.shape());
    minimize_from(&loss, reg, lambda_n, cfg, &x0)
}

/// Minimizes a prepared loss from `x0`.
pub fn minimize_from<T: Scalar>(
    loss: &EmpiricalLoss<T>,
    reg: &RegularizerSpec,
    lambda_n: T,
    cfg: &SolveConfig,
    x0: &Hypothesis<T>,
) -> Result<(Hypothesis<T>, SolveCertificate<T>)> {
    let (x, cert, _) = minimize_traced(loss, reg, lambda_n, cfg, x0)?;
    Ok((x, cert))
}

/// As [`minimize_from`], also returning the objective after every accepted
/// iteration (starting with the objective at `x0`).
pub fn minimize_traced<T: Scalar>(
    loss: &EmpiricalLoss<T>,
    reg: &RegularizerSpec,
    lambda_n: T,
    cfg: &SolveConfig,
    x0: &Hypothesis<T>,
) -> Result<(Hypothesis<T>, SolveCertificate<T>, Vec<T>)> {
    cfg.validate()?;
    if !(lambda_n >= T::zero()) || !lambda_n.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda_n must be >= 0, got {lambda_n}"
        )));
    }
    if x0.shape() != loss.shape() {
        return Err(crate::error::shape_err(loss.shape(), x0.shape()));
    }
    reg.validate(x0.values().len())?;
    let problem = Composite {
        loss,
        reg,
        lambda: lambda_n,
        template: x0.clone().with_norm(reg.kind.norm_tag()),
    };
    if loss.is_smooth() {
        problem.prox_gradient(cfg)
    } else {
        problem.prox_subgradient(cfg)
    }
}

struct Composite<'a, T> {
    loss: &'a EmpiricalLoss<T>,
    reg: &'a RegularizerSpec,
    lambda: T,
    template: Hypothesis<T>,
}

impl<T: Scalar> Composite<'_, T> {
    fn hyp(&self, v: Vec<T>) -> Hypothesis<T> {
        self.template.with_values(v)
    }

    fn penalty(&self, x: &[T]) -> Result<T> {
        if self.lambda == T::zero() {
            return Ok(T::zero());
        }
        Ok(self.lambda * reg_value(self.reg, &self.hyp(x.to_vec()))?)
    }

    fn objective(&self, x: &[T]) -> Result<T> {
        let v = self.loss.value(x)? + self.penalty(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective"))
        }
    }

    fn prox(&self, v: Vec<T>, t: T) -> Result<Vec<T>> {
        if self.lambda == T::zero() {
            return Ok(v);
        }
        Ok(prox(self.reg, &self.hyp(v), self.lambda * t)?.into_values())
    }

    /// Strong-convexity modulus of the regularization term.
    fn reg_modulus(&self) -> T {
        match self.reg.kind {
            RegularizerKind::Tikhonov | RegularizerKind::ElasticNet => T::two() * self.lambda,
            _ => T::zero(),
        }
    }

    /// Suboptimality bound at `x` from a subgradient `g` of `F` at `x`.
    fn certify(&self, x: &[T], g: &[T]) -> T {
        let gn = norm2(g);
        if gn == T::zero() {
            return T::zero();
        }
        let mu0 = self.loss.strong_convexity(x, T::zero()) + self.reg_modulus();
        if !(mu0 > T::zero()) {
            return T::infinity();
        }
        // Minimizer lies in the ball B(x, r) once F exceeds F(x) on its
        // boundary, which holds when r >= 2 |g| / mu(r).
        let r = T::of(4.0) * gn / mu0;
        let mu = self.loss.strong_convexity(x, r) + self.reg_modulus();
        if mu > T::zero() && T::two() * gn / mu <= r {
            gn * gn / (T::two() * mu)
        } else {
            T::infinity()
        }
    }

    fn prox_gradient(
        &self,
        cfg: &SolveConfig,
    ) -> Result<(Hypothesis<T>, SolveCertificate<T>, Vec<T>)> {
        let xi = T::of(cfg.xi);
        let tol = T::of(cfg.tol_grad);
        let armijo = T::of(1e-4);
        let min_step = T::of(1e-30);
        let mut x = self.template.values().to_vec();
        let mut fx = self.objective(&x)?;
        let mut grad = self.loss.gradient(&x)?;
        let mut trace = vec![fx];
        let mut step = match cfg.step_rule {
            StepRule::Backtracking => T::one(),
            StepRule::Fixed(s) => T::of(s),
        };
        let mut gap = T::infinity();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iters {
            iterations += 1;
            let (x_new, f_new) = loop {
                let v: Vec<T> = x.iter().zip(&grad).map(|(&a, &g)| a - step * g).collect();
                let cand = self.prox(v, step)?;
                let accept = match cfg.step_rule {
                    StepRule::Fixed(_) => Some(self.objective(&cand)?),
                    StepRule::Backtracking => match self.objective(&cand) {
                        Ok(f) => {
                            let d2: T = cand.iter().zip(&x).map(|(&a, &b)| (a - b) * (a - b)).sum();
                            let roundoff = T::of(4.0) * T::epsilon() * (T::one() + fx.abs());
                            (d2 == T::zero() || f <= fx - armijo / step * d2 + roundoff)
                                .then_some(f)
                        }
                        Err(Error::NonFinite(_)) => None,
                        Err(e) => return Err(e),
                    },
                };
                if let Some(f) = accept {
                    break (cand, f);
                }
                step = step * T::half();
                if step < min_step {
                    return Err(Error::NonFinite("line search"));
                }
            };
            let grad_new = self.loss.gradient(&x_new)?;
            let g: Vec<T> = x
                .iter()
                .zip(&x_new)
                .zip(grad.iter().zip(&grad_new))
                .map(|((&a, &b), (&ga, &gb))| (a - b) / step - ga + gb)
                .collect();
            let stalled = x_new == x;
            x = x_new;
            fx = f_new;
            grad = grad_new;
            trace.push(fx);
            gap = self.certify(&x, &g);
            if gap <= xi && norm_inf(&g) <= tol {
                converged = true;
                break;
            }
            if stalled && matches!(cfg.step_rule, StepRule::Fixed(_)) {
                break;
            }
            if let StepRule::Backtracking = cfg.step_rule {
                step = (step + step).min(T::one());
            }
        }
        Ok((
            self.hyp(x),
            SolveCertificate {
                objective_value: fx,
                gap,
                iterations,
                converged,
            },
            trace,
        ))
    }

    fn prox_subgradient(
        &self,
        cfg: &SolveConfig,
    ) -> Result<(Hypothesis<T>, SolveCertificate<T>, Vec<T>)> {
        let xi = T::of(cfg.xi);
        let lip = self.loss.lipschitz_l2().unwrap_or(T::zero());
        let mut x = self.template.values().to_vec();
        let f0 = self.objective(&x)?;
        let start_dist = norm2(&x);
        let t0 = match cfg.step_rule {
            StepRule::Fixed(s) => T::of(s),
            StepRule::Backtracking if self.lambda > T::zero() && lip > T::zero() => {
                (f0 / self.lambda + start_dist) / lip
            }
            StepRule::Backtracking => T::one(),
        };
        let mut best = (x.clone(), f0);
        let mut avg = vec![T::zero(); x.len()];
        let (mut sum_t, mut slack) = (T::zero(), T::zero());
        let mut trace = vec![f0];
        let mut gap = T::infinity();
        let mut iterations = 0;
        while iterations < cfg.max_iters {
            let t = t0 / T::of_usize(iterations + 1).sqrt();
            iterations += 1;
            let g = self.loss.gradient(&x)?;
            let v: Vec<T> = x.iter().zip(&g).map(|(&a, &b)| a - t * b).collect();
            let x_new = self.prox(v, t)?;
            let step_len = norm2(
                &x.iter()
                    .zip(&x_new)
                    .map(|(&a, &b)| a - b)
                    .collect::<Vec<_>>(),
            );
            let gn = norm2(&g);
            slack = slack + t * t * gn * gn * T::half() + t * lip * step_len;
            sum_t = sum_t + t;
            for (a, &b) in avg.iter_mut().zip(&x_new) {
                *a = *a + t * b;
            }
            x = x_new;
            let fx = self.objective(&x)?;
            trace.push(fx);
            if fx < best.1 {
                best = (x.clone(), fx);
            }
            if self.lambda > T::zero() {
                // |x* - x0| <= |x*| + |x0| <= F* / lambda + |x0|
                let d = best.1 / self.lambda + start_dist;
                gap = (d * d * T::half() + slack) / sum_t;
            }
            if gap <= xi {
                break;
            }
        }
        let mean: Vec<T> = avg.iter().map(|&a| a / sum_t).collect();
        let f_mean = self.objective(&mean)?;
        if f_mean < best.1 {
            best = (mean, f_mean);
        }
        Ok((
            self.hyp(best.0),
            SolveCertificate {
                objective_value: best.1,
                gap,
                iterations,
                converged: gap <= xi,
            },
            trace,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exp_family::{Family, Shape};
    use crate::linalg::Matrix;
    use crate::rng::{normal, stream_rng};
    use proptest::prelude::*;

    fn mle_summed(t_hat: Vec<f64>) -> (ProblemSpec<f64>, Dataset<f64>) {
        let p = t_hat.len();
        let spec = ProblemSpec::mle(Family::Bernoulli, vec![0.0; p], 1).unwrap();
        (
            spec,
            Dataset::SummedStatistic {
                sum: t_hat,
                count: 1,
            },
        )
    }

    fn atanh_bisection(y: f64) -> f64 {
        let (mut lo, mut hi) = (-20.0f64, 20.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.tanh() < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn penalty_parameter_examples() {
        assert!((penalty_parameter(2.0f64, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert!((penalty_parameter(2.0f64, 0.3462).unwrap() - 0.6924).abs() < 1e-15);
        assert_eq!(penalty_parameter(1.5, 0.1), Err(Error::AlphaBelowTwo(1.5)));
    }

    #[test]
    fn symmetric_statistic_gives_zero() {
        let (spec, data) = mle_summed(vec![0.0]);
        for lambda in [0.0, 0.1, 3.0] {
            let (th, cert) = minimize(
                &spec,
                &data,
                true,
                &RegularizerSpec::l1(),
                lambda,
                &SolveConfig::default(),
            )
            .unwrap();
            assert_eq!(th.values(), &[0.0]);
            assert!(cert.converged);
        }
    }

    #[test]
    fn unregularized_mle_matches_bisection() {
        let (spec, data) = mle_summed(vec![0.5]);
        let (th, cert) = minimize(
            &spec,
            &data,
            true,
            &RegularizerSpec::l1(),
            0.0,
            &SolveConfig::default(),
        )
        .unwrap();
        let oracle = atanh_bisection(0.5);
        assert!((oracle - 0.5493).abs() < 1e-4);
        assert!(
            (th.values()[0] - oracle).abs() < 1e-6,
            "{:?} {cert:?}",
            th.values()
        );
        assert!(cert.converged && cert.gap <= 1e-4);
    }

    #[test]
    fn full_shrinkage_above_the_kkt_threshold() {
        let (spec, data) = mle_summed(vec![0.3, -0.7, 0.1]);
        let (th, cert) = minimize(
            &spec,
            &data,
            true,
            &RegularizerSpec::l1(),
            0.7,
            &SolveConfig::default(),
        )
        .unwrap();
        assert_eq!(th.values(), &[0.0, 0.0, 0.0]);
        assert!(cert.converged);
    }

    #[test]
    fn unbounded_problem_is_not_certified() {
        // |T_hat| > 1 + lambda has no minimizer
        let (spec, data) = mle_summed(vec![2.0]);
        let cfg = SolveConfig {
            max_iters: 200,
            ..SolveConfig::default()
        };
        match minimize(&spec, &data, true, &RegularizerSpec::l1(), 0.5, &cfg) {
            Ok((_, cert)) => assert!(!cert.converged),
            Err(e) => assert!(matches!(e, Error::NonFinite(_))),
        }
    }

    #[test]
    fn hinge_solver_reports_a_sound_bound() {
        let spec =
            ProblemSpec::max_margin(Matrix::from_vec(3, 3, vec![0.9; 9]).unwrap(), 1.0).unwrap();
        let data = crate::exp_family::sample_data(&spec, &mut stream_rng(3, 0));
        let cfg = SolveConfig {
            max_iters: 5000,
            ..SolveConfig::default()
        };
        let lambda = 0.05;
        let (th, cert) =
            minimize(&spec, &data, false, &RegularizerSpec::l1(), lambda, &cfg).unwrap();
        assert_eq!(th.shape(), Shape::Matrix(3, 3));
        // separable oracle: per entry min over the kinks {0, x_ij}
        let x = data.observations().unwrap();
        let oracle: f64 = x
            .as_slice()
            .iter()
            .map(|&xi| {
                let f = |t: f64| (1.0 - xi * t).max(0.0) / 9.0 + lambda * t.abs();
                f(0.0).min(f(xi))
            })
            .sum();
        assert!(cert.objective_value >= oracle - 1e-12);
        assert!(cert.objective_value - oracle <= cert.gap);
        assert!(cert.objective_value - oracle < 1e-2);
    }

    #[test]
    fn ridge_glm_is_certified() {
        let design = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let spec = ProblemSpec::glm(Family::Gaussian, design, vec![0.2, 0.4, -0.1]).unwrap();
        let data = crate::exp_family::sample_data(&spec, &mut stream_rng(8, 0));
        // rank-deficient design: only the Tikhonov term gives curvature
        let (_, cert) = minimize(
            &spec,
            &data,
            false,
            &RegularizerSpec::tikhonov(),
            0.1,
            &SolveConfig::default(),
        )
        .unwrap();
        assert!(cert.converged, "{cert:?}");
        // without it, only an exact fixed point certifies
        let cfg = SolveConfig {
            max_iters: 3,
            ..SolveConfig::default()
        };
        let (_, cert) =
            minimize(&spec, &data, false, &RegularizerSpec::l1(), 1e-3f64, &cfg).unwrap();
        assert!(cert.gap.is_infinite() && !cert.converged);
    }

    fn random_instances(seed: u64) -> Vec<(ProblemSpec<f64>, Dataset<f64>, RegularizerSpec, f64)> {
        let mut rng = stream_rng(seed, 11);
        let mut out = Vec::new();
        let spec = ProblemSpec::mle(Family::Bernoulli, vec![0.5, -0.3], 50).unwrap();
        let data = crate::exp_family::sample_data(&spec, &mut rng);
        out.push((spec.clone(), data.clone(), RegularizerSpec::l1(), 0.05));
        out.push((spec, data, RegularizerSpec::elastic_net(), 0.05));
        let design =
            Matrix::from_vec(20, 2, (0..40).map(|_| normal::<f64, _>(&mut rng)).collect()).unwrap();
        let spec = ProblemSpec::glm(Family::Bernoulli, design, vec![0.8, -0.5]).unwrap();
        let data = crate::exp_family::sample_data(&spec, &mut rng);
        out.push((
            spec,
            data,
            RegularizerSpec::group_l12(vec![vec![0, 1]]).unwrap(),
            0.05,
        ));
        let spec = ProblemSpec::pca(
            Family::Gaussian,
            Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 0.25]).unwrap(),
        )
        .unwrap();
        let data = crate::exp_family::sample_data(&spec, &mut rng);
        out.push((spec, data, RegularizerSpec::trace_norm(), 0.1));
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn certificate_survives_random_restarts(seed in any::<u64>()) {
            let cfg = SolveConfig::default();
            for (spec, data, reg, lambda) in random_instances(seed) {
                let loss = EmpiricalLoss::new(&spec, &data, false).unwrap();
                let (_, cert) = minimize_from(&loss, &reg, lambda, &cfg, &Hypothesis::zeros(spec.shape())).unwrap();
                prop_assert!(cert.converged, "{:?}", cert);
                prop_assert!(cert.gap <= cfg.xi);
                let mut rng = stream_rng(seed, 12);
                for _ in 0..50 {
                    let x0: Vec<f64> = (0..spec.dim()).map(|_| 2.0 * normal::<f64, _>(&mut rng)).collect();
                    let start = Hypothesis::zeros(spec.shape()).with_values(x0);
                    let (_, other) = minimize_from(&loss, &reg, lambda, &cfg, &start).unwrap();
                    prop_assert!(other.objective_value >= cert.objective_value - cfg.xi);
                }
            }
        }

        #[test]
        fn backtracking_decreases_monotonically(seed in any::<u64>()) {
            for (spec, data, reg, lambda) in random_instances(seed) {
                let loss = EmpiricalLoss::new(&spec, &data, false).unwrap();
                let (_, _, trace) = minimize_traced(&loss, &reg, lambda, &SolveConfig::default(), &Hypothesis::zeros(spec.shape())).unwrap();
                for w in trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
            }
        }

        #[test]
        fn matches_grid_optimum_in_two_dimensions(a in -0.9f64..0.9, b in -0.9f64..0.9, lambda in 0.0f64..0.5) {
            let (spec, data) = mle_summed(vec![a, b]);
            let cfg = SolveConfig::default();
            let (th, cert) = minimize(&spec, &data, true, &RegularizerSpec::l1(), lambda, &cfg).unwrap();
            // separable oracle: per coordinate soft-thresholded atanh
            let f = |t: f64, s: f64| Family::Bernoulli.log_partition(t) - s * t + lambda * t.abs();
            let mut best = 0.0;
            for (s, &got) in [a, b].iter().zip(th.values()) {
                let shrunk = if s.abs() <= lambda { 0.0 } else { atanh_bisection(s - lambda * s.signum()) };
                best += f(shrunk, *s);
                prop_assert!((got - shrunk).abs() <= cfg.xi + 1e-6);
            }
            prop_assert!(cert.objective_value <= best + cfg.xi);
        }
    }
}
