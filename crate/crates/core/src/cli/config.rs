//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{Family, ProblemKind, ProblemSpec};
use crate::irrecover::MIN_ADVERSARY_TRIALS;
use crate::irrecover::{IrrecovClass, IrrecovQuery};
use crate::linalg::Matrix;
use crate::optimize::SolveConfig;
use crate::perturb::{MechanismKind, PerturbationSpec};
use crate::rates::{rate, RateQuery, Tail, MIN_CONSISTENCY_TRIALS};
use crate::regularize::RegularizerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    RateTable,
    Consistency,
    Concentration,
    Irrecoverability,
}

/// Problem parameters. Arrays left out get defaults: `theta_star` is zero,
/// a GLM design cycles the standard basis of `R^p`, nonparametric points are
/// the equispaced grid and max-margin entries are fair coins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default = "bernoulli")]
    pub family: Family,
    /// Sample count (MLE, GLM, nonparametric) or row count (PCA, max-margin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Parameter dimension, or column count for the matrix classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_plus: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    pub lipschitz_k: f64,
}

fn bernoulli() -> Family {
    Family::Bernoulli
}

fn one() -> f64 {
    1.0
}

fn default_trials() -> usize {
    1000
}

fn default_delta() -> f64 {
    0.05
}

fn default_gamma() -> f64 {
    0.5
}

fn identity() -> PerturbationSpec {
    PerturbationSpec::identity()
}

fn l1() -> RegularizerSpec {
    RegularizerSpec::l1()
}

fn subgaussian() -> Tail {
    Tail::Subgaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "subgaussian")]
    pub tail: Tail,
    #[serde(default = "one")]
    pub sigma_x: f64,
    /// Exponent of the nonparametric order expressions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    #[serde(default = "identity")]
    pub perturbation: PerturbationSpec,
    #[serde(default = "l1")]
    pub regularizer: RegularizerSpec,
    #[serde(default)]
    pub solver: SolveConfig,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix<f64>> {
    Matrix::from_rows(rows).map_err(|e| Error::InvalidParameter(format!("{what}: {e}")))
}

impl ProblemConfig {
    fn need<V: Copy>(&self, v: Option<V>, what: &str) -> Result<V> {
        v.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "problem.{what} is required for {}",
                self.kind.name()
            ))
        })
    }

    fn theta(&self, dim: usize) -> Result<Vec<f64>> {
        match &self.theta_star {
            Some(t) if t.len() != dim => Err(Error::InvalidParameter(format!(
                "problem.theta_star has {} entries, expected {dim}",
                t.len()
            ))),
            Some(t) => Ok(t.clone()),
            None => Ok(vec![0.0; dim]),
        }
    }

    /// Builds the problem; `n` falls back to `default_n` when unset.
    pub fn build(&self, default_n: Option<usize>) -> Result<ProblemSpec<f64>> {
        let n = self.n.or(default_n);
        match self.kind {
            ProblemKind::MleExpfam => {
                let p = match &self.theta_star {
                    Some(t) => t.len(),
                    None => self.need(self.p, "p")?,
                };
                ProblemSpec::mle(self.family, self.theta(p)?, self.need(n, "n")?)
            }
            ProblemKind::GlmFixed => {
                let design = match &self.design {
                    Some(rows) => matrix(rows, "problem.design")?,
                    None => {
                        let (n, p) = (self.need(n, "n")?, self.need(self.p, "p")?);
                        let mut m = Matrix::zeros(n, p);
                        for i in 0..n {
                            m.as_mut_slice()[i * p + i % p] = 1.0;
                        }
                        m
                    }
                };
                let theta = self.theta(design.cols())?;
                ProblemSpec::glm(self.family, design, theta)
            }
            ProblemKind::ExpfamPca => {
                let theta = match &self.theta_star_matrix {
                    Some(rows) => matrix(rows, "problem.theta_star_matrix")?,
                    None => Matrix::zeros(self.need(self.n, "n")?, self.need(self.p, "p")?),
                };
                ProblemSpec::pca(self.family, theta)
            }
            ProblemKind::NonparamRegression => {
                let q = self.need(self.basis_count, "basis_count")?;
                let points = match &self.points {
                    Some(rows) => matrix(rows, "problem.points")?,
                    None => {
                        let (n, p) = (self.need(n, "n")?, self.need(self.p, "p")?);
                        let grid = (0..n)
                            .flat_map(|i| std::iter::repeat_n((i as f64 + 0.5) / n as f64, p))
                            .collect();
                        Matrix::from_vec(n, p, grid)?
                    }
                };
                let theta = self.theta(q * points.cols())?;
                ProblemSpec::nonparam(self.family, points, q, theta)
            }
            ProblemKind::MaxmarginMf => {
                let probs = match &self.prob_plus {
                    Some(rows) => matrix(rows, "problem.prob_plus")?,
                    None => {
                        let (r, c) = (self.need(self.n, "n")?, self.need(self.p, "p")?);
                        Matrix::from_vec(r, c, vec![0.5; r * c])?
                    }
                };
                ProblemSpec::max_margin(probs, self.lipschitz_k)
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Reads the resolved configuration stored in a run's `manifest.json`.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Manifest {
            config: ExperimentConfig,
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))?;
        m.config.validate()?;
        Ok(m.config)
    }

    /// Problem at the first grid size (or the configured `n`).
    pub fn problem_spec(&self) -> Result<ProblemSpec<f64>> {
        self.problem.build(self.n_grid.first().copied())
    }

    pub fn irrecov_query(&self, spec: &ProblemSpec<f64>) -> Result<IrrecovQuery> {
        let class = match (spec.kind(), self.perturbation.kind) {
            (
                ProblemKind::MleExpfam,
                MechanismKind::IsingClamp | MechanismKind::GaussianAdditive,
            ) => IrrecovClass::MleIsing,
            (ProblemKind::GlmFixed, _) => IrrecovClass::GlmLabels,
            (ProblemKind::ExpfamPca, _) => IrrecovClass::PcaEntries,
            (ProblemKind::MaxmarginMf, _) => IrrecovClass::MaxmarginFlip,
            (kind, mech) => {
                return Err(Error::InvalidCombination(format!(
                    "irrecoverability of {} under {}",
                    kind.name(),
                    mech.name()
                )))
            }
        };
        let (rows, cols) = spec.data_shape();
        Ok(match class {
            IrrecovClass::MleIsing => IrrecovQuery::ising(self.gamma, spec.n(), spec.dim()),
            _ => IrrecovQuery::new(class, self.gamma, rows * cols),
        })
    }

    /// Re-checks every module invariant the run depends on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let min_trials = match self.experiment {
            Experiment::RateTable => 0,
            Experiment::Concentration => 1,
            Experiment::Consistency => MIN_CONSISTENCY_TRIALS,
            Experiment::Irrecoverability => MIN_ADVERSARY_TRIALS,
        };
        if self.trials == 0 || self.trials < min_trials {
            return bad(format!(
                "trials = {} (need at least {})",
                self.trials,
                min_trials.max(1)
            ));
        }
        if self.n_grid.contains(&0) {
            return bad("n_grid entries must be positive".into());
        }
        if matches!(
            self.experiment,
            Experiment::Consistency | Experiment::Concentration
        ) && self.n_grid.is_empty()
        {
            return bad("n_grid must not be empty".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return bad("sigma_x must be finite and >= 0".into());
        }
        self.perturbation.validate()?;
        self.solver.validate()?;
        let spec = self.problem_spec()?;
        self.regularizer.validate(spec.dim())?;
        for &n in &self.n_grid {
            if matches!(
                spec.kind(),
                ProblemKind::ExpfamPca | ProblemKind::MaxmarginMf
            ) && n != spec.n()
            {
                return bad(format!(
                    "n_grid entry {n} differs from the {} entry count {}",
                    spec.kind().name(),
                    spec.n()
                ));
            }
        }
        if self.experiment == Experiment::Irrecoverability {
            self.irrecov_query(&spec)?.validate()?;
        } else {
            let mut q = RateQuery::for_problem(
                &spec,
                &self.perturbation,
                &self.regularizer,
                self.tail,
                self.sigma_x,
                self.delta,
            );
            q.beta = self.beta;
            rate(&q)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "rate_table"
n_grid = [100]

[problem]
kind = "mle_expfam"
p = 10
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.trials, 1000);
        assert_eq!(cfg.delta, 0.05);
        assert_eq!(cfg.perturbation, PerturbationSpec::identity());
        assert_eq!(cfg.regularizer, RegularizerSpec::l1());
        assert_eq!(cfg.problem_spec().unwrap().dim(), 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\ncolour = 3\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("p = 10", "p = 10\nsigma = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = MINIMAL.replace("n_grid = [100]", "n_grid = [100]\ntrials = 0");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("n_grid = [100]", "n_grid = [100]\ndelta = 1.5");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[solver]\nalpha = 1.0\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::AlphaBelowTwo(_))
        ));
    }

    #[test]
    fn default_glm_design_cycles_the_basis() {
        let text = r#"
experiment = "irrecoverability"
trials = 1000
[problem]
kind = "glm_fixed"
n = 5
p = 2
[perturbation]
kind = "gaussian_additive"
sigma_eta = 1.0
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let spec = cfg.problem_spec().unwrap();
        let x = spec.design().unwrap();
        assert_eq!(x.row(4), &[1.0, 0.0]);
        assert_eq!(x.row(3), &[0.0, 1.0]);
        assert_eq!(
            cfg.irrecov_query(&spec).unwrap(),
            IrrecovQuery::new(IrrecovClass::GlmLabels, 0.5, 5)
        );
    }
}
