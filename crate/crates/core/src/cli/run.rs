//! Experiment runner: resolves a config, executes it and writes artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::irrecover::{
    adversary_outcomes, data_entropy, failure_lower_bound, min_noise_variance,
    pairwise_kl_mi_bound, AdversaryResult,
};
use crate::rates::{
    concentration_experiment, consistency_experiment, perturbed_rate_prime, rate, ExperimentSetup,
    RateColumn, RateQuery,
};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "PERTLOSS_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "pertloss-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ConfigInvalid = 2,
    CriteriaFailed = 3,
    RuntimeError = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub output_dir: Option<PathBuf>,
    pub message: String,
}

struct Artifacts {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    summary: Value,
    pass: bool,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Loads `config_path`, applies overrides and runs the experiment.
pub fn run(config_path: &Path, overrides: &Overrides) -> RunOutcome {
    let cfg = match ExperimentConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    run_config(cfg, overrides)
}

fn config_error(e: Error) -> RunOutcome {
    RunOutcome {
        status: ExitStatus::ConfigInvalid,
        output_dir: None,
        message: e.to_string(),
    }
}

fn resolve_output_dir(cfg: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    overrides
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

pub fn run_config(mut cfg: ExperimentConfig, overrides: &Overrides) -> RunOutcome {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = overrides.trials {
        cfg.trials = trials;
    }
    if overrides.jobs == Some(0) {
        return config_error(Error::InvalidParameter("--jobs must be >= 1".into()));
    }
    if let Err(e) = cfg.validate() {
        return config_error(e);
    }
    let dir = resolve_output_dir(&cfg, overrides);
    cfg.output_dir = Some(dir.clone());
    let runtime = |message: String| RunOutcome {
        status: ExitStatus::RuntimeError,
        output_dir: Some(dir.clone()),
        message,
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        return runtime(format!("cannot create {}: {e}", dir.display()));
    }
    let manifest = json!({
        "library": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": &cfg,
    });
    if let Err(e) = write_json(&dir.join("manifest.json"), &manifest) {
        return runtime(e);
    }

    let result = match overrides.jobs {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(|| execute(&cfg)),
            Err(e) => return runtime(format!("thread pool: {e}")),
        },
        None => execute(&cfg),
    };
    let art = match result {
        Ok(a) => a,
        Err(e) => {
            let _ = write_json(
                &dir.join("summary.json"),
                &json!({ "error": e.to_string(), "pass": false }),
            );
            return runtime(e.to_string());
        }
    };
    if let Err(e) = write_csv(&dir.join("results.csv"), &art.header, &art.rows) {
        return runtime(e);
    }
    if let Err(e) = write_json(&dir.join("summary.json"), &art.summary) {
        return runtime(e);
    }
    RunOutcome {
        status: if art.pass {
            ExitStatus::Success
        } else {
            ExitStatus::CriteriaFailed
        },
        output_dir: Some(dir),
        message: if art.pass {
            "all criteria hold".into()
        } else {
            "criteria failed".into()
        },
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> std::result::Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> std::result::Result<(), String> {
    let err = |e: csv::Error| format!("cannot write {}: {e}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush()
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn setup(cfg: &ExperimentConfig) -> ExperimentSetup {
    ExperimentSetup {
        trials: cfg.trials,
        n_grid: cfg.n_grid.clone(),
        delta: cfg.delta,
        tail: cfg.tail,
        sigma_x: cfg.sigma_x,
        seed: cfg.seed,
    }
}

/// Rate query for the configured problem at its own sample size.
pub fn rate_query(cfg: &ExperimentConfig, spec: &crate::exp_family::ProblemSpec<f64>) -> RateQuery {
    let mut q = RateQuery::for_problem(
        spec,
        &cfg.perturbation,
        &cfg.regularizer,
        cfg.tail,
        cfg.sigma_x,
        cfg.delta,
    );
    q.beta = cfg.beta;
    q
}

fn execute(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let spec = cfg.problem_spec()?;
    match cfg.experiment {
        Experiment::RateTable => {
            let grid = if cfg.n_grid.is_empty() {
                vec![spec.n()]
            } else {
                cfg.n_grid.clone()
            };
            let mut rows = Vec::new();
            let mut rates = Vec::new();
            let column = RateColumn::for_regularizer(cfg.regularizer.kind);
            for n in grid {
                let q = rate_query(cfg, &spec.with_sample_count(n)?);
                let r = rate(&q)?;
                let eps_prime = perturbed_rate_prime(&q);
                rows.push(vec![
                    n.to_string(),
                    q.p.to_string(),
                    column.name().to_string(),
                    num(r.value),
                    num(eps_prime),
                    r.order_only.to_string(),
                ]);
                rates.push(json!({ "n": n, "eps": r.value, "eps_prime": eps_prime, "order_only": r.order_only }));
            }
            Ok(Artifacts {
                header: vec!["n", "p", "column", "eps", "eps_prime", "order_only"],
                rows,
                summary: json!({
                    "experiment": "rate_table",
                    "problem_kind": spec.kind().name(),
                    "column": column.name(),
                    "tail": cfg.tail,
                    "sigma": cfg.sigma_x.hypot(cfg.perturbation.noise_sd()),
                    "delta": cfg.delta,
                    "rates": rates,
                    "pass": true,
                }),
                pass: true,
            })
        }
        Experiment::Concentration => {
            let rep =
                concentration_experiment(&spec, &cfg.perturbation, &cfg.regularizer, &setup(cfg))?;
            let rows = rep
                .deviations
                .iter()
                .enumerate()
                .map(|(id, &(n, _, d))| vec![id.to_string(), n.to_string(), num(d)])
                .collect();
            Ok(Artifacts {
                header: vec!["trial_id", "n", "dual_dev"],
                rows,
                summary: json!({
                    "experiment": "concentration",
                    "delta": cfg.delta,
                    "rows": rep.rows,
                    "pass": rep.pass,
                }),
                pass: rep.pass,
            })
        }
        Experiment::Consistency => {
            let rep = consistency_experiment(
                &spec,
                &cfg.perturbation,
                &cfg.regularizer,
                &cfg.solver,
                &setup(cfg),
            )?;
            let rows = rep
                .records
                .iter()
                .enumerate()
                .map(|(id, r)| {
                    vec![
                        id.to_string(),
                        r.n.to_string(),
                        num(r.gap),
                        num(r.rhs),
                        num(r.dual_dev),
                        num(r.lambda),
                        r.covered().to_string(),
                        r.solver_converged.to_string(),
                        num(r.solver_gap),
                        r.error.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            let total = rep.records.len() as f64;
            let threshold =
                (1.0 - cfg.delta) - 3.0 * (cfg.delta * (1.0 - cfg.delta) / total).sqrt();
            let pass = rep.coverage >= threshold;
            Ok(Artifacts {
                header: vec![
                    "trial_id",
                    "n",
                    "gap",
                    "rhs",
                    "dual_dev",
                    "lambda",
                    "covered",
                    "solver_converged",
                    "solver_gap",
                    "error",
                ],
                rows,
                summary: json!({
                    "experiment": "consistency",
                    "coverage": rep.coverage,
                    "coverage_threshold": threshold,
                    "fitted_exponent": rep.fitted_exponent,
                    "per_n": rep.per_n,
                    "pass": pass,
                }),
                pass,
            })
        }
        Experiment::Irrecoverability => {
            let q = cfg.irrecov_query(&spec)?;
            let pert = cfg.perturbation.with_seed(cfg.seed);
            let threshold = min_noise_variance(&q)?;
            let outcomes = adversary_outcomes(&q, &pert, cfg.trials)?;
            let failures = outcomes.iter().filter(|&&f| f).count();
            let res = AdversaryResult::from_counts(cfg.trials, failures, q.gamma);
            let rows = outcomes
                .iter()
                .enumerate()
                .map(|(id, &f)| vec![id.to_string(), f.to_string()])
                .collect();
            Ok(Artifacts {
                header: vec!["trial_id", "failed"],
                rows,
                summary: json!({
                    "experiment": "irrecoverability",
                    "query": q,
                    "mechanism": pert,
                    "threshold": threshold,
                    "threshold_met": threshold.admits(&pert),
                    "entropy_nats": data_entropy(&q)?,
                    "mi_bound_nats": pairwise_kl_mi_bound(&q, &pert)?,
                    "fano_bound": failure_lower_bound(&q, &pert)?,
                    "adversary": res,
                    "failure_rate": res.failure_rate,
                    "pass": res.pass,
                }),
                pass: res.pass,
            })
        }
    }
}
