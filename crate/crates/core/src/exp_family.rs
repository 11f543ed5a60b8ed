//! Problem classes: sufficient statistics, log-partition functions and the
//! empirical / expected losses (with gradients) for original and perturbed
//! data.
//!
//! Five classes are supported: maximum likelihood for a product
//! exponential family, generalized linear models with fixed design,
//! exponential-family PCA, nonparametric generalized regression on a cosine
//! basis, and max-margin matrix factorization with a hinge loss.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{normal, signed_bernoulli, stream_rng};
use crate::scalar::{dot, Scalar};

/// Exponential family of a single coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Two-point family on `{-1, +1}` with `t(y) = y`.
    Bernoulli,
    /// Unit-variance Gaussian with `t(y) = y`.
    Gaussian,
}

impl Family {
    /// `log Z(nu)`, evaluated without overflow for large `|nu|`.
    pub fn log_partition<T: Scalar>(self, nu: T) -> T {
        match self {
            // log(e^nu + e^-nu) = |nu| + log(1 + e^{-2|nu|})
            Family::Bernoulli => {
                let a = nu.abs();
                a + (-(a + a)).exp().ln_1p()
            }
            Family::Gaussian => {
                nu * nu * T::half() + T::of(0.5 * (2.0 * std::f64::consts::PI).ln())
            }
        }
    }

    /// `d/dnu log Z(nu)`, the mean of `t(y)`.
    pub fn mean<T: Scalar>(self, nu: T) -> T {
        match self {
            Family::Bernoulli => nu.tanh(),
            Family::Gaussian => nu,
        }
    }

    /// `d^2/dnu^2 log Z(nu)`, the variance of `t(y)`.
    pub fn curvature<T: Scalar>(self, nu: T) -> T {
        match self {
            Family::Bernoulli => {
                let e = (-(nu.abs() + nu.abs())).exp();
                let d = T::one() + e;
                T::of(4.0) * e / (d * d)
            }
            Family::Gaussian => T::one(),
        }
    }

    /// Smallest curvature over `|nu'| <= bound`.
    fn min_curvature<T: Scalar>(self, bound: T) -> T {
        self.curvature(bound)
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(self, nu: T, rng: &mut R) -> T {
        match self {
            Family::Bernoulli => {
                let p = 0.5 * (1.0 + nu.to_f64_lossy().tanh());
                signed_bernoulli(rng, p)
            }
            Family::Gaussian => nu + normal::<T, _>(rng),
        }
    }

    fn in_support<T: Scalar>(self, y: T) -> bool {
        match self {
            Family::Bernoulli => y == T::one() || y == -T::one(),
            Family::Gaussian => y.is_finite(),
        }
    }
}

/// Ambient norm associated with a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    #[default]
    L1,
    L2,
    GroupL12,
    Nuclear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(p) => p,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Vector(p) => write!(f, "vector({p})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r}x{c})"),
        }
    }
}

/// A parameter `theta`: a vector in `R^p` or a matrix in `R^{n1 x n2}`
/// (stored row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis<T> {
    shape: Shape,
    values: Vec<T>,
    norm: NormTag,
}

impl<T: Scalar> Hypothesis<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![T::zero(); shape.len()],
            norm: NormTag::default(),
        }
    }

    pub fn new(shape: Shape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(shape_err(shape, format!("{} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hypothesis entries"));
        }
        Ok(Self {
            shape,
            values,
            norm: NormTag::default(),
        })
    }

    pub fn vector(values: Vec<T>) -> Result<Self> {
        Self::new(Shape::Vector(values.len()), values)
    }

    pub fn matrix(m: Matrix<T>) -> Result<Self> {
        Self::new(Shape::Matrix(m.rows(), m.cols()), m.into_vec())
    }

    pub fn with_norm(mut self, norm: NormTag) -> Self {
        self.norm = norm;
        self
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn norm_tag(&self) -> NormTag {
        self.norm
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Same shape and norm tag, new entries. Entries are not re-checked.
    pub fn with_values(&self, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            shape: self.shape,
            values,
            norm: self.norm,
        }
    }

    pub fn as_matrix(&self) -> Option<Matrix<T>> {
        match self.shape {
            Shape::Matrix(r, c) => Matrix::from_vec(r, c, self.values.clone()).ok(),
            Shape::Vector(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    MleExpfam,
    GlmFixed,
    ExpfamPca,
    NonparamRegression,
    MaxmarginMf,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::MleExpfam => "mle_expfam",
            ProblemKind::GlmFixed => "glm_fixed",
            ProblemKind::ExpfamPca => "expfam_pca",
            ProblemKind::NonparamRegression => "nonparam_regression",
            ProblemKind::MaxmarginMf => "maxmargin_mf",
        }
    }
}

/// A problem class together with its generative parameters.
///
/// Construct through the associated functions, which validate the
/// invariants of each class.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec<T> {
    /// iid samples `x in R^p` with independent coordinates of `family` and
    /// natural parameter `theta_star`.
    Mle {
        family: Family,
        theta_star: Vec<T>,
        n_samples: usize,
    },
    /// Responses `y_i` of `family` with natural parameter `<x_i, theta_star>`.
    Glm {
        family: Family,
        design: Matrix<T>,
        theta_star: Vec<T>,
    },
    /// Independent entries `x_ij` of `family` with natural parameter
    /// `theta_star[i][j]`.
    Pca {
        family: Family,
        theta_star: Matrix<T>,
    },
    /// Regression on `q_n * p` cosine features of points in `[0, 1]^p`.
    Nonparam {
        family: Family,
        points: Matrix<T>,
        basis_count: usize,
        features: Matrix<T>,
        theta_star: Vec<T>,
    },
    /// Independent entries in `{-1, +1}` with `P[x_ij = +1] = prob_plus[i][j]`,
    /// fitted with the hinge loss `f(z) = K max(0, 1 - z)`.
    MaxMargin {
        prob_plus: Matrix<T>,
        lipschitz_k: T,
    },
}

fn check_finite<T: Scalar>(v: &[T], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl<T: Scalar> ProblemSpec<T> {
    pub fn mle(family: Family, theta_star: Vec<T>, n_samples: usize) -> Result<Self> {
        check_finite(&theta_star, "theta_star")?;
        if theta_star.is_empty() || n_samples == 0 {
            return Err(Error::InvalidParameter(
                "mle needs p >= 1 and n >= 1".into(),
            ));
        }
        Ok(Self::Mle {
            family,
            theta_star,
            n_samples,
        })
    }

    pub fn glm(family: Family, design: Matrix<T>, theta_star: Vec<T>) -> Result<Self> {
        check_finite(design.as_slice(), "design")?;
        check_finite(&theta_star, "theta_star")?;
        if design.rows() == 0 || design.cols() == 0 {
            return Err(Error::InvalidParameter("empty design".into()));
        }
        if design.cols() != theta_star.len() {
            return Err(shape_err(
                format!("theta_star of length {}", design.cols()),
                theta_star.len(),
            ));
        }
        if design.max_abs() <= T::zero() {
            return Err(Error::InvalidParameter(
                "design bound B must be positive".into(),
            ));
        }
        Ok(Self::Glm {
            family,
            design,
            theta_star,
        })
    }

    pub fn pca(family: Family, theta_star: Matrix<T>) -> Result<Self> {
        check_finite(theta_star.as_slice(), "theta_star")?;
        if theta_star.rows() == 0 || theta_star.cols() == 0 {
            return Err(Error::InvalidParameter("empty parameter matrix".into()));
        }
        Ok(Self::Pca { family, theta_star })
    }

    pub fn nonparam(
        family: Family,
        points: Matrix<T>,
        basis_count: usize,
        theta_star: Vec<T>,
    ) -> Result<Self> {
        if basis_count == 0 {
            return Err(Error::InvalidParameter("basis_count must be >= 1".into()));
        }
        if points.rows() == 0 || points.cols() == 0 {
            return Err(Error::InvalidParameter("empty design points".into()));
        }
        if points
            .as_slice()
            .iter()
            .any(|&x| !(x >= T::zero() && x <= T::one()))
        {
            return Err(Error::InvalidParameter(
                "design points must lie in [0, 1]".into(),
            ));
        }
        check_finite(&theta_star, "theta_star")?;
        let dim = basis_count * points.cols();
        if theta_star.len() != dim {
            return Err(shape_err(
                format!("{dim} basis coefficients"),
                theta_star.len(),
            ));
        }
        let features = cosine_features(&points, basis_count);
        Ok(Self::Nonparam {
            family,
            points,
            basis_count,
            features,
            theta_star,
        })
    }

    pub fn max_margin(prob_plus: Matrix<T>, lipschitz_k: T) -> Result<Self> {
        if !(lipschitz_k > T::zero()) || !lipschitz_k.is_finite() {
            return Err(Error::InvalidParameter(
                "lipschitz_k must be positive".into(),
            ));
        }
        if prob_plus.rows() == 0 || prob_plus.cols() == 0 {
            return Err(Error::InvalidParameter("empty probability matrix".into()));
        }
        if prob_plus
            .as_slice()
            .iter()
            .any(|&p| !(p >= T::zero() && p <= T::one()))
        {
            return Err(Error::InvalidParameter(
                "prob_plus entries must lie in [0, 1]".into(),
            ));
        }
        Ok(Self::MaxMargin {
            prob_plus,
            lipschitz_k,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        match self {
            Self::Mle { .. } => ProblemKind::MleExpfam,
            Self::Glm { .. } => ProblemKind::GlmFixed,
            Self::Pca { .. } => ProblemKind::ExpfamPca,
            Self::Nonparam { .. } => ProblemKind::NonparamRegression,
            Self::MaxMargin { .. } => ProblemKind::MaxmarginMf,
        }
    }

    pub fn family(&self) -> Option<Family> {
        match self {
            Self::Mle { family, .. }
            | Self::Glm { family, .. }
            | Self::Pca { family, .. }
            | Self::Nonparam { family, .. } => Some(*family),
            Self::MaxMargin { .. } => None,
        }
    }

    /// Shape of the hypothesis `theta`.
    pub fn shape(&self) -> Shape {
        match self {
            Self::Mle { theta_star, .. } | Self::Nonparam { theta_star, .. } => {
                Shape::Vector(theta_star.len())
            }
            Self::Glm { design, .. } => Shape::Vector(design.cols()),
            Self::Pca { theta_star, .. } => Shape::Matrix(theta_star.rows(), theta_star.cols()),
            Self::MaxMargin { prob_plus, .. } => Shape::Matrix(prob_plus.rows(), prob_plus.cols()),
        }
    }

    /// Shape of one draw of the observed data.
    pub fn data_shape(&self) -> (usize, usize) {
        match self {
            Self::Mle {
                theta_star,
                n_samples,
                ..
            } => (*n_samples, theta_star.len()),
            Self::Glm { design, .. } => (design.rows(), 1),
            Self::Nonparam { points, .. } => (points.rows(), 1),
            Self::Pca { theta_star, .. } => (theta_star.rows(), theta_star.cols()),
            Self::MaxMargin { prob_plus, .. } => (prob_plus.rows(), prob_plus.cols()),
        }
    }

    /// The sample count `n` that normalizes the empirical loss.
    pub fn n(&self) -> usize {
        match self {
            Self::Mle { n_samples, .. } => *n_samples,
            Self::Glm { design, .. } => design.rows(),
            Self::Nonparam { points, .. } => points.rows(),
            Self::Pca { theta_star: m, .. } | Self::MaxMargin { prob_plus: m, .. } => {
                m.rows() * m.cols()
            }
        }
    }

    /// Dimension `p` of the statistic (entries of `theta`).
    pub fn dim(&self) -> usize {
        self.shape().len()
    }

    /// Linear-prediction design (GLM rows or nonparametric features).
    pub fn design(&self) -> Option<&Matrix<T>> {
        match self {
            Self::Glm { design, .. } => Some(design),
            Self::Nonparam { features, .. } => Some(features),
            _ => None,
        }
    }

    /// Bound `B` on the dual norm of design rows.
    pub fn design_bound(&self) -> Option<T> {
        match self {
            Self::Glm { design, .. } => Some(design.max_abs()),
            Self::Nonparam { .. } => Some(T::two().sqrt()),
            _ => None,
        }
    }

    /// The population minimizer `theta*` of the expected loss.
    ///
    /// For the exponential-family classes this is the generating natural
    /// parameter. For max-margin it is the entrywise hinge minimizer
    /// `sign(2 p_ij - 1)` (zero when `p_ij = 1/2`).
    pub fn true_hypothesis(&self) -> Hypothesis<T> {
        let values = match self {
            Self::Mle { theta_star, .. }
            | Self::Glm { theta_star, .. }
            | Self::Nonparam { theta_star, .. } => theta_star.clone(),
            Self::Pca { theta_star, .. } => theta_star.as_slice().to_vec(),
            Self::MaxMargin { prob_plus, .. } => prob_plus
                .as_slice()
                .iter()
                .map(|&p| hinge_population_minimizer(p))
                .collect(),
        };
        Hypothesis {
            shape: self.shape(),
            values,
            norm: NormTag::default(),
        }
    }

    /// Copy of the problem with `n` samples. MLE changes the sample count;
    /// GLM cycles the existing design rows; nonparametric regression uses the
    /// equispaced grid `(i + 1/2) / n` in every coordinate. Matrix classes
    /// have `n` fixed by their shape.
    pub fn with_sample_count(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        match self {
            Self::Mle {
                family, theta_star, ..
            } => Self::mle(*family, theta_star.clone(), n),
            Self::Glm {
                family,
                design,
                theta_star,
            } => {
                let rows: Vec<Vec<T>> = (0..n)
                    .map(|i| design.row(i % design.rows()).to_vec())
                    .collect();
                Self::glm(*family, Matrix::from_rows(&rows)?, theta_star.clone())
            }
            Self::Nonparam {
                family,
                points,
                basis_count,
                theta_star,
                ..
            } => {
                let p = points.cols();
                let grid: Vec<T> = (0..n)
                    .flat_map(|i| {
                        let x = (T::of_usize(i) + T::half()) / T::of_usize(n);
                        std::iter::repeat_n(x, p)
                    })
                    .collect();
                Self::nonparam(
                    *family,
                    Matrix::from_vec(n, p, grid)?,
                    *basis_count,
                    theta_star.clone(),
                )
            }
            Self::Pca { .. } | Self::MaxMargin { .. } if n == self.n() => Ok(self.clone()),
            _ => Err(Error::InvalidCombination(format!(
                "changing n for {} (n is fixed by the matrix shape)",
                self.kind().name()
            ))),
        }
    }

    /// Natural parameters of every observed coordinate under `theta*`,
    /// laid out like the data.
    fn true_natural_parameters(&self) -> Vec<T> {
        match self {
            Self::Mle { theta_star, .. } => theta_star.clone(),
            Self::Glm {
                design, theta_star, ..
            } => design.matvec(theta_star),
            Self::Nonparam {
                features,
                theta_star,
                ..
            } => features.matvec(theta_star),
            Self::Pca { theta_star, .. } => theta_star.as_slice().to_vec(),
            Self::MaxMargin { .. } => Vec::new(),
        }
    }

    /// Expected sufficient statistic of every observed coordinate, laid out
    /// like one data row (MLE) or like the data (other classes). For
    /// max-margin this is `E[x_ij] = 2 p_ij - 1`.
    pub fn expected_statistic(&self) -> Vec<T> {
        match self {
            Self::MaxMargin { prob_plus, .. } => prob_plus
                .as_slice()
                .iter()
                .map(|&p| T::two() * p - T::one())
                .collect(),
            _ => {
                let family = self.family().expect("exponential family");
                self.true_natural_parameters()
                    .into_iter()
                    .map(|nu| family.mean(nu))
                    .collect()
            }
        }
    }
}

/// Cosine features `sqrt(2) cos(k pi x_l)`, `k = 1..=q`, column `l * q + k - 1`.
pub fn cosine_features<T: Scalar>(points: &Matrix<T>, basis_count: usize) -> Matrix<T> {
    let (n, p) = (points.rows(), points.cols());
    let mut out = Matrix::zeros(n, p * basis_count);
    let root2 = T::two().sqrt();
    let pi = T::of(std::f64::consts::PI);
    for i in 0..n {
        for l in 0..p {
            let x = points[(i, l)];
            for k in 1..=basis_count {
                out[(i, l * basis_count + k - 1)] = root2 * (T::of_usize(k) * pi * x).cos();
            }
        }
    }
    out
}

fn hinge_population_minimizer<T: Scalar>(p_plus: T) -> T {
    let d = T::two() * p_plus - T::one();
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Observed data for one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T> {
    /// Raw (or perturbed) observations: `n x p` samples for MLE, `n x 1`
    /// responses for GLM / nonparametric regression, the `n1 x n2` matrix for
    /// PCA and max-margin.
    Observations(Matrix<T>),
    /// A published summed statistic over `count` samples (MLE only); the loss
    /// uses `sum / count`.
    SummedStatistic { sum: Vec<T>, count: usize },
}

impl<T: Scalar> Dataset<T> {
    pub fn observations(&self) -> Option<&Matrix<T>> {
        match self {
            Dataset::Observations(m) => Some(m),
            Dataset::SummedStatistic { .. } => None,
        }
    }
}

/// Draws one dataset from the generative law of `spec`.
pub fn sample_data<T: Scalar, R: Rng + ?Sized>(spec: &ProblemSpec<T>, rng: &mut R) -> Dataset<T> {
    let (rows, cols) = spec.data_shape();
    let data: Vec<T> = match spec {
        ProblemSpec::MaxMargin { prob_plus, .. } => prob_plus
            .as_slice()
            .iter()
            .map(|&p| signed_bernoulli(rng, p.to_f64_lossy()))
            .collect(),
        ProblemSpec::Mle {
            family, theta_star, ..
        } => (0..rows)
            .flat_map(|_| {
                theta_star
                    .iter()
                    .map(|&nu| family.sample(nu, rng))
                    .collect::<Vec<_>>()
            })
            .collect(),
        _ => {
            let family = spec.family().expect("exponential family");
            spec.true_natural_parameters()
                .into_iter()
                .map(|nu| family.sample(nu, rng))
                .collect()
        }
    };
    Dataset::Observations(Matrix::from_vec(rows, cols, data).expect("shape by construction"))
}

/// `log Z(nu)` of the family attached to `spec`.
pub fn log_partition<T: Scalar>(spec: &ProblemSpec<T>, nu: T) -> Result<T> {
    match spec.family() {
        Some(f) => Ok(f.log_partition(nu)),
        None => Err(Error::UnsupportedFamily("maxmargin_mf")),
    }
}

#[derive(Debug, Clone)]
enum Prepared<T> {
    /// `-<t_hat, theta> + sum_j log Z(theta_j)`
    Mle { family: Family, t_hat: Vec<T> },
    /// `(1/n) sum_i -y_i nu_i + log Z(nu_i)`, `nu = X theta`
    Linear {
        family: Family,
        design: Matrix<T>,
        y: Vec<T>,
        min_gram_eig: OnceLock<T>,
    },
    /// `(1/n) sum_ij -x_ij theta_ij + log Z(theta_ij)`
    Entrywise { family: Family, x: Vec<T> },
    /// `(1/n) sum_ij K max(0, 1 - x_ij theta_ij)`
    Hinge { x: Vec<T>, k: T },
}

/// Empirical loss `L_hat` (or `L_hat_eta` for perturbed data) of one dataset,
/// prepared once so it can be evaluated repeatedly by a solver.
#[derive(Debug, Clone)]
pub struct EmpiricalLoss<T> {
    shape: Shape,
    prepared: Prepared<T>,
}

impl<T: Scalar> EmpiricalLoss<T> {
    /// With `perturbed = false` observations must lie in the support of the
    /// model (`{-1, +1}` for Bernoulli and max-margin); perturbed data only
    /// needs to be finite.
    pub fn new(spec: &ProblemSpec<T>, data: &Dataset<T>, perturbed: bool) -> Result<Self> {
        let check = |values: &[T], family: Option<Family>| -> Result<()> {
            check_finite(values, "data")?;
            if perturbed {
                return Ok(());
            }
            let binary = family.is_none_or(|f| f == Family::Bernoulli);
            if binary {
                if let Some((index, &value)) = values
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| v != T::one() && v != -T::one())
                {
                    return Err(Error::NonBinary {
                        index,
                        value: value.to_f64_lossy(),
                    });
                }
            } else if let Some(f) = family {
                debug_assert!(values.iter().all(|&v| f.in_support(v)));
            }
            Ok(())
        };
        let expect = spec.data_shape();
        let obs = |d: &Dataset<T>| -> Result<Matrix<T>> {
            match d {
                Dataset::Observations(m) if (m.rows(), m.cols()) == expect => Ok(m.clone()),
                Dataset::Observations(m) => Err(shape_err(
                    format!("data {}x{}", expect.0, expect.1),
                    format!("{}x{}", m.rows(), m.cols()),
                )),
                Dataset::SummedStatistic { .. } => {
                    Err(shape_err("observations", "summed statistic"))
                }
            }
        };
        let prepared = match spec {
            ProblemSpec::Mle {
                family, theta_star, ..
            } => {
                let p = theta_star.len();
                let t_hat = match data {
                    Dataset::SummedStatistic { sum, count } => {
                        if sum.len() != p {
                            return Err(shape_err(format!("statistic of length {p}"), sum.len()));
                        }
                        if *count == 0 {
                            return Err(Error::InvalidParameter(
                                "summed statistic over 0 samples".into(),
                            ));
                        }
                        check_finite(sum, "data")?;
                        let c = T::of_usize(*count);
                        sum.iter().map(|&s| s / c).collect()
                    }
                    Dataset::Observations(m) => {
                        if m.cols() != p || m.rows() == 0 {
                            return Err(shape_err(
                                format!("n x {p} samples"),
                                format!("{}x{}", m.rows(), m.cols()),
                            ));
                        }
                        check(m.as_slice(), Some(*family))?;
                        mean_rows(m)
                    }
                };
                Prepared::Mle {
                    family: *family,
                    t_hat,
                }
            }
            ProblemSpec::Glm { family, design, .. }
            | ProblemSpec::Nonparam {
                family,
                features: design,
                ..
            } => {
                let m = obs(data)?;
                check(m.as_slice(), Some(*family))?;
                Prepared::Linear {
                    family: *family,
                    design: design.clone(),
                    y: m.into_vec(),
                    min_gram_eig: OnceLock::new(),
                }
            }
            ProblemSpec::Pca { family, .. } => {
                let m = obs(data)?;
                check(m.as_slice(), Some(*family))?;
                Prepared::Entrywise {
                    family: *family,
                    x: m.into_vec(),
                }
            }
            ProblemSpec::MaxMargin { lipschitz_k, .. } => {
                let m = obs(data)?;
                check(m.as_slice(), None)?;
                Prepared::Hinge {
                    x: m.into_vec(),
                    k: *lipschitz_k,
                }
            }
        };
        Ok(Self {
            shape: spec.shape(),
            prepared,
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Whether the loss is differentiable (everything but the hinge).
    pub fn is_smooth(&self) -> bool {
        !matches!(self.prepared, Prepared::Hinge { .. })
    }

    /// Lipschitz constant of the loss in the Euclidean norm (hinge only).
    pub fn lipschitz_l2(&self) -> Option<T> {
        match &self.prepared {
            Prepared::Hinge { x, k } => {
                let n = T::of_usize(x.len());
                let ss: T = x.iter().map(|&v| v * v).sum();
                Some(*k * ss.sqrt() / n)
            }
            _ => None,
        }
    }

    fn check_theta(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.shape.len() {
            return Err(shape_err(self.shape, format!("{} entries", theta.len())));
        }
        Ok(())
    }

    pub fn value(&self, theta: &[T]) -> Result<T> {
        self.check_theta(theta)?;
        let v = match &self.prepared {
            Prepared::Mle { family, t_hat } => theta
                .iter()
                .zip(t_hat)
                .map(|(&th, &t)| family.log_partition(th) - t * th)
                .sum(),
            Prepared::Linear {
                family, design, y, ..
            } => {
                let nu = design.matvec(theta);
                let n = T::of_usize(y.len());
                nu.iter()
                    .zip(y)
                    .map(|(&v, &yi)| family.log_partition(v) - yi * v)
                    .sum::<T>()
                    / n
            }
            Prepared::Entrywise { family, x } => {
                let n = T::of_usize(x.len());
                theta
                    .iter()
                    .zip(x)
                    .map(|(&th, &xi)| family.log_partition(th) - xi * th)
                    .sum::<T>()
                    / n
            }
            Prepared::Hinge { x, k } => {
                let n = T::of_usize(x.len());
                theta
                    .iter()
                    .zip(x)
                    .map(|(&th, &xi)| hinge(xi * th, *k))
                    .sum::<T>()
                    / n
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("empirical loss"))
        }
    }

    /// Gradient (a subgradient with `f'(1) = 0` for the hinge).
    pub fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        self.check_theta(theta)?;
        let g = match &self.prepared {
            Prepared::Mle { family, t_hat } => theta
                .iter()
                .zip(t_hat)
                .map(|(&th, &t)| family.mean(th) - t)
                .collect(),
            Prepared::Linear {
                family, design, y, ..
            } => {
                let n = T::of_usize(y.len());
                let resid: Vec<T> = design
                    .matvec(theta)
                    .iter()
                    .zip(y)
                    .map(|(&v, &yi)| (family.mean(v) - yi) / n)
                    .collect();
                design.tmatvec(&resid)
            }
            Prepared::Entrywise { family, x } => {
                let n = T::of_usize(x.len());
                theta
                    .iter()
                    .zip(x)
                    .map(|(&th, &xi)| (family.mean(th) - xi) / n)
                    .collect()
            }
            Prepared::Hinge { x, k } => {
                let n = T::of_usize(x.len());
                theta
                    .iter()
                    .zip(x)
                    .map(|(&th, &xi)| xi * hinge_slope(xi * th, *k) / n)
                    .collect()
            }
        };
        Ok(g)
    }

    /// Lower bound on the strong-convexity modulus of the loss over the
    /// Euclidean ball of `radius` around `theta`. Zero for the hinge and for
    /// rank-deficient designs.
    pub fn strong_convexity(&self, theta: &[T], radius: T) -> T {
        match &self.prepared {
            Prepared::Mle { family, .. } => theta
                .iter()
                .map(|&th| family.min_curvature(th.abs() + radius))
                .fold(T::infinity(), T::min),
            Prepared::Entrywise { family, x } => {
                let n = T::of_usize(x.len());
                theta
                    .iter()
                    .map(|&th| family.min_curvature(th.abs() + radius))
                    .fold(T::infinity(), T::min)
                    / n
            }
            Prepared::Linear {
                family,
                design,
                min_gram_eig,
                ..
            } => {
                let eig = *min_gram_eig.get_or_init(|| {
                    if design.rows() < design.cols() {
                        return T::zero();
                    }
                    let s = design.singular_values();
                    let smin = *s.last().unwrap_or(&T::zero());
                    smin * smin / T::of_usize(design.rows())
                });
                if eig <= T::zero() {
                    return T::zero();
                }
                let nu = design.matvec(theta);
                let w = (0..design.rows())
                    .map(|i| {
                        let reach = crate::scalar::norm2(design.row(i)) * radius;
                        family.min_curvature(nu[i].abs() + reach)
                    })
                    .fold(T::infinity(), T::min);
                w * eig
            }
            Prepared::Hinge { .. } => T::zero(),
        }
    }
}

fn mean_rows<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let n = T::of_usize(m.rows());
    let mut acc = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a = *a + v;
        }
    }
    acc.into_iter().map(|a| a / n).collect()
}

#[inline]
pub(crate) fn hinge<T: Scalar>(z: T, k: T) -> T {
    k * (T::one() - z).max(T::zero())
}

#[inline]
fn hinge_slope<T: Scalar>(z: T, k: T) -> T {
    if z < T::one() {
        -k
    } else {
        T::zero()
    }
}

/// Empirical loss of `theta` on `data`.
pub fn empirical_loss<T: Scalar>(
    spec: &ProblemSpec<T>,
    theta: &Hypothesis<T>,
    data: &Dataset<T>,
    perturbed: bool,
) -> Result<T> {
    check_shape(spec, theta)?;
    EmpiricalLoss::new(spec, data, perturbed)?.value(theta.values())
}

/// Gradient of [`empirical_loss`] with respect to `theta`.
pub fn loss_gradient<T: Scalar>(
    spec: &ProblemSpec<T>,
    theta: &Hypothesis<T>,
    data: &Dataset<T>,
    perturbed: bool,
) -> Result<Hypothesis<T>> {
    check_shape(spec, theta)?;
    let g = EmpiricalLoss::new(spec, data, perturbed)?.gradient(theta.values())?;
    Ok(theta.with_values(g))
}

fn check_shape<T: Scalar>(spec: &ProblemSpec<T>, theta: &Hypothesis<T>) -> Result<()> {
    if theta.shape() != spec.shape() {
        return Err(shape_err(spec.shape(), theta.shape()));
    }
    Ok(())
}

/// Expected loss `L(theta)` under the generative law of `spec`, in closed form.
pub fn expected_loss<T: Scalar>(spec: &ProblemSpec<T>, theta: &Hypothesis<T>) -> Result<T> {
    check_shape(spec, theta)?;
    let th = theta.values();
    let v = match spec {
        ProblemSpec::Mle { family, .. } => {
            let t = spec.expected_statistic();
            th.iter()
                .zip(&t)
                .map(|(&x, &m)| family.log_partition(x) - m * x)
                .sum()
        }
        ProblemSpec::Glm { family, .. } | ProblemSpec::Nonparam { family, .. } => {
            let design = spec.design().expect("linear class");
            let mu = spec.expected_statistic();
            let nu = design.matvec(th);
            let n = T::of_usize(nu.len());
            nu.iter()
                .zip(&mu)
                .map(|(&v, &m)| family.log_partition(v) - m * v)
                .sum::<T>()
                / n
        }
        ProblemSpec::Pca { family, .. } => {
            let mu = spec.expected_statistic();
            let n = T::of_usize(mu.len());
            th.iter()
                .zip(&mu)
                .map(|(&x, &m)| family.log_partition(x) - m * x)
                .sum::<T>()
                / n
        }
        ProblemSpec::MaxMargin {
            prob_plus,
            lipschitz_k,
        } => expected_hinge(th, prob_plus.as_slice(), *lipschitz_k),
    };
    Ok(v)
}

/// `(1/n) sum_ij p_ij f(theta_ij) + (1 - p_ij) f(-theta_ij)`.
pub(crate) fn expected_hinge<T: Scalar>(theta: &[T], prob_plus: &[T], k: T) -> T {
    let n = T::of_usize(theta.len());
    theta
        .iter()
        .zip(prob_plus)
        .map(|(&t, &p)| p * hinge(t, k) + (T::one() - p) * hinge(-t, k))
        .sum::<T>()
        / n
}

/// Sample budget of [`expected_loss_monte_carlo`] when none is given.
pub const MONTE_CARLO_BUDGET: usize = 100_000;

/// Monte Carlo estimate of `L(theta)` and its standard error, averaging the
/// empirical loss over `draws` independent datasets.
pub fn expected_loss_monte_carlo<T: Scalar>(
    spec: &ProblemSpec<T>,
    theta: &Hypothesis<T>,
    draws: usize,
    seed: u64,
) -> Result<(T, T)> {
    check_shape(spec, theta)?;
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least 2 draws".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let (mut mean, mut m2) = (0.0_f64, 0.0_f64);
    for k in 0..draws {
        let data = sample_data(spec, &mut rng);
        let v = empirical_loss(spec, theta, &data, false)?.to_f64_lossy();
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    let var = m2 / (draws - 1) as f64;
    Ok((T::of(mean), T::of((var / draws as f64).sqrt())))
}

/// Helper: `<a, b>` over hypotheses of the same shape.
pub fn inner<T: Scalar>(a: &Hypothesis<T>, b: &Hypothesis<T>) -> T {
    dot(a.values(), b.values())
}
