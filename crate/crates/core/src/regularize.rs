//! Super-scale regularizers: values `R(theta)`, scale functions `c(theta)`,
//! the lower-bounding functions `r(z)` with `r(c(theta)) <= R(theta)`, and
//! proximal operators.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exp_family::{Hypothesis, NormTag, Shape};
use crate::linalg::Matrix;
use crate::scalar::{norm1, norm2, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L1,
    Tikhonov,
    ElasticNet,
    GroupL12,
    TraceNorm,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::L1 => "l1",
            RegularizerKind::Tikhonov => "tikhonov",
            RegularizerKind::ElasticNet => "elastic_net",
            RegularizerKind::GroupL12 => "group_l12",
            RegularizerKind::TraceNorm => "trace_norm",
        }
    }

    /// Norm used as the scale function `c`.
    pub fn norm_tag(self) -> NormTag {
        match self {
            RegularizerKind::L1 | RegularizerKind::ElasticNet => NormTag::L1,
            RegularizerKind::Tikhonov => NormTag::L2,
            RegularizerKind::GroupL12 => NormTag::GroupL12,
            RegularizerKind::TraceNorm => NormTag::Nuclear,
        }
    }

    /// `r(z)`: `z^2 + 1/4` for Tikhonov, `z` otherwise. Elastic net pairs the
    /// l1 scale with `r(z) = z`, since `||theta||_1^2` can exceed
    /// `||theta||_1 + ||theta||_2^2`.
    pub fn lower_bound<T: Scalar>(self, z: T) -> T {
        match self {
            RegularizerKind::Tikhonov => z * z + T::of(0.25),
            _ => z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    /// Partition of the (row-major) coordinates, `group_l12` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind) -> Self {
        Self { kind, groups: None }
    }

    pub fn l1() -> Self {
        Self::new(RegularizerKind::L1)
    }

    pub fn tikhonov() -> Self {
        Self::new(RegularizerKind::Tikhonov)
    }

    pub fn elastic_net() -> Self {
        Self::new(RegularizerKind::ElasticNet)
    }

    pub fn trace_norm() -> Self {
        Self::new(RegularizerKind::TraceNorm)
    }

    pub fn group_l12(groups: Vec<Vec<usize>>) -> Result<Self> {
        let p = groups.iter().map(Vec::len).sum();
        let s = Self {
            kind: RegularizerKind::GroupL12,
            groups: Some(groups),
        };
        s.validate(p)?;
        Ok(s)
    }

    /// Checks the spec against a hypothesis with `p` entries.
    pub fn validate(&self, p: usize) -> Result<()> {
        match (&self.groups, self.kind) {
            (None, RegularizerKind::GroupL12) => Err(Error::InvalidParameter(
                "group_l12 needs a partition of the coordinates".into(),
            )),
            (Some(_), k) if k != RegularizerKind::GroupL12 => Err(Error::InvalidParameter(
                format!("groups given for {}", k.name()),
            )),
            (Some(groups), _) => {
                let mut seen = vec![false; p];
                for &j in groups.iter().flatten() {
                    if j >= p || seen[j] {
                        return Err(Error::InvalidParameter(format!(
                            "groups must be a disjoint cover of 0..{p} (offending index {j})"
                        )));
                    }
                    seen[j] = true;
                }
                if seen.iter().any(|s| !s) || groups.iter().any(Vec::is_empty) {
                    return Err(Error::InvalidParameter(format!(
                        "groups must be a disjoint cover of 0..{p} by nonempty sets"
                    )));
                }
                Ok(())
            }
            (None, _) => Ok(()),
        }
    }

    fn check<T: Scalar>(&self, theta: &Hypothesis<T>) -> Result<()> {
        if self.kind == RegularizerKind::TraceNorm && !matches!(theta.shape(), Shape::Matrix(..)) {
            return Err(shape_err("matrix hypothesis for trace_norm", theta.shape()));
        }
        self.validate(theta.values().len()).map_err(|e| match e {
            Error::InvalidParameter(msg) => shape_err(msg, theta.shape()),
            other => other,
        })
    }

    fn group_norm<T: Scalar>(&self, v: &[T]) -> T {
        self.groups
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&j| v[j] * v[j]).sum::<T>().sqrt())
            .sum()
    }
}

fn nuclear<T: Scalar>(theta: &Hypothesis<T>) -> T {
    theta
        .as_matrix()
        .map(|m| m.singular_values().into_iter().sum())
        .unwrap_or_else(T::nan)
}

/// `R(theta)`.
pub fn reg_value<T: Scalar>(reg: &RegularizerSpec, theta: &Hypothesis<T>) -> Result<T> {
    reg.check(theta)?;
    let v = theta.values();
    let quarter = T::of(0.25);
    Ok(match reg.kind {
        RegularizerKind::L1 => norm1(v),
        RegularizerKind::Tikhonov => sq(v) + quarter,
        RegularizerKind::ElasticNet => norm1(v) + sq(v) + quarter,
        RegularizerKind::GroupL12 => reg.group_norm(v),
        RegularizerKind::TraceNorm => nuclear(theta),
    })
}

/// Scale function `c(theta)`, the norm paired with the regularizer.
pub fn scale<T: Scalar>(reg: &RegularizerSpec, theta: &Hypothesis<T>) -> Result<T> {
    reg.check(theta)?;
    let v = theta.values();
    Ok(match reg.kind {
        RegularizerKind::L1 | RegularizerKind::ElasticNet => norm1(v),
        RegularizerKind::Tikhonov => norm2(v),
        RegularizerKind::GroupL12 => reg.group_norm(v),
        RegularizerKind::TraceNorm => nuclear(theta),
    })
}

fn sq<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum()
}

#[inline]
fn soft<T: Scalar>(x: T, t: T) -> T {
    x.signum() * (x.abs() - t).max(T::zero())
}

/// `argmin_theta t R(theta) + 1/2 ||theta - v||_2^2` (Frobenius for matrices).
pub fn prox<T: Scalar>(reg: &RegularizerSpec, v: &Hypothesis<T>, t: T) -> Result<Hypothesis<T>> {
    if !(t > T::zero()) || !t.is_finite() {
        return Err(Error::InvalidParameter("prox step must be positive".into()));
    }
    reg.check(v)?;
    let x = v.values();
    let out: Vec<T> = match reg.kind {
        RegularizerKind::L1 => x.iter().map(|&a| soft(a, t)).collect(),
        RegularizerKind::Tikhonov => {
            let d = T::one() + T::two() * t;
            x.iter().map(|&a| a / d).collect()
        }
        RegularizerKind::ElasticNet => {
            let d = T::one() + T::two() * t;
            x.iter().map(|&a| soft(a, t) / d).collect()
        }
        RegularizerKind::GroupL12 => {
            let mut out = x.to_vec();
            for g in reg.groups.iter().flatten() {
                let nrm = g.iter().map(|&j| x[j] * x[j]).sum::<T>().sqrt();
                let f = if nrm > t {
                    T::one() - t / nrm
                } else {
                    T::zero()
                };
                for &j in g {
                    out[j] = x[j] * f;
                }
            }
            out
        }
        RegularizerKind::TraceNorm => {
            let m: Matrix<T> = v.as_matrix().expect("checked matrix shape");
            let svd = m.svd();
            let s: Vec<T> = svd
                .singular_values
                .iter()
                .map(|&s| (s - t).max(T::zero()))
                .collect();
            svd.recompose(&s).into_vec()
        }
    };
    Ok(v.with_values(out).with_norm(reg.kind.norm_tag()))
}
