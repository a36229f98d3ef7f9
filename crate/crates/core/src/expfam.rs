//! Gaussian exponential families in natural (λ) and expectation (μ) coordinates.
//!
//! Four families are supported:
//!
//! | family           | λ                | μ                    |
//! |------------------|------------------|----------------------|
//! | `IsotropicUnit`  | `m`              | `m`                  |
//! | `FixedPrecision` | `S m` (S fixed)  | `m`                  |
//! | `DiagPrecision`  | `(s∘m, -s/2)`    | `(m, m² + 1/s)`      |
//! | `FullPrecision`  | `(S m, -S/2)`    | `(m, m mᵀ + S⁻¹)`    |
//!
//! Natural parameters are stored as the Gaussian mean and precision, and converted to the
//! ambient coordinates only at the boundary ([`FamilyDescriptor::natural_coords`]). Ambient
//! λ-shaped vectors are represented by [`DualVec`], whose second block is stored as the
//! matrix `V` (or vector `u`) with ambient value `-V/2`. A `DualVec` carries no positivity
//! requirement.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_opt_matrix, serde_vector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    IsotropicUnit,
    FixedPrecision,
    DiagPrecision,
    FullPrecision,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::IsotropicUnit => "isotropic",
            FamilyKind::FixedPrecision => "fixed",
            FamilyKind::DiagPrecision => "diag",
            FamilyKind::FullPrecision => "full",
        }
    }
}

/// Which Gaussian family a parameter belongs to, together with its fixed hyperstructure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyDescriptor {
    pub kind: FamilyKind,
    pub dim: usize,
    #[serde(default, with = "serde_opt_matrix", skip_serializing_if = "Option::is_none")]
    pub fixed_precision: Option<DMatrix<f64>>,
}

/// Natural parameter, stored as the mean and (where not fixed by the family) the precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NatParam {
    Full {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
        #[serde(rename = "S", with = "serde_matrix")]
        s: DMatrix<f64>,
    },
    Diag {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
        #[serde(with = "serde_vector")]
        s: DVector<f64>,
    },
    /// Isotropic and fixed-precision families: only the mean varies.
    Mean {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
    },
}

/// Expectation parameter `E_q[T(θ)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExpParam {
    Full {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
        #[serde(with = "serde_matrix")]
        m2: DMatrix<f64>,
    },
    Diag {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
        #[serde(with = "serde_vector")]
        m2: DVector<f64>,
    },
    Mean {
        #[serde(with = "serde_vector")]
        m: DVector<f64>,
    },
}

/// A vector in the ambient λ layout: `(v)`, `(v, -u/2)` or `(v, -V/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DualVec {
    Full {
        #[serde(with = "serde_vector")]
        v: DVector<f64>,
        #[serde(rename = "V", with = "serde_matrix")]
        big_v: DMatrix<f64>,
    },
    Diag {
        #[serde(with = "serde_vector")]
        v: DVector<f64>,
        #[serde(with = "serde_vector")]
        u: DVector<f64>,
    },
    Vector {
        #[serde(with = "serde_vector")]
        v: DVector<f64>,
    },
}

impl NatParam {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            NatParam::Full { m, .. } | NatParam::Diag { m, .. } | NatParam::Mean { m } => m,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }
}

impl ExpParam {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            ExpParam::Full { m, .. } | ExpParam::Diag { m, .. } | ExpParam::Mean { m } => m,
        }
    }

    /// `self - other` in ambient coordinates, expressed in the `DualVec` storage convention
    /// (second block `w` stored as `-2w`).
    pub fn ambient_sub(&self, other: &ExpParam) -> Result<DualVec> {
        match (self, other) {
            (ExpParam::Mean { m: a }, ExpParam::Mean { m: b }) => Ok(DualVec::Vector { v: a - b }),
            (ExpParam::Diag { m: a, m2: a2 }, ExpParam::Diag { m: b, m2: b2 }) => Ok(DualVec::Diag {
                v: a - b,
                u: (a2 - b2) * -2.0,
            }),
            (ExpParam::Full { m: a, m2: a2 }, ExpParam::Full { m: b, m2: b2 }) => Ok(DualVec::Full {
                v: a - b,
                big_v: (a2 - b2) * -2.0,
            }),
            _ => Err(Error::FamilyMismatch("expectation parameters differ in layout".into())),
        }
    }

    pub fn max_abs_diff(&self, other: &ExpParam) -> Result<f64> {
        Ok(self.ambient_sub(other)?.ambient_norm_inf())
    }
}

impl DualVec {
    pub fn first(&self) -> &DVector<f64> {
        match self {
            DualVec::Full { v, .. } | DualVec::Diag { v, .. } | DualVec::Vector { v } => v,
        }
    }

    pub fn layout_name(&self) -> &'static str {
        match self {
            DualVec::Full { .. } => "full",
            DualVec::Diag { .. } => "diag",
            DualVec::Vector { .. } => "vector",
        }
    }

    fn same_layout(&self, other: &DualVec) -> Result<()> {
        let ok = match (self, other) {
            (DualVec::Vector { v: a }, DualVec::Vector { v: b }) => a.len() == b.len(),
            (DualVec::Diag { v: a, .. }, DualVec::Diag { v: b, .. }) => a.len() == b.len(),
            (DualVec::Full { v: a, .. }, DualVec::Full { v: b, .. }) => a.len() == b.len(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::FamilyMismatch(format!(
                "dual layouts {}[{}] and {}[{}]",
                self.layout_name(),
                self.first().len(),
                other.layout_name(),
                other.first().len()
            )))
        }
    }

    pub fn scale(&self, a: f64) -> DualVec {
        match self {
            DualVec::Vector { v } => DualVec::Vector { v: v * a },
            DualVec::Diag { v, u } => DualVec::Diag { v: v * a, u: u * a },
            DualVec::Full { v, big_v } => DualVec::Full {
                v: v * a,
                big_v: big_v * a,
            },
        }
    }

    /// `a * self + y`.
    pub fn axpy(&self, a: f64, y: &DualVec) -> Result<DualVec> {
        self.same_layout(y)?;
        Ok(match (self, y) {
            (DualVec::Vector { v: x }, DualVec::Vector { v: w }) => DualVec::Vector { v: x * a + w },
            (DualVec::Diag { v: x, u: xu }, DualVec::Diag { v: w, u: wu }) => DualVec::Diag {
                v: x * a + w,
                u: xu * a + wu,
            },
            (DualVec::Full { v: x, big_v: xv }, DualVec::Full { v: w, big_v: wv }) => DualVec::Full {
                v: x * a + w,
                big_v: xv * a + wv,
            },
            _ => unreachable!("layout checked above"),
        })
    }

    pub fn add(&self, y: &DualVec) -> Result<DualVec> {
        self.axpy(1.0, y)
    }

    pub fn sub(&self, y: &DualVec) -> Result<DualVec> {
        y.axpy(-1.0, self)
    }

    pub fn zeros_like(&self) -> DualVec {
        self.scale(0.0)
    }

    /// Flat view of the stored numbers (first block, then second block, column-major).
    pub fn as_flat(&self) -> Vec<f64> {
        match self {
            DualVec::Vector { v } => v.as_slice().to_vec(),
            DualVec::Diag { v, u } => v.iter().chain(u.iter()).copied().collect(),
            DualVec::Full { v, big_v } => v.iter().chain(big_v.iter()).copied().collect(),
        }
    }

    /// Rebuilds a dual vector of the same layout from a flat buffer produced by [`as_flat`].
    ///
    /// [`as_flat`]: DualVec::as_flat
    pub fn with_flat(&self, flat: &[f64]) -> DualVec {
        let d = self.first().len();
        match self {
            DualVec::Vector { .. } => DualVec::Vector {
                v: DVector::from_column_slice(&flat[..d]),
            },
            DualVec::Diag { .. } => DualVec::Diag {
                v: DVector::from_column_slice(&flat[..d]),
                u: DVector::from_column_slice(&flat[d..2 * d]),
            },
            DualVec::Full { .. } => DualVec::Full {
                v: DVector::from_column_slice(&flat[..d]),
                big_v: DMatrix::from_column_slice(d, d, &flat[d..d + d * d]),
            },
        }
    }

    /// Max-norm of the ambient coordinates (second block scaled by `-1/2`).
    pub fn ambient_norm_inf(&self) -> f64 {
        match self {
            DualVec::Vector { v } => linalg::max_abs_vec(v),
            DualVec::Diag { v, u } => linalg::max_abs_vec(v).max(0.5 * linalg::max_abs_vec(u)),
            DualVec::Full { v, big_v } => linalg::max_abs_vec(v).max(0.5 * linalg::max_abs_mat(big_v)),
        }
    }

    /// Ambient inner product `<self, μ>`.
    pub fn inner(&self, mu: &ExpParam) -> Result<f64> {
        match (self, mu) {
            (DualVec::Vector { v }, ExpParam::Mean { m }) => Ok(v.dot(m)),
            (DualVec::Diag { v, u }, ExpParam::Diag { m, m2 }) => Ok(v.dot(m) - 0.5 * u.dot(m2)),
            (DualVec::Full { v, big_v }, ExpParam::Full { m, m2 }) => {
                Ok(v.dot(m) - 0.5 * big_v.component_mul(m2).sum())
            }
            _ => Err(Error::FamilyMismatch("dual/expectation layouts differ".into())),
        }
    }

    /// `<self, T(θ)>` for a single parameter draw.
    pub fn inner_stat(&self, theta: &DVector<f64>) -> f64 {
        match self {
            DualVec::Vector { v } => v.dot(theta),
            DualVec::Diag { v, u } => {
                v.dot(theta) - 0.5 * u.iter().zip(theta.iter()).map(|(a, t)| a * t * t).sum::<f64>()
            }
            DualVec::Full { v, big_v } => v.dot(theta) - 0.5 * (big_v * theta).dot(theta),
        }
    }
}

/// `a * x + y`.
pub fn dual_axpy(a: f64, x: &DualVec, y: &DualVec) -> Result<DualVec> {
    x.axpy(a, y)
}

/// Sum in index order with per-coordinate compensated summation.
pub fn dual_sum<'a>(items: impl IntoIterator<Item = &'a DualVec>) -> Result<Option<DualVec>> {
    let items: Vec<&DualVec> = items.into_iter().collect();
    let Some(first) = items.first() else {
        return Ok(None);
    };
    for it in &items[1..] {
        first.same_layout(it)?;
    }
    let flats: Vec<Vec<f64>> = items.iter().map(|d| d.as_flat()).collect();
    let len = flats[0].len();
    let summed = linalg::compensated_sum_slices(len, flats.iter().map(Vec::as_slice));
    Ok(Some(first.with_flat(&summed)))
}

impl FamilyDescriptor {
    pub fn isotropic(dim: usize) -> Self {
        FamilyDescriptor {
            kind: FamilyKind::IsotropicUnit,
            dim,
            fixed_precision: None,
        }
    }

    pub fn fixed(precision: DMatrix<f64>) -> Result<Self> {
        let f = FamilyDescriptor {
            kind: FamilyKind::FixedPrecision,
            dim: precision.nrows(),
            fixed_precision: Some(precision),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn diag(dim: usize) -> Self {
        FamilyDescriptor {
            kind: FamilyKind::DiagPrecision,
            dim,
            fixed_precision: None,
        }
    }

    pub fn full(dim: usize) -> Self {
        FamilyDescriptor {
            kind: FamilyKind::FullPrecision,
            dim,
            fixed_precision: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidFamily("dimension must be at least 1".into()));
        }
        match (self.kind, &self.fixed_precision) {
            (FamilyKind::FixedPrecision, Some(p)) => {
                if p.nrows() != self.dim || p.ncols() != self.dim {
                    return Err(Error::InvalidFamily("fixed precision has the wrong shape".into()));
                }
                check_symmetric(p)?;
                linalg::cholesky(p)
                    .map_err(|_| Error::InvalidFamily("fixed precision is not positive definite".into()))?;
                Ok(())
            }
            (FamilyKind::FixedPrecision, None) => {
                Err(Error::InvalidFamily("fixed-precision family needs a precision".into()))
            }
            (_, Some(_)) => Err(Error::InvalidFamily(
                "only the fixed-precision family carries a precision".into(),
            )),
            _ => Ok(()),
        }
    }

    fn fixed_prec(&self) -> &DMatrix<f64> {
        self.fixed_precision.as_ref().expect("validated fixed-precision family")
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got == self.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                got,
            })
        }
    }

    /// Checks that `lambda` has this family's layout and satisfies the precision invariants.
    pub fn check(&self, lambda: &NatParam) -> Result<()> {
        self.check_dim(lambda.dim())?;
        match (self.kind, lambda) {
            (FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision, NatParam::Mean { .. }) => Ok(()),
            (FamilyKind::DiagPrecision, NatParam::Diag { s, .. }) => {
                self.check_dim(s.len())?;
                if let Some(i) = s.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(Error::NonPositivePrecision(format!("s[{i}] = {}", s[i])));
                }
                Ok(())
            }
            (FamilyKind::FullPrecision, NatParam::Full { s, .. }) => {
                check_symmetric(s)?;
                linalg::cholesky(s).map(|_| ())
            }
            _ => Err(Error::FamilyMismatch(format!(
                "parameter does not belong to the {} family",
                self.kind.name()
            ))),
        }
    }

    fn check_dual(&self, d: &DualVec) -> Result<()> {
        self.check_dim(d.first().len())?;
        let ok = matches!(
            (self.kind, d),
            (
                FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision,
                DualVec::Vector { .. }
            ) | (FamilyKind::DiagPrecision, DualVec::Diag { .. })
                | (FamilyKind::FullPrecision, DualVec::Full { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(Error::FamilyMismatch(format!(
                "{} dual vector for the {} family",
                d.layout_name(),
                self.kind.name()
            )))
        }
    }

    /// Builds a valid natural parameter from a mean and a precision given as a full matrix;
    /// the diagonal family keeps only the diagonal and the fixed families ignore it.
    pub fn from_mean_precision(&self, m: DVector<f64>, precision: &DMatrix<f64>) -> Result<NatParam> {
        let lambda = match self.kind {
            FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision => NatParam::Mean { m },
            FamilyKind::DiagPrecision => NatParam::Diag {
                m,
                s: precision.diagonal(),
            },
            FamilyKind::FullPrecision => NatParam::Full {
                m,
                s: precision.clone(),
            },
        };
        self.check(&lambda)?;
        Ok(lambda)
    }

    /// Isotropic Gaussian `N(mean, I/precision)` expressed in this family.
    pub fn isotropic_member(&self, mean: DVector<f64>, precision: f64) -> Result<NatParam> {
        let p = DMatrix::identity(self.dim, self.dim) * precision;
        self.from_mean_precision(mean, &p)
    }

    /// Precision matrix of `q_λ` as a dense matrix.
    pub fn precision_matrix(&self, lambda: &NatParam) -> Result<DMatrix<f64>> {
        self.check(lambda)?;
        Ok(match lambda {
            NatParam::Mean { .. } => match self.kind {
                FamilyKind::IsotropicUnit => DMatrix::identity(self.dim, self.dim),
                _ => self.fixed_prec().clone(),
            },
            NatParam::Diag { s, .. } => DMatrix::from_diagonal(s),
            NatParam::Full { s, .. } => s.clone(),
        })
    }

    /// λ in ambient coordinates.
    pub fn natural_coords(&self, lambda: &NatParam) -> Result<DualVec> {
        self.check_dim(lambda.dim())?;
        match (self.kind, lambda) {
            (FamilyKind::IsotropicUnit, NatParam::Mean { m }) => Ok(DualVec::Vector { v: m.clone() }),
            (FamilyKind::FixedPrecision, NatParam::Mean { m }) => Ok(DualVec::Vector {
                v: self.fixed_prec() * m,
            }),
            (FamilyKind::DiagPrecision, NatParam::Diag { m, s }) => Ok(DualVec::Diag {
                v: s.component_mul(m),
                u: s.clone(),
            }),
            (FamilyKind::FullPrecision, NatParam::Full { m, s }) => Ok(DualVec::Full {
                v: s * m,
                big_v: s.clone(),
            }),
            _ => Err(Error::FamilyMismatch(format!(
                "parameter does not belong to the {} family",
                self.kind.name()
            ))),
        }
    }

    /// Inverse of [`natural_coords`]; fails with `NonPositivePrecision` when the second block
    /// does not encode a positive (definite) precision.
    ///
    /// [`natural_coords`]: FamilyDescriptor::natural_coords
    pub fn from_natural_coords(&self, coords: &DualVec) -> Result<NatParam> {
        self.check_dual(coords)?;
        if coords.as_flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonPositivePrecision("non-finite natural parameter".into()));
        }
        match coords {
            DualVec::Vector { v } => match self.kind {
                FamilyKind::IsotropicUnit => Ok(NatParam::Mean { m: v.clone() }),
                _ => {
                    let chol = linalg::cholesky(self.fixed_prec())?;
                    Ok(NatParam::Mean { m: chol.solve(v) })
                }
            },
            DualVec::Diag { v, u } => {
                if let Some(i) = u.iter().position(|x| !(*x > 0.0)) {
                    return Err(Error::NonPositivePrecision(format!("s[{i}] = {}", u[i])));
                }
                Ok(NatParam::Diag {
                    m: v.component_div(u),
                    s: u.clone(),
                })
            }
            DualVec::Full { v, big_v } => {
                let s = linalg::symmetrize(big_v);
                let chol = linalg::cholesky(&s)?;
                Ok(NatParam::Full { m: chol.solve(v), s })
            }
        }
    }

    /// `μ = ∇A(λ) = E_q[T(θ)]`.
    pub fn to_expectation(&self, lambda: &NatParam) -> Result<ExpParam> {
        self.check(lambda)?;
        Ok(match lambda {
            NatParam::Mean { m } => ExpParam::Mean { m: m.clone() },
            NatParam::Diag { m, s } => ExpParam::Diag {
                m: m.clone(),
                m2: m.component_mul(m) + s.map(|x| 1.0 / x),
            },
            NatParam::Full { m, s } => {
                let cov = linalg::cholesky(s)?.inverse();
                ExpParam::Full {
                    m: m.clone(),
                    m2: linalg::symmetrize(&(m * m.transpose() + cov)),
                }
            }
        })
    }

    /// `λ = ∇A*(μ)`.
    pub fn to_natural(&self, mu: &ExpParam) -> Result<NatParam> {
        self.check_dim(mu.mean().len())?;
        match (self.kind, mu) {
            (FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision, ExpParam::Mean { m }) => {
                Ok(NatParam::Mean { m: m.clone() })
            }
            (FamilyKind::DiagPrecision, ExpParam::Diag { m, m2 }) => {
                let var = m2 - m.component_mul(m);
                if let Some(i) = var.iter().position(|x| !(*x > 0.0)) {
                    return Err(Error::DegenerateMoment(format!("variance[{i}] = {}", var[i])));
                }
                Ok(NatParam::Diag {
                    m: m.clone(),
                    s: var.map(|x| 1.0 / x),
                })
            }
            (FamilyKind::FullPrecision, ExpParam::Full { m, m2 }) => {
                let cov = linalg::symmetrize(&(m2 - m * m.transpose()));
                let chol = linalg::cholesky(&cov).map_err(|e| Error::DegenerateMoment(e.to_string()))?;
                Ok(NatParam::Full {
                    m: m.clone(),
                    s: linalg::symmetrize(&chol.inverse()),
                })
            }
            _ => Err(Error::FamilyMismatch(format!(
                "expectation parameter does not belong to the {} family",
                self.kind.name()
            ))),
        }
    }

    /// Log-partition `A(λ)` including the `(d/2) log 2π` normalizer.
    pub fn log_partition(&self, lambda: &NatParam) -> Result<f64> {
        self.check(lambda)?;
        let d = self.dim as f64;
        Ok(match lambda {
            NatParam::Mean { m } => match self.kind {
                FamilyKind::IsotropicUnit => 0.5 * m.dot(m) + 0.5 * d * LN_2PI,
                _ => {
                    let p = self.fixed_prec();
                    let chol = linalg::cholesky(p)?;
                    0.5 * (p * m).dot(m) - 0.5 * linalg::log_det(&chol) + 0.5 * d * LN_2PI
                }
            },
            NatParam::Diag { m, s } => m
                .iter()
                .zip(s.iter())
                .map(|(mi, si)| 0.5 * si * mi * mi - 0.5 * si.ln() + 0.5 * LN_2PI)
                .sum(),
            NatParam::Full { m, s } => {
                let chol = linalg::cholesky(s)?;
                0.5 * (s * m).dot(m) - 0.5 * linalg::log_det(&chol) + 0.5 * d * LN_2PI
            }
        })
    }

    /// Log-partition evaluated at raw ambient coordinates.
    pub fn log_partition_coords(&self, coords: &DualVec) -> Result<f64> {
        self.log_partition(&self.from_natural_coords(coords)?)
    }

    /// Log-density of `q_λ` at `theta`.
    pub fn log_density(&self, lambda: &NatParam, theta: &DVector<f64>) -> Result<f64> {
        let eta = self.natural_coords(lambda)?;
        Ok(eta.inner_stat(theta) - self.log_partition(lambda)? + self.log_base_measure(theta))
    }

    /// `log h(θ)`: zero except for the fixed-covariance families, whose quadratic term lives
    /// in the base measure.
    fn log_base_measure(&self, theta: &DVector<f64>) -> f64 {
        match self.kind {
            FamilyKind::IsotropicUnit => -0.5 * theta.dot(theta),
            FamilyKind::FixedPrecision => -0.5 * (self.fixed_prec() * theta).dot(theta),
            _ => 0.0,
        }
    }

    /// `KL(q_a || q_b)`.
    pub fn kl(&self, a: &NatParam, b: &NatParam) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        let d = self.dim as f64;
        Ok(match (a, b) {
            (NatParam::Mean { m: ma }, NatParam::Mean { m: mb }) => {
                let dm = ma - mb;
                match self.kind {
                    FamilyKind::IsotropicUnit => 0.5 * dm.dot(&dm),
                    _ => 0.5 * (self.fixed_prec() * &dm).dot(&dm),
                }
            }
            (NatParam::Diag { m: ma, s: sa }, NatParam::Diag { m: mb, s: sb }) => {
                let mut acc = 0.0;
                for i in 0..self.dim {
                    let dm = ma[i] - mb[i];
                    acc += sb[i] / sa[i] + sb[i] * dm * dm - 1.0 + (sa[i] / sb[i]).ln();
                }
                0.5 * acc
            }
            (NatParam::Full { m: ma, s: sa }, NatParam::Full { m: mb, s: sb }) => {
                let ca = linalg::cholesky(sa)?;
                let cb = linalg::cholesky(sb)?;
                let dm = ma - mb;
                let tr = (sb * ca.inverse()).trace();
                0.5 * (tr + (sb * &dm).dot(&dm) - d + linalg::log_det(&ca) - linalg::log_det(&cb))
            }
            _ => unreachable!("both parameters were checked against the family"),
        })
    }

    /// `∇_μ KL(q_a || q_b) = λ_a - λ_b`.
    pub fn kl_grad_mu(&self, a: &NatParam, b: &NatParam) -> Result<DualVec> {
        self.nat_sub(a, b)
    }

    /// `λ_a - λ_b` in ambient coordinates.
    pub fn nat_sub(&self, a: &NatParam, b: &NatParam) -> Result<DualVec> {
        let la = self.natural_coords(a)?;
        let lb = self.natural_coords(b)?;
        la.sub(&lb)
    }

    /// A zero dual vector with this family's layout.
    pub fn zero_dual(&self) -> DualVec {
        let d = self.dim;
        match self.kind {
            FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision => DualVec::Vector { v: DVector::zeros(d) },
            FamilyKind::DiagPrecision => DualVec::Diag {
                v: DVector::zeros(d),
                u: DVector::zeros(d),
            },
            FamilyKind::FullPrecision => DualVec::Full {
                v: DVector::zeros(d),
                big_v: DMatrix::zeros(d, d),
            },
        }
    }

    /// Standard-normal draws of this family's dimension, deterministic in `seed`.
    pub fn standard_draws(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut rng)))
            .collect()
    }

    /// Maps standard-normal draws to draws from `q_λ`.
    pub fn transform_draws(&self, lambda: &NatParam, z: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        self.check(lambda)?;
        let out = match lambda {
            NatParam::Mean { m } => match self.kind {
                FamilyKind::IsotropicUnit => z.iter().map(|zi| m + zi).collect(),
                _ => {
                    let chol = linalg::cholesky(self.fixed_prec())?;
                    z.iter()
                        .map(|zi| m + linalg::solve_upper_transpose(&chol, zi))
                        .collect()
                }
            },
            NatParam::Diag { m, s } => z.iter().map(|zi| m + zi.zip_map(s, |a, b| a / b.sqrt())).collect(),
            NatParam::Full { m, s } => {
                let chol = linalg::cholesky(s)?;
                z.iter()
                    .map(|zi| m + linalg::solve_upper_transpose(&chol, zi))
                    .collect()
            }
        };
        Ok(out)
    }

    /// Draws `count` parameter vectors from `q_λ`; identical seeds give identical sequences.
    pub fn sample(&self, lambda: &NatParam, seed: u64, count: usize) -> Result<Vec<DVector<f64>>> {
        self.transform_draws(lambda, &self.standard_draws(seed, count))
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonPositivePrecision("precision is not square".into()));
    }
    let scale = linalg::max_abs_mat(m).max(1.0);
    let asym = linalg::max_abs_mat(&(m - m.transpose()));
    if asym > 1e-9 * scale {
        return Err(Error::NonPositivePrecision(format!(
            "precision is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full(m: &[f64], s: &[f64]) -> NatParam {
        let d = m.len();
        NatParam::Full {
            m: DVector::from_column_slice(m),
            s: DMatrix::from_row_slice(d, d, s),
        }
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let fam = FamilyDescriptor::isotropic(d * d);
        let z = &fam.standard_draws(seed, 1)[0];
        let b = DMatrix::from_column_slice(d, d, z.as_slice());
        &b * b.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn full_expectation_matches_closed_form() {
        let fam = FamilyDescriptor::full(2);
        let mu = fam.to_expectation(&full(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let ExpParam::Full { m, m2 } = mu else { panic!() };
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
        assert_eq!(m2, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn isotropic_maps_are_identity() {
        let fam = FamilyDescriptor::isotropic(2);
        let lam = NatParam::Mean { m: DVector::zeros(2) };
        assert_eq!(
            fam.to_expectation(&lam).unwrap(),
            ExpParam::Mean { m: DVector::zeros(2) }
        );
    }

    #[test]
    fn diag_example_coordinates() {
        let fam = FamilyDescriptor::diag(1);
        let lam = NatParam::Diag {
            m: DVector::from_element(1, 2.0),
            s: DVector::from_element(1, 4.0),
        };
        let DualVec::Diag { v, u } = fam.natural_coords(&lam).unwrap() else {
            panic!()
        };
        // ambient second block is -u/2 = -2
        assert_eq!((v[0], -0.5 * u[0]), (8.0, -2.0));
        let ExpParam::Diag { m, m2 } = fam.to_expectation(&lam).unwrap() else {
            panic!()
        };
        assert_eq!((m[0], m2[0]), (2.0, 4.25));
    }

    #[test]
    fn diag_expectation_agrees_with_monte_carlo() {
        let fam = FamilyDescriptor::diag(1);
        let lam = NatParam::Diag {
            m: DVector::from_element(1, 2.0),
            s: DVector::from_element(1, 4.0),
        };
        let xs = fam.sample(&lam, 11, 1_000_000).unwrap();
        let n = xs.len() as f64;
        let e1 = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let e2 = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / n;
        // three significant digits
        assert!((e1 - 2.0).abs() < 5e-3, "{e1}");
        assert!((e2 - 4.25).abs() < 5e-3 * 4.25, "{e2}");
    }

    #[test]
    fn standard_normal_moment_roundtrip() {
        let fam = FamilyDescriptor::diag(1);
        let mu = ExpParam::Diag {
            m: DVector::zeros(1),
            m2: DVector::from_element(1, 1.0),
        };
        let lam = fam.to_natural(&mu).unwrap();
        let DualVec::Diag { v, u } = fam.natural_coords(&lam).unwrap() else {
            panic!()
        };
        assert_eq!((v[0], -0.5 * u[0]), (0.0, -0.5));
    }

    #[test]
    fn degenerate_moment_is_rejected() {
        let fam = FamilyDescriptor::diag(1);
        let mu = ExpParam::Diag {
            m: DVector::from_element(1, 2.0),
            m2: DVector::from_element(1, 4.0),
        };
        assert!(matches!(fam.to_natural(&mu), Err(Error::DegenerateMoment(_))));
        let fam = FamilyDescriptor::full(2);
        let mu = ExpParam::Full {
            m: DVector::from_column_slice(&[1.0, 1.0]),
            m2: DMatrix::from_element(2, 2, 1.0),
        };
        assert!(matches!(fam.to_natural(&mu), Err(Error::DegenerateMoment(_))));
    }

    #[test]
    fn non_positive_precision_is_rejected() {
        let fam = FamilyDescriptor::diag(2);
        let lam = NatParam::Diag {
            m: DVector::zeros(2),
            s: DVector::from_column_slice(&[1.0, 0.0]),
        };
        assert!(matches!(fam.to_expectation(&lam), Err(Error::NonPositivePrecision(_))));
        let fam = FamilyDescriptor::full(2);
        let lam = full(&[0.0, 0.0], &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(fam.to_expectation(&lam), Err(Error::NonPositivePrecision(_))));
    }

    #[test]
    fn log_partition_examples() {
        let fam = FamilyDescriptor::full(2);
        let a = fam.log_partition(&full(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((a - LN_2PI).abs() < 1e-14);
        let fam = FamilyDescriptor::isotropic(1);
        let a = fam
            .log_partition(&NatParam::Mean {
                m: DVector::from_element(1, 3.0),
            })
            .unwrap();
        assert!((a - (4.5 + 0.5 * LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let fam = FamilyDescriptor::isotropic(2);
        let a = NatParam::Mean {
            m: DVector::from_column_slice(&[1.0, 1.0]),
        };
        let b = NatParam::Mean { m: DVector::zeros(2) };
        assert_eq!(fam.kl(&a, &b).unwrap(), 1.0);
        assert_eq!(fam.kl(&a, &a).unwrap(), 0.0);
        let fam = FamilyDescriptor::full(2);
        let c = full(&[1.0, -1.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(fam.kl(&c, &c).unwrap().abs() < 1e-14);
    }

    #[test]
    fn kl_rejects_mixed_families() {
        let fam = FamilyDescriptor::full(1);
        let a = full(&[0.0], &[1.0]);
        let b = NatParam::Mean { m: DVector::zeros(1) };
        assert!(matches!(fam.kl(&a, &b), Err(Error::FamilyMismatch(_))));
    }

    #[test]
    fn kl_diag_matches_monte_carlo() {
        let fam = FamilyDescriptor::diag(2);
        let a = NatParam::Diag {
            m: DVector::from_column_slice(&[0.5, -1.0]),
            s: DVector::from_column_slice(&[2.0, 0.5]),
        };
        let b = NatParam::Diag {
            m: DVector::from_column_slice(&[0.0, 0.0]),
            s: DVector::from_column_slice(&[1.0, 1.0]),
        };
        let xs = fam.sample(&a, 5, 1_000_000).unwrap();
        let vals: Vec<f64> = xs
            .iter()
            .map(|x| fam.log_density(&a, x).unwrap() - fam.log_density(&b, x).unwrap())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let exact = fam.kl(&a, &b).unwrap();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn kl_grad_examples() {
        let fam = FamilyDescriptor::isotropic(1);
        let a = NatParam::Mean {
            m: DVector::from_element(1, 2.0),
        };
        let b = NatParam::Mean {
            m: DVector::from_element(1, 1.0),
        };
        assert_eq!(
            fam.kl_grad_mu(&a, &b).unwrap(),
            DualVec::Vector {
                v: DVector::from_element(1, 1.0)
            }
        );
        assert_eq!(fam.kl_grad_mu(&a, &a).unwrap().ambient_norm_inf(), 0.0);
    }

    /// Finite differences of KL in μ_a, through the inverse dual map, against λ_a - λ_b.
    #[test]
    fn kl_grad_matches_finite_differences_in_mu() {
        let fam = FamilyDescriptor::full(2);
        let a = full(&[0.3, -0.2], &[2.0, 0.4, 0.4, 1.5]);
        let b = full(&[-0.1, 0.5], &[1.0, -0.2, -0.2, 0.8]);
        let grad = fam.kl_grad_mu(&a, &b).unwrap();
        let DualVec::Full { v, big_v } = &grad else { panic!() };
        let ExpParam::Full { m, m2 } = fam.to_expectation(&a).unwrap() else {
            panic!()
        };
        let h = 1e-5;
        let kl_at = |m: &DVector<f64>, m2: &DMatrix<f64>| {
            let lam = fam
                .to_natural(&ExpParam::Full {
                    m: m.clone(),
                    m2: m2.clone(),
                })
                .unwrap();
            fam.kl(&lam, &b).unwrap()
        };
        for i in 0..2 {
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp[i] += h;
            mm[i] -= h;
            let fd = (kl_at(&mp, &m2) - kl_at(&mm, &m2)) / (2.0 * h);
            assert!((fd - v[i]).abs() < 1e-5, "{fd} vs {}", v[i]);
        }
        for i in 0..2 {
            for j in i..2 {
                let mut e = DMatrix::zeros(2, 2);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (kl_at(&m, &(&m2 + &e * h)) - kl_at(&m, &(&m2 - &e * h))) / (2.0 * h);
                // ambient block is -V/2; directional derivative along the symmetric e
                let expected = (-0.5 * big_v).component_mul(&e).sum();
                assert!((fd - expected).abs() < 1e-5, "({i},{j}) {fd} vs {expected}");
            }
        }
    }

    #[test]
    fn dual_arithmetic_examples() {
        let fam = FamilyDescriptor::diag(2);
        let lk = NatParam::Diag {
            m: DVector::from_column_slice(&[1.0, 2.0]),
            s: DVector::from_column_slice(&[2.0, 3.0]),
        };
        let lg = NatParam::Diag {
            m: DVector::from_column_slice(&[0.0, 1.0]),
            s: DVector::from_column_slice(&[1.0, 1.0]),
        };
        assert_eq!(fam.nat_sub(&lk, &lk).unwrap(), fam.zero_dual());
        let x = fam.nat_sub(&lk, &lg).unwrap();
        let y = DualVec::Diag {
            v: DVector::from_column_slice(&[0.5, 0.5]),
            u: DVector::from_column_slice(&[0.1, 0.2]),
        };
        // one dual step with step 0.5: y + 0.5 (λ_k - λ_g)
        let DualVec::Diag { v, u } = dual_axpy(0.5, &x, &y).unwrap() else {
            panic!()
        };
        assert_eq!(v.as_slice(), &[0.5 + 0.5 * 2.0, 0.5 + 0.5 * 5.0]);
        assert_eq!(u.as_slice(), &[0.1 + 0.5, 0.2 + 1.0]);
        assert_eq!(dual_axpy(0.0, &x, &y).unwrap(), y);
        assert!(dual_axpy(1.0, &x, &DualVec::Vector { v: DVector::zeros(2) }).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_centred() {
        let fam = FamilyDescriptor::full(2);
        let lam = full(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let a = fam.sample(&lam, 3, 16).unwrap();
        let b = fam.sample(&lam, 3, 16).unwrap();
        assert_eq!(a, b);
        let n = 1_000_000;
        let xs = fam.sample(&lam, 4, n).unwrap();
        for j in 0..2 {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn diag_sample_variance() {
        let fam = FamilyDescriptor::diag(1);
        let lam = NatParam::Diag {
            m: DVector::zeros(1),
            s: DVector::from_element(1, 4.0),
        };
        let n = 1_000_000;
        let xs = fam.sample(&lam, 9, n).unwrap();
        let var = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / n as f64;
        assert!((var - 0.25).abs() < 0.002, "{var}");
    }

    #[test]
    fn full_sample_covariance_matches_inverse_precision() {
        let fam = FamilyDescriptor::full(2);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let lam = NatParam::Full {
            m: DVector::from_column_slice(&[1.0, -1.0]),
            s: s.clone(),
        };
        let n = 400_000;
        let xs = fam.sample(&lam, 21, n).unwrap();
        let cov = s.try_inverse().unwrap();
        let mut emp = DMatrix::zeros(2, 2);
        for x in &xs {
            let c = x - lam.mean();
            emp += &c * c.transpose();
        }
        emp /= n as f64;
        assert!(linalg::max_abs_mat(&(emp - cov)) < 0.01);
    }

    #[test]
    fn serialization_uses_named_fields() {
        let lam = full(&[1.0, 2.0], &[2.0, 0.0, 0.0, 3.0]);
        let js = serde_json::to_value(&lam).unwrap();
        assert_eq!(js["S"], serde_json::json!([[2.0, 0.0], [0.0, 3.0]]));
        let back: NatParam = serde_json::from_value(js).unwrap();
        assert_eq!(back, lam);
        let d = DualVec::Diag {
            v: DVector::zeros(1),
            u: DVector::from_element(1, 2.0),
        };
        let js = serde_json::to_value(&d).unwrap();
        assert_eq!(js, serde_json::json!({"v": [0.0], "u": [2.0]}));
        let back: DualVec = serde_json::from_value(js).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn fixed_precision_family() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let fam = FamilyDescriptor::fixed(p.clone()).unwrap();
        let lam = NatParam::Mean {
            m: DVector::from_column_slice(&[1.0, -2.0]),
        };
        let coords = fam.natural_coords(&lam).unwrap();
        assert_eq!(coords.first(), &(&p * lam.mean()));
        let back = fam.from_natural_coords(&coords).unwrap();
        assert!(linalg::max_abs_vec(&(back.mean() - lam.mean())) < 1e-14);
        assert!(FamilyDescriptor::fixed(DMatrix::from_row_slice(1, 1, &[-1.0])).is_err());
    }

    fn random_param(fam: &FamilyDescriptor, seed: u64) -> NatParam {
        let d = fam.dim;
        let m = fam.standard_draws(seed, 1).remove(0);
        let spd = random_spd(d, seed + 1000);
        fam.from_mean_precision(m, &spd).unwrap()
    }

    fn families(d: usize) -> Vec<FamilyDescriptor> {
        vec![
            FamilyDescriptor::isotropic(d),
            FamilyDescriptor::fixed(random_spd(d, 77)).unwrap(),
            FamilyDescriptor::diag(d),
            FamilyDescriptor::full(d),
        ]
    }

    fn rel_err(a: &DualVec, b: &DualVec) -> f64 {
        let diff = a.sub(b).unwrap().ambient_norm_inf();
        diff / b.ambient_norm_inf().max(1.0)
    }

    #[test]
    fn full_roundtrip_over_random_spd() {
        let fam = FamilyDescriptor::full(2);
        for seed in 0..100 {
            let lam = random_param(&fam, seed);
            let back = fam.to_natural(&fam.to_expectation(&lam).unwrap()).unwrap();
            let err = rel_err(&fam.natural_coords(&back).unwrap(), &fam.natural_coords(&lam).unwrap());
            assert!(err < 1e-10, "seed {seed}: {err}");
        }
    }

    /// Central differences of the log-partition in ambient coordinates against μ.
    fn check_grad(fam: &FamilyDescriptor, lam: &NatParam) {
        let coords = fam.natural_coords(lam).unwrap();
        let mu = fam.to_expectation(lam).unwrap();
        let flat = coords.as_flat();
        let d = fam.dim;
        let h = 1e-5;
        let eval = |buf: &[f64]| fam.log_partition_coords(&coords.with_flat(buf)).unwrap();
        let mut fd_grad = vec![0.0; flat.len()];
        for (i, g) in fd_grad.iter_mut().enumerate() {
            let mut p = flat.clone();
            let mut q = flat.clone();
            p[i] += h;
            q[i] -= h;
            *g = (eval(&p) - eval(&q)) / (2.0 * h);
        }
        // d/dV of A at ambient block2 = -V/2 is -1/2 μ2 (V assumed symmetric, so perturb
        // single entries, which the symmetrization splits in half)
        for (i, (g, m)) in fd_grad.iter().zip(mu.mean().iter()).enumerate() {
            assert!((g - m).abs() < 1e-6, "mean {i}");
        }
        match &mu {
            ExpParam::Mean { .. } => {}
            ExpParam::Diag { m2, .. } => {
                for i in 0..d {
                    assert!((fd_grad[d + i] + 0.5 * m2[i]).abs() < 1e-6);
                }
            }
            ExpParam::Full { m2, .. } => {
                for c in 0..d {
                    for r in 0..d {
                        let g = fd_grad[d + c * d + r];
                        assert!((g + 0.5 * m2[(r, c)]).abs() < 1e-6, "({r},{c}) {g}");
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn roundtrip_all_families(seed in 0u64..10_000, d in 1usize..5) {
            for fam in families(d) {
                let lam = random_param(&fam, seed);
                let back = fam.to_natural(&fam.to_expectation(&lam).unwrap()).unwrap();
                let err = rel_err(&fam.natural_coords(&back).unwrap(), &fam.natural_coords(&lam).unwrap());
                prop_assert!(err < 1e-10, "{:?} err {}", fam.kind, err);
                let coords = fam.natural_coords(&lam).unwrap();
                let back = fam.from_natural_coords(&coords).unwrap();
                prop_assert!(rel_err(&fam.natural_coords(&back).unwrap(), &coords) < 1e-10);
            }
        }

        #[test]
        fn log_partition_gradient_is_mu(seed in 0u64..10_000, d in 1usize..4) {
            for fam in families(d) {
                check_grad(&fam, &random_param(&fam, seed));
            }
        }

        #[test]
        fn log_partition_is_strictly_convex(seed in 0u64..10_000, d in 1usize..4) {
            for fam in families(d) {
                let a = fam.natural_coords(&random_param(&fam, seed)).unwrap();
                let b = fam.natural_coords(&random_param(&fam, seed + 5000)).unwrap();
                let mid = a.scale(0.5).add(&b.scale(0.5)).unwrap();
                let lhs = fam.log_partition_coords(&mid).unwrap();
                let rhs = 0.5 * fam.log_partition_coords(&a).unwrap()
                    + 0.5 * fam.log_partition_coords(&b).unwrap();
                prop_assert!(lhs < rhs, "{:?}: {} !< {}", fam.kind, lhs, rhs);
            }
        }

        #[test]
        fn kl_nonnegative_zero_at_identity(seed in 0u64..10_000, d in 1usize..4) {
            for fam in families(d) {
                let a = random_param(&fam, seed);
                let b = random_param(&fam, seed + 7);
                prop_assert!(fam.kl(&a, &b).unwrap() > 0.0);
                prop_assert!(fam.kl(&a, &a).unwrap().abs() < 1e-12);
                prop_assert_eq!(fam.kl_grad_mu(&a, &b).unwrap(), fam.nat_sub(&a, &b).unwrap());
            }
        }
    }
}
