//! Client losses, their expected moments under a Gaussian `q`, and natural gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{DualVec, FamilyDescriptor, FamilyKind, NatParam};
use crate::linalg::{self, serde_matrix, serde_vector};

pub const DEFAULT_MC_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `½ θᵀAθ + bᵀθ + offset`.
    Quadratic {
        #[serde(with = "serde_matrix")]
        a: DMatrix<f64>,
        #[serde(with = "serde_vector")]
        b: DVector<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `-<c, T(θ)>`.
    LinearInT { c: DualVec },
    /// Binary cross-entropy with labels in `{0, 1}`, divided by `scale`.
    Logistic {
        #[serde(with = "serde_matrix")]
        x: DMatrix<f64>,
        #[serde(with = "serde_vector")]
        y: DVector<f64>,
        scale: f64,
    },
    /// Softmax cross-entropy over `classes` classes, divided by `scale`. The parameter is
    /// class-major: entry `c * d + j` is the weight of feature `j` for class `c`.
    MulticlassLogistic {
        #[serde(with = "serde_matrix")]
        x: DMatrix<f64>,
        labels: Vec<usize>,
        classes: usize,
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    pub n_examples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Analytic,
    Delta,
    MonteCarlo { count: usize, seed: Option<u64> },
    Reparam { count: usize, seed: Option<u64> },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Analytic => "analytic",
            Estimator::Delta => "delta",
            Estimator::MonteCarlo { .. } => "monte_carlo",
            Estimator::Reparam { .. } => "reparam",
        }
    }

    /// Same estimator with its seed replaced; deterministic estimators are unchanged.
    pub fn reseeded(&self, seed: u64) -> Estimator {
        match *self {
            Estimator::MonteCarlo { count, .. } => Estimator::MonteCarlo {
                count,
                seed: Some(seed),
            },
            Estimator::Reparam { count, .. } => Estimator::Reparam {
                count,
                seed: Some(seed),
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    /// Not computed: the family's natural gradient does not need it.
    None,
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

/// `g ≈ E_q[∇ℓ]` and `H ≈ E_q[∇²ℓ]` (or its diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub g: DVector<f64>,
    pub h: Curvature,
    pub estimator: Estimator,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax probabilities and log-sum-exp of one logit row.
fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (exps.iter().map(|e| e / total).collect(), lse)
}

impl LossSpec {
    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>, n_examples: usize) -> Self {
        LossSpec {
            kind: LossKind::Quadratic { a, b, offset: 0.0 },
            n_examples,
        }
    }

    /// Squared-error loss `½‖Xθ - y‖²`.
    pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        LossSpec {
            kind: LossKind::Quadratic {
                a: x.transpose() * x,
                b: -(x.transpose() * y),
                offset: 0.5 * y.dot(y),
            },
            n_examples: x.nrows(),
        }
    }

    pub fn linear_in_t(c: DualVec) -> Self {
        LossSpec {
            kind: LossKind::LinearInT { c },
            n_examples: 0,
        }
    }

    pub fn logistic(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        let n = x.nrows();
        LossSpec {
            kind: LossKind::Logistic { x, y, scale: 1.0 },
            n_examples: n,
        }
    }

    pub fn multiclass(x: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Self {
        let n = x.nrows();
        LossSpec {
            kind: LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale: 1.0,
            },
            n_examples: n,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LossKind::Quadratic { .. } => "quadratic",
            LossKind::LinearInT { .. } => "linear_in_t",
            LossKind::Logistic { .. } => "logistic",
            LossKind::MulticlassLogistic { .. } => "multiclass_logistic",
        }
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        match &self.kind {
            LossKind::Quadratic { b, .. } => b.len(),
            LossKind::LinearInT { c } => c.first().len(),
            LossKind::Logistic { x, .. } => x.ncols(),
            LossKind::MulticlassLogistic { x, classes, .. } => x.ncols() * classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            LossKind::Quadratic { a, b, .. } => {
                if a.nrows() != b.len() || a.ncols() != b.len() {
                    return Err(Error::DimensionMismatch {
                        expected: b.len(),
                        got: a.nrows(),
                    });
                }
                let asym = linalg::max_abs_mat(&(a - a.transpose()));
                if asym > 1e-9 * linalg::max_abs_mat(a).max(1.0) {
                    return Err(Error::InvalidData("quadratic matrix is not symmetric".into()));
                }
            }
            LossKind::LinearInT { .. } => {}
            LossKind::Logistic { x, y, scale } => {
                if x.nrows() != y.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.nrows(),
                        got: y.len(),
                    });
                }
                if !(*scale > 0.0) {
                    return Err(Error::InvalidConfig(format!("logistic scale {scale} must be positive")));
                }
                if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::InvalidData("binary labels must be 0 or 1".into()));
                }
            }
            LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale,
            } => {
                if x.nrows() != labels.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.nrows(),
                        got: labels.len(),
                    });
                }
                if !(*scale > 0.0) {
                    return Err(Error::InvalidConfig(format!("logistic scale {scale} must be positive")));
                }
                if let Some(l) = labels.iter().find(|l| **l >= *classes) {
                    return Err(Error::InvalidData(format!("label {l} outside {classes} classes")));
                }
            }
        }
        Ok(())
    }

    /// The loss multiplied by `factor > 0`. Temperature `τ` is applied as `scaled(1/τ)`.
    pub fn scaled(&self, factor: f64) -> LossSpec {
        let kind = match &self.kind {
            LossKind::Quadratic { a, b, offset } => LossKind::Quadratic {
                a: a * factor,
                b: b * factor,
                offset: offset * factor,
            },
            LossKind::LinearInT { c } => LossKind::LinearInT { c: c.scale(factor) },
            LossKind::Logistic { x, y, scale } => LossKind::Logistic {
                x: x.clone(),
                y: y.clone(),
                scale: scale / factor,
            },
            LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale,
            } => LossKind::MulticlassLogistic {
                x: x.clone(),
                labels: labels.clone(),
                classes: *classes,
                scale: scale / factor,
            },
        };
        LossSpec {
            kind,
            n_examples: self.n_examples,
        }
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            })
        }
    }

    /// Quadratic part of a `LinearInT` loss as a dense matrix `C`, with `ℓ = ½θᵀCθ - c₁ᵀθ`.
    fn linear_in_t_matrix(c: &DualVec) -> DMatrix<f64> {
        let d = c.first().len();
        match c {
            DualVec::Vector { .. } => DMatrix::zeros(d, d),
            DualVec::Diag { u, .. } => DMatrix::from_diagonal(u),
            DualVec::Full { big_v, .. } => big_v.clone(),
        }
    }

    fn multiclass_logits(x: &DMatrix<f64>, classes: usize, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = x.ncols();
        let w = DMatrix::from_column_slice(d, classes, theta.as_slice());
        x * w
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(match &self.kind {
            LossKind::Quadratic { a, b, offset } => 0.5 * (a * theta).dot(theta) + b.dot(theta) + offset,
            LossKind::LinearInT { c } => -c.inner_stat(theta),
            LossKind::Logistic { x, y, scale } => {
                let z = x * theta;
                linalg::compensated_sum(z.iter().zip(y.iter()).map(|(zi, yi)| softplus(*zi) - yi * zi)) / scale
            }
            LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale,
            } => {
                let z = Self::multiclass_logits(x, *classes, theta);
                let mut acc = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    let row: Vec<f64> = z.row(i).iter().copied().collect();
                    let (_, lse) = softmax(&row);
                    acc += lse - row[l];
                }
                acc / scale
            }
        })
    }

    pub fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        Ok(match &self.kind {
            LossKind::Quadratic { a, b, .. } => a * theta + b,
            LossKind::LinearInT { c } => Self::linear_in_t_matrix(c) * theta - c.first(),
            LossKind::Logistic { x, y, scale } => {
                let z = x * theta;
                let r = DVector::from_fn(z.len(), |i, _| sigmoid(z[i]) - y[i]);
                x.transpose() * r / *scale
            }
            LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale,
            } => {
                let z = Self::multiclass_logits(x, *classes, theta);
                let resid = self.multiclass_residual(&z, labels, *classes);
                let g = x.transpose() * resid / *scale;
                DVector::from_column_slice(g.as_slice())
            }
        })
    }

    /// Unbiased estimate of `∇ℓ(θ)` from the example rows `rows`, scaled by `n / |rows|`.
    /// Losses without per-example structure return the full gradient.
    pub fn minibatch_grad(&self, theta: &DVector<f64>, rows: &[usize]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        match &self.kind {
            LossKind::Logistic { x, y, scale } if !rows.is_empty() => {
                let xb = x.select_rows(rows);
                let z = &xb * theta;
                let r = DVector::from_fn(rows.len(), |i, _| sigmoid(z[i]) - y[rows[i]]);
                let f = x.nrows() as f64 / rows.len() as f64;
                Ok(xb.transpose() * r * (f / scale))
            }
            LossKind::MulticlassLogistic {
                x,
                labels,
                classes,
                scale,
            } if !rows.is_empty() => {
                let xb = x.select_rows(rows);
                let lb: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                let z = Self::multiclass_logits(&xb, *classes, theta);
                let resid = self.multiclass_residual(&z, &lb, *classes);
                let f = x.nrows() as f64 / rows.len() as f64;
                let g = xb.transpose() * resid * (f / scale);
                Ok(DVector::from_column_slice(g.as_slice()))
            }
            _ => self.grad(theta),
        }
    }

    /// Upper bound on the largest Hessian eigenvalue over all `θ`.
    pub fn lipschitz_bound(&self) -> f64 {
        match &self.kind {
            LossKind::Quadratic { a, .. } => a.symmetric_eigenvalues().max().max(0.0),
            LossKind::LinearInT { c } => Self::linear_in_t_matrix(c).symmetric_eigenvalues().max().max(0.0),
            LossKind::Logistic { x, scale, .. } => x.norm_squared() / (4.0 * scale),
            LossKind::MulticlassLogistic { x, scale, .. } => x.norm_squared() / (2.0 * scale),
        }
    }

    /// Number of rows available for minibatching.
    pub fn n_rows(&self) -> usize {
        match &self.kind {
            LossKind::Logistic { x, .. } | LossKind::MulticlassLogistic { x, .. } => x.nrows(),
            _ => 0,
        }
    }

    fn multiclass_residual(&self, z: &DMatrix<f64>, labels: &[usize], classes: usize) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(z.nrows(), classes);
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = z.row(i).iter().copied().collect();
            let (p, _) = softmax(&row);
            for c in 0..classes {
                r[(i, c)] = p[c] - if c == l { 1.0 } else { 0.0 };
            }
        }
        r
    }

    fn multiclass_probs(z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(z.nrows(), z.ncols());
        for i in 0..z.nrows() {
            let row: Vec<f64> = z.row(i).iter().copied().collect();
            let (pi, _) = softmax(&row);
            for (c, v) in pi.into_iter().enumerate() {
                p[(i, c)] = v;
            }
        }
        p
    }

    /// Exact Hessian. For both logistic losses it coincides with the Gauss–Newton matrix.
    pub fn hess(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        Ok(match &self.kind {
            LossKind::Quadratic { a, .. } => a.clone(),
            LossKind::LinearInT { c } => Self::linear_in_t_matrix(c),
            LossKind::Logistic { x, scale, .. } => {
                let z = x * theta;
                let w = z.map(|zi| {
                    let p = sigmoid(zi);
                    p * (1.0 - p)
                });
                weighted_gram(x, &w) / *scale
            }
            LossKind::MulticlassLogistic { x, classes, scale, .. } => {
                let d = x.ncols();
                let k = *classes;
                let p = Self::multiclass_probs(&Self::multiclass_logits(x, k, theta));
                let mut h = DMatrix::zeros(d * k, d * k);
                for c in 0..k {
                    for c2 in c..k {
                        let w = DVector::from_fn(x.nrows(), |i, _| {
                            let pc = p[(i, c)];
                            if c == c2 {
                                pc * (1.0 - pc)
                            } else {
                                -pc * p[(i, c2)]
                            }
                        });
                        let block = weighted_gram(x, &w) / *scale;
                        h.view_mut((c * d, c2 * d), (d, d)).copy_from(&block);
                        if c != c2 {
                            h.view_mut((c2 * d, c * d), (d, d)).copy_from(&block.transpose());
                        }
                    }
                }
                h
            }
        })
    }

    /// Exact Hessian diagonal without forming the full matrix.
    pub fn hess_diag(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        Ok(match &self.kind {
            LossKind::Quadratic { a, .. } => a.diagonal(),
            LossKind::LinearInT { c } => Self::linear_in_t_matrix(c).diagonal(),
            LossKind::Logistic { x, scale, .. } => {
                let z = x * theta;
                let w = z.map(|zi| {
                    let p = sigmoid(zi);
                    p * (1.0 - p)
                });
                x.component_mul(x).transpose() * w / *scale
            }
            LossKind::MulticlassLogistic { x, classes, scale, .. } => {
                let k = *classes;
                let p = Self::multiclass_probs(&Self::multiclass_logits(x, k, theta));
                let w = p.map(|pc| pc * (1.0 - pc));
                let diag = x.component_mul(x).transpose() * w / *scale;
                DVector::from_column_slice(diag.as_slice())
            }
        })
    }

    /// Class-probability rows for a multiclass or binary model at `theta` on the features `x`.
    pub fn predict_proba(&self, x: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        match &self.kind {
            LossKind::Logistic { .. } => {
                let z = x * theta;
                Ok(DMatrix::from_fn(x.nrows(), 2, |i, c| {
                    let p = sigmoid(z[i]);
                    if c == 1 {
                        p
                    } else {
                        1.0 - p
                    }
                }))
            }
            LossKind::MulticlassLogistic { classes, .. } => {
                Ok(Self::multiclass_probs(&Self::multiclass_logits(x, *classes, theta)))
            }
            _ => Err(Error::InvalidConfig(format!(
                "{} losses do not define class probabilities",
                self.kind_name()
            ))),
        }
    }

    fn curvature_at(&self, fam: &FamilyDescriptor, theta: &DVector<f64>) -> Result<Curvature> {
        Ok(match fam.kind {
            FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision => Curvature::None,
            FamilyKind::DiagPrecision => Curvature::Diag(self.hess_diag(theta)?),
            FamilyKind::FullPrecision => Curvature::Full(self.hess(theta)?),
        })
    }

    /// Estimates `E_q[∇ℓ]` and `E_q[∇²ℓ]` under `q_λ`.
    pub fn expected_moments(
        &self,
        fam: &FamilyDescriptor,
        lambda: &NatParam,
        estimator: &Estimator,
    ) -> Result<MomentEstimate> {
        fam.check(lambda)?;
        let m = lambda.mean();
        self.check_theta(m)?;
        let (g, h) = match estimator {
            Estimator::Analytic => match &self.kind {
                LossKind::Quadratic { .. } | LossKind::LinearInT { .. } => {
                    // gradients are affine in θ, so the expectation is the value at the mean
                    (self.grad(m)?, self.curvature_at(fam, m)?)
                }
                _ => {
                    return Err(Error::EstimatorUnsupported {
                        estimator: estimator.name().into(),
                        loss: self.kind_name().into(),
                    })
                }
            },
            Estimator::Delta => (self.grad(m)?, self.curvature_at(fam, m)?),
            Estimator::MonteCarlo { count, seed } => {
                let draws = draws_for(fam, lambda, *count, *seed)?;
                let n = draws.len() as f64;
                let grads: Vec<DVector<f64>> = draws.iter().map(|t| self.grad(t)).collect::<Result<_>>()?;
                let g = mean_vectors(&grads);
                let h = match fam.kind {
                    FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision => Curvature::None,
                    FamilyKind::DiagPrecision => {
                        let hs: Vec<DVector<f64>> = draws.iter().map(|t| self.hess_diag(t)).collect::<Result<_>>()?;
                        Curvature::Diag(mean_vectors(&hs))
                    }
                    FamilyKind::FullPrecision => {
                        let mut acc = DMatrix::zeros(m.len(), m.len());
                        for t in &draws {
                            acc += self.hess(t)?;
                        }
                        Curvature::Full(acc / n)
                    }
                };
                (g, h)
            }
            Estimator::Reparam { count, seed } => {
                let draws = draws_for(fam, lambda, *count, *seed)?;
                let n = draws.len() as f64;
                let grads: Vec<DVector<f64>> = draws.iter().map(|t| self.grad(t)).collect::<Result<_>>()?;
                let g = mean_vectors(&grads);
                let h = match lambda {
                    NatParam::Mean { .. } => Curvature::None,
                    NatParam::Diag { s, .. } => {
                        let mut acc = DVector::zeros(m.len());
                        for (t, gi) in draws.iter().zip(&grads) {
                            acc += gi.component_mul(&(t - m)).component_mul(s);
                        }
                        Curvature::Diag(acc / n)
                    }
                    NatParam::Full { s, .. } => {
                        let mut acc = DMatrix::zeros(m.len(), m.len());
                        for (t, gi) in draws.iter().zip(&grads) {
                            acc += gi * (t - m).transpose();
                        }
                        Curvature::Full(linalg::symmetrize(&(acc / n * s)))
                    }
                };
                (g, h)
            }
        };
        Ok(MomentEstimate {
            g,
            h,
            estimator: *estimator,
        })
    }

    /// `∇_μ E_q[ℓ]` in the family's dual layout.
    pub fn natural_gradient(
        &self,
        fam: &FamilyDescriptor,
        lambda: &NatParam,
        estimator: &Estimator,
    ) -> Result<DualVec> {
        if let (LossKind::LinearInT { c }, Estimator::Analytic) = (&self.kind, estimator) {
            fam.check(lambda)?;
            if fam.zero_dual().axpy(1.0, c).is_ok() {
                return Ok(c.scale(-1.0));
            }
        }
        let mom = self.expected_moments(fam, lambda, estimator)?;
        natural_gradient_from_moments(fam, lambda, &mom)
    }

    /// `E_q[ℓ]`, exact for quadratic losses under `Analytic`.
    pub fn expected_value(&self, fam: &FamilyDescriptor, lambda: &NatParam, estimator: &Estimator) -> Result<f64> {
        fam.check(lambda)?;
        let m = lambda.mean();
        match estimator {
            Estimator::Analytic => {
                let cov = fam.precision_matrix(lambda)?;
                let cov = linalg::cholesky(&cov)?.inverse();
                match &self.kind {
                    LossKind::Quadratic { a, .. } => Ok(self.value(m)? + 0.5 * a.component_mul(&cov).sum()),
                    LossKind::LinearInT { c } => {
                        let cm = Self::linear_in_t_matrix(c);
                        Ok(self.value(m)? + 0.5 * cm.component_mul(&cov).sum())
                    }
                    _ => Err(Error::EstimatorUnsupported {
                        estimator: estimator.name().into(),
                        loss: self.kind_name().into(),
                    }),
                }
            }
            Estimator::Delta => self.value(m),
            Estimator::MonteCarlo { count, seed } | Estimator::Reparam { count, seed } => {
                let draws = draws_for(fam, lambda, *count, *seed)?;
                let vals: Vec<f64> = draws.iter().map(|t| self.value(t)).collect::<Result<_>>()?;
                Ok(linalg::compensated_sum(vals.iter().copied()) / vals.len() as f64)
            }
        }
    }
}

/// `(g - H m, ½H)` in storage form `{v: g - Hm, V: -H}`; `g` alone for fixed-covariance families.
pub fn natural_gradient_from_moments(
    fam: &FamilyDescriptor,
    lambda: &NatParam,
    mom: &MomentEstimate,
) -> Result<DualVec> {
    let m = lambda.mean();
    match (fam.kind, &mom.h) {
        (FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision, _) => Ok(DualVec::Vector { v: mom.g.clone() }),
        (FamilyKind::DiagPrecision, Curvature::Diag(h)) => Ok(DualVec::Diag {
            v: &mom.g - h.component_mul(m),
            u: -h,
        }),
        (FamilyKind::DiagPrecision, Curvature::Full(h)) => {
            let h = h.diagonal();
            Ok(DualVec::Diag {
                v: &mom.g - h.component_mul(m),
                u: -h,
            })
        }
        (FamilyKind::FullPrecision, Curvature::Full(h)) => Ok(DualVec::Full {
            v: &mom.g - h * m,
            big_v: -h,
        }),
        _ => Err(Error::FamilyMismatch(format!(
            "curvature estimate does not fit the {} family",
            fam.kind.name()
        ))),
    }
}

fn draws_for(fam: &FamilyDescriptor, lambda: &NatParam, count: usize, seed: Option<u64>) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "Monte-Carlo sample count must be at least 1".into(),
        ));
    }
    let seed = seed.unwrap_or_else(rand::random);
    fam.sample(lambda, seed, count)
}

fn mean_vectors(vs: &[DVector<f64>]) -> DVector<f64> {
    let len = vs[0].len();
    let summed = linalg::compensated_sum_slices(len, vs.iter().map(|v| v.as_slice()));
    DVector::from_vec(summed) / vs.len() as f64
}

/// `Xᵀ diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wx = x.clone();
    for (i, wi) in w.iter().enumerate() {
        wx.row_mut(i).scale_mut(*wi);
    }
    linalg::symmetrize(&(x.transpose() * wx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn random_logistic(seed: u64, n: usize, d: usize) -> LossSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        LossSpec::logistic(x, y)
    }

    fn random_multiclass(seed: u64, n: usize, d: usize, k: usize) -> LossSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        LossSpec::multiclass(x, labels, k)
    }

    fn fd_grad(loss: &LossSpec, theta: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(theta.len(), |i, _| {
            let mut p = theta.clone();
            let mut q = theta.clone();
            p[i] += h;
            q[i] -= h;
            (loss.value(&p).unwrap() - loss.value(&q).unwrap()) / (2.0 * h)
        })
    }

    fn fd_hess(loss: &LossSpec, theta: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-5;
        let n = theta.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut p = theta.clone();
            let mut q = theta.clone();
            p[i] += h;
            q[i] -= h;
            let col = (loss.grad(&p).unwrap() - loss.grad(&q).unwrap()) / (2.0 * h);
            out.set_column(i, &col);
        }
        out
    }

    #[test]
    fn quadratic_example() {
        let loss = LossSpec::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 1);
        let t = v(&[3.0]);
        assert_eq!(loss.value(&t).unwrap(), 4.5);
        assert_eq!(loss.grad(&t).unwrap(), v(&[3.0]));
        assert_eq!(loss.hess(&t).unwrap(), DMatrix::identity(1, 1));
    }

    #[test]
    fn zero_feature_has_zero_gradient() {
        let loss = LossSpec::logistic(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), v(&[1.0]));
        let g = loss.grad(&v(&[0.7, -0.3])).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let loss = LossSpec::quadratic(DMatrix::identity(2, 2), DVector::zeros(2), 1);
        assert!(matches!(loss.value(&v(&[1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn logistic_gradients_match_finite_differences() {
        for seed in 0..50 {
            let loss = random_logistic(seed, 7, 3);
            let theta = v(&[0.3, -0.5, 0.1 * seed as f64 % 1.0]);
            let err = linalg::max_abs_vec(&(loss.grad(&theta).unwrap() - fd_grad(&loss, &theta)));
            assert!(err < 1e-6, "seed {seed}: {err}");
            let herr = linalg::max_abs_mat(&(loss.hess(&theta).unwrap() - fd_hess(&loss, &theta)));
            assert!(herr < 1e-6, "seed {seed}: {herr}");
        }
    }

    #[test]
    fn multiclass_gradients_match_finite_differences() {
        for seed in 0..50 {
            let loss = random_multiclass(seed, 6, 2, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let theta = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let err = linalg::max_abs_vec(&(loss.grad(&theta).unwrap() - fd_grad(&loss, &theta)));
            assert!(err < 1e-6, "seed {seed}: {err}");
            let h = loss.hess(&theta).unwrap();
            let herr = linalg::max_abs_mat(&(&h - fd_hess(&loss, &theta)));
            assert!(herr < 1e-6, "seed {seed}: {herr}");
            assert!(linalg::max_abs_vec(&(loss.hess_diag(&theta).unwrap() - h.diagonal())) < 1e-14);
        }
    }

    #[test]
    fn logistic_hessians_are_psd() {
        for seed in 0..20 {
            let loss = random_multiclass(seed, 8, 3, 4);
            let theta = DVector::from_element(12, 0.1 * seed as f64);
            let eig = loss.hess(&theta).unwrap().symmetric_eigenvalues();
            assert!(eig.min() > -1e-10);
            let loss = random_logistic(seed, 8, 3);
            let eig = loss.hess(&DVector::zeros(3)).unwrap().symmetric_eigenvalues();
            assert!(eig.min() > -1e-10);
        }
    }

    #[test]
    fn quadratic_moments_full_family() {
        let fam = FamilyDescriptor::full(1);
        let lam = NatParam::Full {
            m: v(&[2.0]),
            s: DMatrix::identity(1, 1),
        };
        let loss = LossSpec::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 1);
        let mom = loss.expected_moments(&fam, &lam, &Estimator::Analytic).unwrap();
        assert_eq!(mom.g, v(&[2.0]));
        assert_eq!(mom.h, Curvature::Full(DMatrix::identity(1, 1)));
        let mc = loss
            .expected_moments(
                &fam,
                &lam,
                &Estimator::MonteCarlo {
                    count: 1_000_000,
                    seed: Some(3),
                },
            )
            .unwrap();
        assert!((mc.g[0] - 2.0).abs() < 5e-3);
        let ng = loss.natural_gradient(&fam, &lam, &Estimator::Analytic).unwrap();
        // ambient (0, ½) is stored as V = -1
        assert_eq!(
            ng,
            DualVec::Full {
                v: v(&[0.0]),
                big_v: DMatrix::from_element(1, 1, -1.0)
            }
        );
    }

    #[test]
    fn linear_in_t_natural_gradient_is_minus_c() {
        let c = DualVec::Full {
            v: v(&[0.3, -1.1]),
            big_v: DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.2]),
        };
        let loss = LossSpec::linear_in_t(c.clone());
        let fam = FamilyDescriptor::full(2);
        for seed in 0..5 {
            let m = fam.standard_draws(seed, 1).remove(0);
            let lam = fam.isotropic_member(m, 1.0 + seed as f64).unwrap();
            assert_eq!(
                loss.natural_gradient(&fam, &lam, &Estimator::Analytic).unwrap(),
                c.scale(-1.0)
            );
            let via_moments = natural_gradient_from_moments(
                &fam,
                &lam,
                &loss.expected_moments(&fam, &lam, &Estimator::Analytic).unwrap(),
            )
            .unwrap();
            assert!(via_moments.sub(&c.scale(-1.0)).unwrap().ambient_norm_inf() < 1e-12);
        }
        let fam = FamilyDescriptor::isotropic(2);
        let loss = LossSpec::linear_in_t(DualVec::Vector { v: v(&[1.0, 2.0]) });
        let lam = NatParam::Mean { m: v(&[5.0, 5.0]) };
        let mom = loss.expected_moments(&fam, &lam, &Estimator::Analytic).unwrap();
        assert_eq!(mom.g, v(&[-1.0, -2.0]));
    }

    #[test]
    fn delta_is_gradient_at_mean() {
        let loss = random_logistic(4, 10, 3);
        for fam in [
            FamilyDescriptor::isotropic(3),
            FamilyDescriptor::diag(3),
            FamilyDescriptor::full(3),
        ] {
            let lam = fam.isotropic_member(v(&[0.2, -0.4, 1.0]), 2.0).unwrap();
            let mom = loss.expected_moments(&fam, &lam, &Estimator::Delta).unwrap();
            assert_eq!(mom.g, loss.grad(lam.mean()).unwrap());
        }
        let fam = FamilyDescriptor::isotropic(3);
        let lam = NatParam::Mean {
            m: v(&[0.2, -0.4, 1.0]),
        };
        let ng = loss.natural_gradient(&fam, &lam, &Estimator::Delta).unwrap();
        assert_eq!(
            ng,
            DualVec::Vector {
                v: loss.grad(lam.mean()).unwrap()
            }
        );
    }

    #[test]
    fn analytic_rejected_for_logistic() {
        let loss = random_logistic(1, 3, 2);
        let fam = FamilyDescriptor::diag(2);
        let lam = fam.isotropic_member(DVector::zeros(2), 1.0).unwrap();
        assert!(matches!(
            loss.expected_moments(&fam, &lam, &Estimator::Analytic),
            Err(Error::EstimatorUnsupported { .. })
        ));
    }

    #[test]
    fn monte_carlo_error_shrinks_like_inverse_sqrt() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let loss = LossSpec::quadratic(a, v(&[0.1, -0.2]), 1);
        let fam = FamilyDescriptor::full(2);
        let lam = NatParam::Full {
            m: v(&[1.0, -1.0]),
            s: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]),
        };
        let exact = loss.expected_moments(&fam, &lam, &Estimator::Analytic).unwrap().g;
        let mut errs = Vec::new();
        for count in [1_000, 10_000, 100_000] {
            // average over seeds to tame the single-run fluctuation
            let mut e2 = 0.0;
            for seed in 0..10 {
                let mc = loss
                    .expected_moments(
                        &fam,
                        &lam,
                        &Estimator::MonteCarlo {
                            count,
                            seed: Some(seed),
                        },
                    )
                    .unwrap();
                e2 += (&mc.g - &exact).norm_squared();
            }
            errs.push((e2 / 10.0).sqrt());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 10f64.sqrt() / 2.0 && ratio < 10f64.sqrt() * 2.0, "{errs:?}");
        }
    }

    #[test]
    fn reparam_recovers_quadratic_curvature() {
        let loss = LossSpec::quadratic(DMatrix::from_diagonal(&v(&[3.0, 0.5])), v(&[1.0, 1.0]), 1);
        let fam = FamilyDescriptor::diag(2);
        let lam = fam.isotropic_member(v(&[0.5, 0.5]), 4.0).unwrap();
        let mom = loss
            .expected_moments(
                &fam,
                &lam,
                &Estimator::Reparam {
                    count: 200_000,
                    seed: Some(1),
                },
            )
            .unwrap();
        let Curvature::Diag(h) = mom.h else { panic!() };
        assert!((h[0] - 3.0).abs() < 0.05 && (h[1] - 0.5).abs() < 0.02, "{h}");
    }

    /// Finite differences of `E_q[ℓ]` through the inverse dual map against the natural gradient.
    #[test]
    fn natural_gradient_matches_fd_in_mu() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let loss = LossSpec::quadratic(a, v(&[0.3, -0.7]), 1);
        let fam = FamilyDescriptor::full(2);
        let lam = NatParam::Full {
            m: v(&[0.4, 0.9]),
            s: DMatrix::from_row_slice(2, 2, &[1.5, -0.3, -0.3, 0.8]),
        };
        let ng = loss.natural_gradient(&fam, &lam, &Estimator::Analytic).unwrap();
        let crate::expfam::ExpParam::Full { m, m2 } = fam.to_expectation(&lam).unwrap() else {
            panic!()
        };
        let h = 1e-5;
        let f = |m: &DVector<f64>, m2: &DMatrix<f64>| {
            let l = fam
                .to_natural(&crate::expfam::ExpParam::Full {
                    m: m.clone(),
                    m2: m2.clone(),
                })
                .unwrap();
            loss.expected_value(&fam, &l, &Estimator::Analytic).unwrap()
        };
        for i in 0..2 {
            let mut p = m.clone();
            let mut q = m.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (f(&p, &m2) - f(&q, &m2)) / (2.0 * h);
            assert!((fd - ng.first()[i]).abs() < 1e-6);
        }
        let DualVec::Full { big_v, .. } = &ng else { panic!() };
        let mut e = DMatrix::zeros(2, 2);
        e[(0, 1)] = 1.0;
        e[(1, 0)] = 1.0;
        let fd = (f(&m, &(&m2 + &e * h)) - f(&m, &(&m2 - &e * h))) / (2.0 * h);
        assert!((fd - (-0.5 * big_v).component_mul(&e).sum()).abs() < 1e-6);
    }

    /// Same check with MC expectations and common random numbers on a logistic loss.
    #[test]
    fn natural_gradient_matches_fd_in_mu_monte_carlo() {
        let loss = random_logistic(9, 12, 2);
        let fam = FamilyDescriptor::diag(2);
        let lam = NatParam::Diag {
            m: v(&[0.3, -0.2]),
            s: v(&[4.0, 2.0]),
        };
        let est = Estimator::MonteCarlo {
            count: 20_000,
            seed: Some(17),
        };
        let ng = loss.natural_gradient(&fam, &lam, &est).unwrap();
        let crate::expfam::ExpParam::Diag { m, m2 } = fam.to_expectation(&lam).unwrap() else {
            panic!()
        };
        let h = 1e-4;
        let f = |m: &DVector<f64>, m2: &DVector<f64>| {
            let l = fam
                .to_natural(&crate::expfam::ExpParam::Diag {
                    m: m.clone(),
                    m2: m2.clone(),
                })
                .unwrap();
            loss.expected_value(&fam, &l, &est).unwrap()
        };
        for i in 0..2 {
            let mut p = m.clone();
            let mut q = m.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (f(&p, &m2) - f(&q, &m2)) / (2.0 * h);
            assert!((fd - ng.first()[i]).abs() < 0.05, "{fd} vs {}", ng.first()[i]);
        }
    }

    #[test]
    fn temperature_divides_the_loss() {
        let loss = random_logistic(2, 5, 2);
        let t = v(&[0.5, 0.1]);
        let scaled = loss.scaled(0.25);
        assert!((scaled.value(&t).unwrap() - 0.25 * loss.value(&t).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let loss = random_multiclass(1, 3, 2, 3);
        let js = serde_json::to_string(&loss).unwrap();
        let back: LossSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, loss);
    }

    proptest! {
        #[test]
        fn quadratic_grad_matches_fd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = &b + b.transpose();
            let loss = LossSpec::quadratic(a, DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)), 1);
            let theta = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let err = linalg::max_abs_vec(&(loss.grad(&theta).unwrap() - fd_grad(&loss, &theta)));
            prop_assert!(err < 1e-6);
        }
    }
}
