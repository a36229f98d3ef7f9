//! Inner solvers for a single client subproblem
//!
//! ```text
//! min_μ  L(μ)/τ + <η, μ> + ρ KL(q_μ || q_g)
//! ```
//!
//! plus IVON for the diagonal family and plain gradient descent for the classical ADMM client.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{DualVec, FamilyDescriptor, FamilyKind, NatParam};
use crate::linalg;
use crate::losses::{Estimator, LossKind, LossSpec};

/// One client subproblem.
#[derive(Debug, Clone, Copy)]
pub struct Subproblem<'a> {
    pub fam: &'a FamilyDescriptor,
    pub loss: &'a LossSpec,
    pub eta: &'a DualVec,
    pub lambda_g: &'a NatParam,
    pub rho: f64,
    pub tau: f64,
}

impl Subproblem<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidConfig(format!("rho = {} must be positive", self.rho)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau = {} must be positive", self.tau)));
        }
        self.fam.check(self.lambda_g)?;
        self.fam.zero_dual().axpy(1.0, self.eta)?;
        if self.loss.dim() != self.fam.dim {
            return Err(Error::DimensionMismatch {
                expected: self.fam.dim,
                got: self.loss.dim(),
            });
        }
        Ok(())
    }

    /// `∇_μ` of the whole subproblem objective at `lambda`, together with the loss part alone.
    pub fn gradient(&self, lambda: &NatParam, estimator: &Estimator) -> Result<(DualVec, DualVec)> {
        let ng = self
            .loss
            .natural_gradient(self.fam, lambda, estimator)?
            .scale(1.0 / self.tau);
        let kl = self.fam.nat_sub(lambda, self.lambda_g)?;
        let total = kl.axpy(self.rho, &ng.add(self.eta)?)?;
        Ok((total, ng))
    }
}

/// The conjugate parameter `c` with `ℓ = -<c, T(θ)>`, in the family's dual layout.
pub fn conjugate_parameter(fam: &FamilyDescriptor, loss: &LossSpec) -> Option<DualVec> {
    let d = fam.dim;
    let lifted = match (&loss.kind, fam.kind) {
        (LossKind::LinearInT { c }, _) => c.clone(),
        (LossKind::Quadratic { a, b, .. }, FamilyKind::FullPrecision) => DualVec::Full {
            v: -b,
            big_v: a.clone(),
        },
        (LossKind::Quadratic { a, b, .. }, FamilyKind::DiagPrecision) => {
            let off = a - DMatrix::from_diagonal(&a.diagonal());
            if linalg::max_abs_mat(&off) != 0.0 {
                return None;
            }
            DualVec::Diag { v: -b, u: a.diagonal() }
        }
        _ => return None,
    };
    // promote a smaller layout into the family's, never demote
    match (lifted, fam.kind) {
        (c @ DualVec::Vector { .. }, FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision) => Some(c),
        (DualVec::Vector { v }, FamilyKind::DiagPrecision) => Some(DualVec::Diag {
            v,
            u: DVector::zeros(d),
        }),
        (DualVec::Vector { v }, FamilyKind::FullPrecision) => Some(DualVec::Full {
            v,
            big_v: DMatrix::zeros(d, d),
        }),
        (c @ DualVec::Diag { .. }, FamilyKind::DiagPrecision) => Some(c),
        (DualVec::Diag { v, u }, FamilyKind::FullPrecision) => Some(DualVec::Full {
            v,
            big_v: DMatrix::from_diagonal(&u),
        }),
        (c @ DualVec::Full { .. }, FamilyKind::FullPrecision) => Some(c),
        _ => None,
    }
}

/// `(A, b)` of a loss whose gradient is affine, `∇ℓ = Aθ + b`.
fn affine_gradient(loss: &LossSpec) -> Option<(DMatrix<f64>, DVector<f64>)> {
    match &loss.kind {
        LossKind::Quadratic { a, b, .. } => Some((a.clone(), b.clone())),
        LossKind::LinearInT { c } => {
            let d = c.first().len();
            let a = match c {
                DualVec::Vector { .. } => DMatrix::zeros(d, d),
                DualVec::Diag { u, .. } => DMatrix::from_diagonal(u),
                DualVec::Full { big_v, .. } => big_v.clone(),
            };
            Some((a, -c.first()))
        }
        _ => None,
    }
}

fn solve_spd_or_lu(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Ok(chol) = linalg::cholesky(a) {
        return Ok(chol.solve(rhs));
    }
    a.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::SingularSystem("client system is singular".into()))
}

/// Exact stationary point of a conjugate subproblem.
///
/// Full and diagonal families use `λ = λ_g + (c/τ - η)/ρ`; the fixed-covariance families solve
/// `(A/τ + ρS)m = ρ S m_g - b/τ - η` for affine-gradient losses.
pub fn solve_conjugate(sp: &Subproblem) -> Result<NatParam> {
    sp.validate()?;
    match sp.fam.kind {
        FamilyKind::DiagPrecision | FamilyKind::FullPrecision => {
            let c = conjugate_parameter(sp.fam, sp.loss).ok_or_else(|| {
                Error::NotConjugate(format!(
                    "{} loss under the {} family",
                    sp.loss.kind_name(),
                    sp.fam.kind.name()
                ))
            })?;
            let lg = sp.fam.natural_coords(sp.lambda_g)?;
            let step = c.scale(1.0 / sp.tau).sub(sp.eta)?;
            let coords = step.axpy(1.0 / sp.rho, &lg)?;
            sp.fam
                .from_natural_coords(&coords)
                .map_err(|e| Error::ResultNotInFamily(e.to_string()))
        }
        FamilyKind::IsotropicUnit | FamilyKind::FixedPrecision => {
            let (a, b) = affine_gradient(sp.loss).ok_or_else(|| {
                Error::NotConjugate(format!(
                    "{} loss under the {} family",
                    sp.loss.kind_name(),
                    sp.fam.kind.name()
                ))
            })?;
            let s = sp.fam.precision_matrix(sp.lambda_g)?;
            let lhs = a / sp.tau + &s * sp.rho;
            let rhs = &s * sp.lambda_g.mean() * sp.rho - b / sp.tau - sp.eta.first();
            Ok(NatParam::Mean {
                m: solve_spd_or_lu(&lhs, &rhs)?,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VonConfig {
    pub beta: f64,
    pub max_steps: usize,
    pub tol: f64,
}

impl Default for VonConfig {
    fn default() -> Self {
        VonConfig {
            beta: 0.5,
            max_steps: 500,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VonResult {
    pub lambda: NatParam,
    pub converged: bool,
    pub steps: usize,
    /// `‖∇_μF‖∞` at the returned iterate.
    pub grad_norm: f64,
    /// Loss part of `∇_μF` at the returned iterate, i.e. the natural gradient of `L/τ`.
    pub loss_gradient: DualVec,
    pub history: Vec<f64>,
}

/// Natural-gradient descent `λ ← λ - (β/ρ) ∇_μF`, started at `init` (default `λ_g`).
///
/// The step is normalized by `ρ` so that `β = 1` solves conjugate subproblems in one step.
/// Iterates that leave the family are retried with `β` halved, at most ten times.
pub fn solve_von(
    sp: &Subproblem,
    cfg: &VonConfig,
    estimator: &Estimator,
    init: Option<&NatParam>,
) -> Result<VonResult> {
    sp.validate()?;
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "VON step {} must lie in (0, 1]",
            cfg.beta
        )));
    }
    let mut lambda = init.unwrap_or(sp.lambda_g).clone();
    sp.fam.check(&lambda)?;
    let (mut grad, mut ng) = sp.gradient(&lambda, estimator)?;
    let mut norm = grad.ambient_norm_inf();
    let mut history = vec![norm];
    let mut steps = 0;
    while steps < cfg.max_steps && !(norm <= cfg.tol) {
        if !norm.is_finite() {
            return Err(Error::NonFiniteUpdate {
                step: steps,
                quantity: "subproblem gradient".into(),
            });
        }
        let coords = sp.fam.natural_coords(&lambda)?;
        let mut beta = cfg.beta;
        let mut halvings = 0;
        let next = loop {
            let cand = grad.axpy(-beta / sp.rho, &coords)?;
            match sp.fam.from_natural_coords(&cand) {
                Ok(l) => break l,
                Err(_) if halvings < 10 => {
                    halvings += 1;
                    beta *= 0.5;
                }
                Err(_) => return Err(Error::PrecisionEscape { step: steps, halvings }),
            }
        };
        lambda = next;
        steps += 1;
        (grad, ng) = sp.gradient(&lambda, estimator)?;
        norm = grad.ambient_norm_inf();
        history.push(norm);
    }
    Ok(VonResult {
        lambda,
        converged: norm <= cfg.tol,
        steps,
        grad_norm: norm,
        loss_gradient: ng,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvonConfig {
    pub h0: f64,
    /// Learning rates `α_t`; the last entry repeats once the schedule is exhausted.
    pub lr: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for IvonConfig {
    fn default() -> Self {
        IvonConfig {
            h0: 0.1,
            lr: vec![0.1],
            beta1: 0.9,
            beta2: 0.99999,
            steps: 1000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl IvonConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ivon: {m}")));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.h0 >= 0.0) {
            return bad("h0 must be nonnegative");
        }
        if self.lr.is_empty() || self.lr.iter().any(|a| !(*a > 0.0)) {
            return bad("learning rates must be positive");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("ivon: {name} = {b} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    fn lr_at(&self, t: usize) -> f64 {
        self.lr[t.min(self.lr.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvonResult {
    pub m: DVector<f64>,
    /// Precision `1/σ²`.
    pub s: DVector<f64>,
    pub h: DVector<f64>,
}

/// IVON for `loss_scale · E_q[ℓ(θ) + vᵀθ - ½θᵀdiag(u)θ] + KL(q || N(m_p, σ_p²))`.
pub fn solve_ivon(
    loss: &LossSpec,
    prior_mean: &DVector<f64>,
    prior_var: &DVector<f64>,
    loss_scale: f64,
    v: &DVector<f64>,
    u: &DVector<f64>,
    cfg: &IvonConfig,
) -> Result<IvonResult> {
    cfg.validate()?;
    let d = prior_mean.len();
    for (name, len) in [
        ("prior variance", prior_var.len()),
        ("v", v.len()),
        ("u", u.len()),
        ("loss", loss.dim()),
    ] {
        if len != d {
            return Err(Error::InvalidConfig(format!(
                "ivon: {name} has dimension {len}, expected {d}"
            )));
        }
    }
    if !(loss_scale > 0.0) || prior_var.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConfig(
            "ivon: loss scale and prior variances must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_rows = loss.n_rows();
    let delta = prior_var.map(|s2| 1.0 / (loss_scale * s2));
    let mut m = prior_mean.clone();
    let mut h = DVector::from_element(d, cfg.h0);
    let mut g = DVector::zeros(d);
    let mut sigma = h.zip_map(&delta, |hi, di| 1.0 / (loss_scale * (hi + di)).sqrt());
    for t in 0..cfg.steps {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let theta = &m + sigma.component_mul(&z);
        let g_hat = if n_rows > cfg.batch_size {
            let rows = index::sample(&mut rng, n_rows, cfg.batch_size).into_vec();
            loss.minibatch_grad(&theta, &rows)?
        } else {
            loss.grad(&theta)?
        };
        let h_hat = DVector::from_fn(d, |i, _| g_hat[i] * (theta[i] - m[i]) / (sigma[i] * sigma[i]) - u[i]);
        g = &g * cfg.beta1 + &g_hat * (1.0 - cfg.beta1);
        let r = 1.0 - cfg.beta2;
        h = DVector::from_fn(d, |i, _| {
            let diff = h[i] - h_hat[i];
            cfg.beta2 * h[i] + r * h_hat[i] + 0.5 * r * r * diff * diff / (h[i] + delta[i])
        });
        let alpha = cfg.lr_at(t);
        m = DVector::from_fn(d, |i, _| {
            m[i] - alpha * (g[i] + v[i] - u[i] * m[i] + delta[i] * (m[i] - prior_mean[i])) / (h[i] + delta[i])
        });
        sigma = h.zip_map(&delta, |hi, di| 1.0 / (loss_scale * (hi + di)).sqrt());
        let bad = [("g", &g), ("h", &h), ("m", &m), ("sigma", &sigma)]
            .into_iter()
            .find(|(_, x)| x.iter().any(|v| !v.is_finite()));
        if let Some((name, _)) = bad {
            return Err(Error::NonFiniteUpdate {
                step: t + 1,
                quantity: name.into(),
            });
        }
        if let Some(i) = (0..d).find(|&i| !(h[i] + delta[i] > 0.0)) {
            return Err(Error::NonFiniteUpdate {
                step: t + 1,
                quantity: format!("h + delta at coordinate {i}"),
            });
        }
    }
    Ok(IvonResult {
        s: sigma.map(|s| 1.0 / (s * s)),
        m,
        h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    pub max_steps: usize,
    /// Step size; defaults to `1/(L + ρ)` from the loss's curvature bound.
    pub lr: Option<f64>,
    pub tol: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            max_steps: 100_000,
            lr: None,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmClientResult {
    pub theta: DVector<f64>,
    pub converged: bool,
    pub steps: usize,
    pub grad_norm: f64,
}

/// `argmin ℓ(θ) + vᵀθ + (ρ/2)‖θ - θ_g‖²`, in closed form for affine-gradient losses.
pub fn solve_admm_client(
    loss: &LossSpec,
    v: &DVector<f64>,
    theta_g: &DVector<f64>,
    rho: f64,
    cfg: &GdConfig,
) -> Result<AdmmClientResult> {
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!("rho = {rho} must be positive")));
    }
    let d = theta_g.len();
    if v.len() != d || loss.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if v.len() != d { v.len() } else { loss.dim() },
        });
    }
    let objective_grad = |t: &DVector<f64>| -> Result<DVector<f64>> { Ok(loss.grad(t)? + v + (t - theta_g) * rho) };
    if let Some((a, b)) = affine_gradient(loss) {
        let lhs = a + DMatrix::identity(d, d) * rho;
        let rhs = theta_g * rho - b - v;
        let theta = solve_spd_or_lu(&lhs, &rhs)?;
        let grad_norm = linalg::max_abs_vec(&objective_grad(&theta)?);
        return Ok(AdmmClientResult {
            theta,
            converged: true,
            steps: 0,
            grad_norm,
        });
    }
    let lr = cfg.lr.unwrap_or_else(|| 1.0 / (loss.lipschitz_bound() + rho));
    let mut theta = theta_g.clone();
    let mut grad = objective_grad(&theta)?;
    let mut norm = linalg::max_abs_vec(&grad);
    let mut best = (norm, theta.clone());
    let mut steps = 0;
    while steps < cfg.max_steps && norm > cfg.tol {
        theta -= &grad * lr;
        steps += 1;
        grad = objective_grad(&theta)?;
        norm = linalg::max_abs_vec(&grad);
        if !norm.is_finite() {
            return Err(Error::NonFiniteUpdate {
                step: steps,
                quantity: "ADMM client gradient".into(),
            });
        }
        if norm < best.0 {
            best = (norm, theta.clone());
        }
    }
    let (grad_norm, theta) = best;
    Ok(AdmmClientResult {
        theta,
        converged: grad_norm <= cfg.tol,
        steps,
        grad_norm,
    })
}
