//! Round engines for federated ADMM and its Bayesian generalizations.
//!
//! Every engine keeps one [`ServerState`] and `K` [`ClientState`]s. A round runs all client
//! updates (concurrently when a worker pool is configured), then the server combine. State is
//! committed only after the whole round succeeded, so a failed round leaves the previous
//! state intact.
//!
//! Classical ADMM and FedAvg reuse the Bayesian containers: `θ_k` is stored as the mean of a
//! [`NatParam::Mean`] and `v_k` as a [`DualVec::Vector`].

use std::sync::Arc;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{dual_sum, DualVec, FamilyDescriptor, FamilyKind, NatParam};
use crate::linalg;
use crate::losses::{Estimator, LossKind, LossSpec, DEFAULT_MC_SAMPLES};
use crate::solvers::{self, GdConfig, IvonConfig, Subproblem, VonConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Admm,
    BayesAdmm,
    Pvi { damping: f64 },
    BregmanAdmm,
    IvonAdmm,
    FedAvg { local_steps: usize, lr: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Admm => "admm",
            Method::BayesAdmm => "bayes_admm",
            Method::Pvi { .. } => "pvi",
            Method::BregmanAdmm => "bregman_admm",
            Method::IvonAdmm => "ivon_admm",
            Method::FedAvg { .. } => "fedavg",
        }
    }

    /// Whether the engine works on point estimates `θ` rather than distributions.
    pub fn is_point_estimate(&self) -> bool {
        matches!(self, Method::Admm | Method::FedAvg { .. })
    }
}

/// Client solver for the distributional engines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerSolver {
    /// Closed form when the loss is conjugate to the family, VON with defaults otherwise.
    #[default]
    Auto,
    Conjugate,
    Von(VonConfig),
    Ivon(IvonConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default)]
    pub inner: InnerSolver,
    /// Point-estimate client solver for classical ADMM and FedAvg.
    #[serde(default)]
    pub gd: GdConfig,
    /// Expectation estimator; `None` picks `Analytic` for quadratic losses and Monte Carlo
    /// otherwise.
    #[serde(default)]
    pub estimator: Option<Estimator>,
    /// Replaces every expectation by its value at the mean.
    #[serde(default)]
    pub delta_method: bool,
    /// Client solve plus dual update repeated this many times per round against a fixed
    /// server state.
    #[serde(default = "one")]
    pub client_repeats: usize,
    /// Stop repeating once `‖λ_k - λ_g‖∞` falls below this.
    #[serde(default)]
    pub client_repeat_tol: f64,
    /// Worker threads for the client phase; `None` uses the global rayon pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn one() -> usize {
    1
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            inner: InnerSolver::Auto,
            gd: GdConfig::default(),
            estimator: None,
            delta_method: false,
            client_repeats: 1,
            client_repeat_tol: 0.0,
            workers: None,
        }
    }

    pub fn with_inner(mut self, inner: InnerSolver) -> Self {
        self.inner = inner;
        self
    }

    pub fn with_delta(mut self, on: bool) -> Self {
        self.delta_method = on;
        self
    }

    pub fn validate(&self, fam: &FamilyDescriptor) -> Result<()> {
        match self.method {
            Method::Pvi { damping } if !(damping > 0.0 && damping <= 1.0) => {
                return Err(Error::InvalidConfig(format!(
                    "PVI damping {damping} must lie in (0, 1]"
                )));
            }
            Method::IvonAdmm if fam.kind != FamilyKind::DiagPrecision => {
                return Err(Error::InvalidConfig("ivon_admm requires the diag family".into()));
            }
            Method::FedAvg { lr, .. } if !(lr > 0.0) => {
                return Err(Error::InvalidConfig(format!(
                    "FedAvg learning rate {lr} must be positive"
                )));
            }
            Method::Admm | Method::FedAvg { .. } if fam.kind != FamilyKind::IsotropicUnit => {
                return Err(Error::InvalidConfig(format!(
                    "{} runs on point estimates and requires the isotropic family",
                    self.method.name()
                )));
            }
            _ => {}
        }
        if let InnerSolver::Ivon(cfg) = &self.inner {
            cfg.validate()?;
        }
        if self.client_repeats == 0 {
            return Err(Error::InvalidConfig("client_repeats must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn estimator_for(&self, loss: &LossSpec, seed: u64) -> Estimator {
        if self.delta_method {
            return Estimator::Delta;
        }
        match self.estimator {
            Some(e) => e.reseeded(seed),
            None => match loss.kind {
                LossKind::Quadratic { .. } | LossKind::LinearInT { .. } => Estimator::Analytic,
                _ => Estimator::MonteCarlo {
                    count: DEFAULT_MC_SAMPLES,
                    seed: Some(seed),
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub loss: LossSpec,
    pub n_examples: usize,
    pub lambda: NatParam,
    pub eta: DualVec,
}

impl ClientState {
    /// `log t_k(θ) = <η_k, T(θ)>`: the dual is the natural parameter of the client's site.
    pub fn log_site(&self, theta: &DVector<f64>) -> f64 {
        self.eta.inner_stat(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub lambda_g: NatParam,
    /// Prior natural parameter.
    pub eta0: DualVec,
    pub rho: f64,
    pub gamma: f64,
    /// Replaces `1/(1 + ρK)` when set.
    pub alpha_override: Option<f64>,
    pub tau: f64,
    pub k: usize,
    /// Prior precision.
    pub delta: f64,
    pub round: usize,
}

impl ServerState {
    pub fn alpha(&self) -> f64 {
        self.alpha_override.unwrap_or(1.0 / (1.0 + self.rho * self.k as f64))
    }
}

/// Hyperparameters shared by all engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub rho: f64,
    /// Dual step; defaults to `rho`.
    pub gamma: Option<f64>,
    pub tau: f64,
    pub delta: f64,
    pub alpha: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            rho: 1.0,
            gamma: None,
            tau: 1.0,
            delta: 1.0,
            alpha: None,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("rho", Some(self.rho)),
            ("gamma", self.gamma),
            ("tau", Some(self.tau)),
            ("delta", Some(self.delta)),
        ] {
            if let Some(x) = x {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} = {x} must be positive and finite"
                    )));
                }
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!("alpha = {a} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Prior `N(0, I/δ)` in the family; the fixed-covariance families keep their own precision.
pub fn prior(fam: &FamilyDescriptor, delta: f64) -> Result<NatParam> {
    fam.isotropic_member(DVector::zeros(fam.dim), delta)
}

/// Seed for one client in one round, independent of scheduling.
pub fn derive_seed(global: u64, client: usize, round: usize) -> u64 {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&global.to_le_bytes());
    bytes[8..16].copy_from_slice(&(client as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&(round as u64).to_le_bytes());
    ChaCha8Rng::from_seed(bytes).next_u64()
}

/// Per-client diagnostics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub id: usize,
    pub steps: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
}

struct ClientOutcome {
    lambda: NatParam,
    eta: DualVec,
    report: ClientReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Federation {
    pub config: MethodConfig,
    pub family: FamilyDescriptor,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub seed: u64,
    #[serde(skip)]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl PartialEq for Federation {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.family == other.family
            && self.server == other.server
            && self.clients == other.clients
            && self.seed == other.seed
    }
}

impl Federation {
    /// Server at the prior, every dual at zero.
    pub fn new(
        config: MethodConfig,
        family: FamilyDescriptor,
        hyper: Hyper,
        losses: Vec<LossSpec>,
        seed: u64,
    ) -> Result<Self> {
        family.validate()?;
        config.validate(&family)?;
        hyper.validate()?;
        if losses.is_empty() {
            return Err(Error::InvalidConfig("at least one client is required".into()));
        }
        for loss in &losses {
            loss.validate()?;
            if loss.dim() != family.dim {
                return Err(Error::DimensionMismatch {
                    expected: family.dim,
                    got: loss.dim(),
                });
            }
        }
        let k = losses.len();
        let lambda_g = prior(&family, hyper.delta)?;
        let eta0 = if config.method.is_point_estimate() {
            family.zero_dual()
        } else {
            family.natural_coords(&lambda_g)?
        };
        let server = ServerState {
            lambda_g: lambda_g.clone(),
            eta0,
            rho: hyper.rho,
            gamma: hyper.gamma.unwrap_or(hyper.rho),
            alpha_override: hyper.alpha,
            tau: hyper.tau,
            k,
            delta: hyper.delta,
            round: 0,
        };
        let clients = losses
            .into_iter()
            .enumerate()
            .map(|(id, loss)| ClientState {
                id,
                n_examples: loss.n_examples,
                loss,
                lambda: lambda_g.clone(),
                eta: family.zero_dual(),
            })
            .collect();
        let mut fed = Federation {
            config,
            family,
            server,
            clients,
            seed,
            pool: None,
        };
        fed.build_pool()?;
        Ok(fed)
    }

    fn build_pool(&mut self) -> Result<()> {
        self.pool = match self.config.workers {
            Some(n) => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?,
            )),
            None => None,
        };
        Ok(())
    }

    pub fn set_workers(&mut self, workers: Option<usize>) -> Result<()> {
        self.config.workers = workers;
        self.config.validate(&self.family)?;
        self.build_pool()
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Global point estimate (the server mean).
    pub fn theta_g(&self) -> &DVector<f64> {
        self.server.lambda_g.mean()
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::InvalidData(format!("checkpoint: {e}")))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut fed: Federation =
            serde_json::from_str(text).map_err(|e| Error::InvalidData(format!("checkpoint: {e}")))?;
        fed.family.validate()?;
        fed.config.validate(&fed.family)?;
        fed.family.check(&fed.server.lambda_g)?;
        for c in &fed.clients {
            fed.family.check(&c.lambda)?;
        }
        fed.build_pool()?;
        Ok(fed)
    }

    /// Runs one full round and commits it; on error the state is left unchanged.
    pub fn round(&mut self) -> Result<RoundReport> {
        let round = self.server.round + 1;
        let outcomes: Vec<Result<ClientOutcome>> = {
            let this = &*self;
            let work = || this.clients.par_iter().map(|c| this.client_update(c, round)).collect();
            match &self.pool {
                Some(pool) => pool.install(work),
                None => work(),
            }
        };
        let outcomes: Vec<ClientOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
        let lambda_g = self.server_update(&outcomes, round)?;
        let mut reports = Vec::with_capacity(outcomes.len());
        for (client, out) in self.clients.iter_mut().zip(outcomes) {
            client.lambda = out.lambda;
            client.eta = out.eta;
            reports.push(out.report);
        }
        self.server.lambda_g = lambda_g;
        self.server.round = round;
        Ok(RoundReport {
            round,
            clients: reports,
        })
    }

    fn client_update(&self, client: &ClientState, round: usize) -> Result<ClientOutcome> {
        let seed = derive_seed(self.seed, client.id, round);
        match self.config.method {
            Method::Admm => self.admm_client(client),
            Method::FedAvg { local_steps, lr } => self.fedavg_client(client, local_steps, lr),
            Method::IvonAdmm => self.ivon_client(client, seed),
            _ => self.bayes_client(client, seed),
        }
    }

    fn admm_client(&self, client: &ClientState) -> Result<ClientOutcome> {
        let s = &self.server;
        let loss = client.loss.scaled(1.0 / s.tau);
        let theta_g = s.lambda_g.mean();
        let mut v = client.eta.first().clone();
        let mut theta = theta_g.clone();
        let mut report = ClientReport {
            id: client.id,
            steps: 0,
            converged: true,
            grad_norm: 0.0,
            repeats: 0,
        };
        for _ in 0..self.config.client_repeats {
            let out = solvers::solve_admm_client(&loss, &v, theta_g, s.rho, &self.config.gd)?;
            theta = out.theta;
            v += (&theta - theta_g) * s.gamma;
            report.steps += out.steps;
            report.converged &= out.converged;
            report.grad_norm = out.grad_norm;
            report.repeats += 1;
            if linalg::max_abs_vec(&(&theta - theta_g)) <= self.config.client_repeat_tol {
                break;
            }
        }
        Ok(ClientOutcome {
            lambda: NatParam::Mean { m: theta },
            eta: DualVec::Vector { v },
            report,
        })
    }

    fn fedavg_client(&self, client: &ClientState, steps: usize, lr: f64) -> Result<ClientOutcome> {
        let s = &self.server;
        let total: usize = self.clients.iter().map(|c| c.n_examples).sum();
        let share = if total == 0 {
            1.0 / s.k as f64
        } else {
            client.n_examples as f64 / total as f64
        };
        let loss = client.loss.scaled(1.0 / s.tau);
        let mut theta = s.lambda_g.mean().clone();
        let mut norm = 0.0;
        for step in 0..steps {
            let g = loss.grad(&theta)? + &theta * (s.delta * share);
            norm = linalg::max_abs_vec(&g);
            if !norm.is_finite() {
                return Err(Error::NonFiniteUpdate {
                    step,
                    quantity: "FedAvg gradient".into(),
                });
            }
            theta -= g * lr;
        }
        Ok(ClientOutcome {
            lambda: NatParam::Mean { m: theta },
            eta: client.eta.clone(),
            report: ClientReport {
                id: client.id,
                steps,
                converged: true,
                grad_norm: norm,
                repeats: 1,
            },
        })
    }

    fn bayes_client(&self, client: &ClientState, seed: u64) -> Result<ClientOutcome> {
        let s = &self.server;
        let fam = &self.family;
        let (rho, step) = match self.config.method {
            Method::Pvi { damping } => (1.0, damping),
            _ => (s.rho, s.gamma),
        };
        let estimator = self.config.estimator_for(&client.loss, seed);
        let mut eta = client.eta.clone();
        let mut lambda = client.lambda.clone();
        let mut report = ClientReport {
            id: client.id,
            steps: 0,
            converged: true,
            grad_norm: 0.0,
            repeats: 0,
        };
        let mu_g = match self.config.method {
            Method::BregmanAdmm => Some(fam.to_expectation(&s.lambda_g)?),
            _ => None,
        };
        for _ in 0..self.config.client_repeats {
            let sp = Subproblem {
                fam,
                loss: &client.loss,
                eta: &eta,
                lambda_g: &s.lambda_g,
                rho,
                tau: s.tau,
            };
            let conjugate = match &self.config.inner {
                InnerSolver::Conjugate => true,
                InnerSolver::Auto => {
                    !self.config.delta_method
                        || matches!(
                            client.loss.kind,
                            LossKind::Quadratic { .. } | LossKind::LinearInT { .. }
                        )
                }
                _ => false,
            };
            let solved = if conjugate {
                match solvers::solve_conjugate(&sp) {
                    Ok(l) => Some(l),
                    Err(Error::NotConjugate(_)) if self.config.inner == InnerSolver::Auto => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            lambda = match solved {
                Some(l) => l,
                None => {
                    let cfg = match &self.config.inner {
                        InnerSolver::Von(c) => *c,
                        InnerSolver::Ivon(_) => {
                            return Err(Error::InvalidConfig(
                                "the IVON inner solver is only available to ivon_admm".into(),
                            ))
                        }
                        _ => VonConfig::default(),
                    };
                    let out = solvers::solve_von(&sp, &cfg, &estimator, None)?;
                    report.steps += out.steps;
                    report.converged &= out.converged;
                    report.grad_norm = out.grad_norm;
                    out.lambda
                }
            };
            let delta = match &mu_g {
                Some(mu_g) => fam.to_expectation(&lambda)?.ambient_sub(mu_g)?,
                None => fam.nat_sub(&lambda, &s.lambda_g)?,
            };
            eta = delta.axpy(step, &eta)?;
            report.repeats += 1;
            if delta.ambient_norm_inf() <= self.config.client_repeat_tol {
                break;
            }
        }
        Ok(ClientOutcome { lambda, eta, report })
    }

    fn ivon_client(&self, client: &ClientState, seed: u64) -> Result<ClientOutcome> {
        let s = &self.server;
        let cfg = match &self.config.inner {
            InnerSolver::Ivon(c) => IvonConfig { seed, ..c.clone() },
            _ => IvonConfig {
                seed,
                ..IvonConfig::default()
            },
        };
        let (NatParam::Diag { m: m_g, s: s_g }, DualVec::Diag { v, u }) = (&s.lambda_g, &client.eta) else {
            return Err(Error::FamilyMismatch("ivon_admm state must be diagonal".into()));
        };
        let n = client.n_examples.max(1) as f64;
        let avg = client.loss.scaled(1.0 / n);
        let loss_scale = n / (s.rho * s.tau);
        let var_p = s_g.map(|x| 1.0 / x);
        let out = solvers::solve_ivon(
            &avg,
            m_g,
            &var_p,
            loss_scale,
            &(v * (s.tau / n)),
            &(u * (s.tau / n)),
            &cfg,
        )?;
        let lambda = NatParam::Diag { m: out.m, s: out.s };
        let eta = DualVec::Diag {
            v: v + (lambda_sm(&lambda) - s_g.component_mul(m_g)) * s.gamma,
            u: u + (diag_s(&lambda) - s_g) * s.gamma,
        };
        Ok(ClientOutcome {
            lambda,
            eta,
            report: ClientReport {
                id: client.id,
                steps: cfg.steps,
                converged: true,
                grad_norm: f64::NAN,
                repeats: 1,
            },
        })
    }

    fn server_update(&self, outcomes: &[ClientOutcome], round: usize) -> Result<NatParam> {
        let s = &self.server;
        let fam = &self.family;
        let k = outcomes.len() as f64;
        let etas: Vec<&DualVec> = outcomes.iter().map(|o| &o.eta).collect();
        let eta_sum = dual_sum(etas.iter().copied())?.expect("at least one client");
        let lambda_g = match self.config.method {
            Method::Admm => {
                let thetas: Vec<DualVec> = outcomes
                    .iter()
                    .map(|o| DualVec::Vector {
                        v: o.lambda.mean().clone(),
                    })
                    .collect();
                let mean = dual_sum(&thetas)?.expect("at least one client").scale(1.0 / k);
                let a = 1.0 / (s.delta + s.rho * k);
                let theta = eta_sum.axpy(a, &mean.scale(1.0 - s.delta * a))?;
                NatParam::Mean {
                    m: theta.first().clone(),
                }
            }
            Method::FedAvg { .. } => {
                let total: usize = outcomes
                    .iter()
                    .map(|o| o.report.id)
                    .map(|i| self.clients[i].n_examples)
                    .sum();
                let weighted: Vec<DualVec> = outcomes
                    .iter()
                    .map(|o| {
                        let w = if total == 0 {
                            1.0 / k
                        } else {
                            self.clients[o.report.id].n_examples as f64 / total as f64
                        };
                        DualVec::Vector { v: o.lambda.mean() * w }
                    })
                    .collect();
                NatParam::Mean {
                    m: dual_sum(&weighted)?.expect("at least one client").first().clone(),
                }
            }
            Method::Pvi { .. } => {
                let coords = eta_sum.add(&s.eta0)?;
                fam.from_natural_coords(&coords)
                    .map_err(|e| Error::ResultNotInFamily(format!("server update at round {round}: {e}")))?
            }
            _ => {
                let lambdas: Vec<DualVec> = outcomes
                    .iter()
                    .map(|o| fam.natural_coords(&o.lambda))
                    .collect::<Result<_>>()?;
                let mean = dual_sum(&lambdas)?.expect("at least one client").scale(1.0 / k);
                let alpha = s.alpha();
                let coords = eta_sum.add(&s.eta0)?.axpy(alpha, &mean.scale(1.0 - alpha))?;
                if self.config.method == Method::IvonAdmm {
                    if let DualVec::Diag { u, .. } = &coords {
                        if let Some(i) = u.iter().position(|x| !(*x > 0.0)) {
                            return Err(Error::NonPositiveServerPrecision {
                                round,
                                index: i,
                                value: u[i],
                            });
                        }
                    }
                }
                fam.from_natural_coords(&coords)
                    .map_err(|e| Error::ResultNotInFamily(format!("server update at round {round}: {e}")))?
            }
        };
        if lambda_g.mean().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteUpdate {
                step: round,
                quantity: "server mean".into(),
            });
        }
        Ok(lambda_g)
    }

    /// Estimator used for natural gradients in diagnostics: exact where possible.
    pub fn diagnostic_estimator(&self, loss: &LossSpec) -> Estimator {
        self.config
            .estimator_for(loss, derive_seed(self.seed, usize::MAX, self.server.round))
    }

    /// Residuals of the four fixed-point conditions at the current state.
    pub fn verify_fixed_point(&self) -> Result<FixedPointReport> {
        let fam = &self.family;
        let s = &self.server;
        let mut consensus = 0.0_f64;
        let mut dual = 0.0_f64;
        if self.config.method.is_point_estimate() {
            let theta_g = s.lambda_g.mean();
            for c in &self.clients {
                let theta = c.lambda.mean();
                consensus = consensus.max(linalg::max_abs_vec(&(theta - theta_g)));
                let g = c.loss.grad(theta)? / s.tau;
                dual = dual.max(linalg::max_abs_vec(&(c.eta.first() + g)));
            }
            let sum = dual_sum(self.clients.iter().map(|c| &c.eta))?.expect("at least one client");
            let server = linalg::max_abs_vec(&(theta_g * s.delta - sum.first()));
            return Ok(FixedPointReport {
                consensus,
                dual,
                server,
                dual_map: 0.0,
            });
        }
        let mu_g = fam.to_expectation(&s.lambda_g)?;
        for c in &self.clients {
            let mu_k = fam.to_expectation(&c.lambda)?;
            consensus = consensus.max(mu_k.max_abs_diff(&mu_g)?);
            let est = self.diagnostic_estimator(&c.loss);
            let ng = c.loss.natural_gradient(fam, &c.lambda, &est)?.scale(1.0 / s.tau);
            dual = dual.max(c.eta.add(&ng)?.ambient_norm_inf());
        }
        let sum = dual_sum(self.clients.iter().map(|c| &c.eta))?.expect("at least one client");
        let lg = fam.natural_coords(&s.lambda_g)?;
        let server = lg.sub(&sum.add(&s.eta0)?)?.ambient_norm_inf();
        let back = fam.to_natural(&mu_g)?;
        let dual_map = fam.nat_sub(&back, &s.lambda_g)?.ambient_norm_inf();
        Ok(FixedPointReport {
            consensus,
            dual,
            server,
            dual_map,
        })
    }
}

fn lambda_sm(lambda: &NatParam) -> DVector<f64> {
    match lambda {
        NatParam::Diag { m, s } => s.component_mul(m),
        _ => unreachable!("ivon_admm keeps diagonal parameters"),
    }
}

fn diag_s(lambda: &NatParam) -> DVector<f64> {
    match lambda {
        NatParam::Diag { s, .. } => s.clone(),
        _ => unreachable!("ivon_admm keeps diagonal parameters"),
    }
}

/// Residuals of `μ_k = μ_g`, `η_k = -∇L_k(μ_k)/τ`, `λ_g = η_0 + Σ η_k` and `μ_g = ∇A(λ_g)`.
///
/// The same four quantities are the stationarity conditions of the Lagrangian saddle point.
/// For the point-estimate engines the third condition reads `δθ_g = Σ v_k` and the fourth is
/// identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub consensus: f64,
    pub dual: f64,
    pub server: f64,
    pub dual_map: f64,
}

impl FixedPointReport {
    pub fn as_array(&self) -> [f64; 4] {
        [self.consensus, self.dual, self.server, self.dual_map]
    }

    pub fn max(&self) -> f64 {
        self.as_array().iter().fold(0.0, |a, b| a.max(*b))
    }

    /// All residuals at most `tol`; a non-finite residual never passes.
    pub fn within(&self, tol: f64) -> bool {
        self.as_array().iter().all(|r| r.is_finite() && *r <= tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn ridge_shards(seed: u64, k: usize, n: usize, d: usize) -> Vec<LossSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                LossSpec::least_squares(&x, &y)
            })
            .collect()
    }

    fn logistic_shards(seed: u64, k: usize, n: usize, d: usize) -> Vec<LossSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|c| {
                let x = DMatrix::from_fn(n, d, |_, j| {
                    if j == d - 1 {
                        1.0
                    } else {
                        rng.random_range(-2.0..2.0) + c as f64 * 0.3
                    }
                });
                let y = DVector::from_fn(n, |i, _| {
                    if x[(i, 0)] + 2.0 * rng.random_range(-1.0..1.0) > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                });
                LossSpec::logistic(x, y)
            })
            .collect()
    }

    fn hyper(rho: f64) -> Hyper {
        Hyper {
            rho,
            ..Hyper::default()
        }
    }

    /// Joint posterior of quadratic shards under the prior `N(0, I/δ)` at temperature 1.
    fn joint(losses: &[LossSpec], delta: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = losses[0].dim();
        let mut s = DMatrix::identity(d, d) * delta;
        let mut b = DVector::zeros(d);
        for l in losses {
            let LossKind::Quadratic { a, b: bk, .. } = &l.kind else {
                panic!()
            };
            s += a;
            b -= bk;
        }
        let m = s.clone().try_inverse().unwrap() * b;
        (m, s)
    }

    #[test]
    fn alpha_matches_server_formula() {
        let fam = FamilyDescriptor::full(2);
        let fed = Federation::new(
            MethodConfig::new(Method::BayesAdmm),
            fam,
            hyper(0.5),
            ridge_shards(1, 10, 3, 2),
            0,
        )
        .unwrap();
        assert!((fed.server.alpha() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn admm_single_client_converges_to_joint_minimizer() {
        let fam = FamilyDescriptor::isotropic(3);
        let losses = ridge_shards(2, 1, 6, 3);
        let mut fed = Federation::new(MethodConfig::new(Method::Admm), fam, hyper(1.0), losses.clone(), 0).unwrap();
        for _ in 0..200 {
            fed.round().unwrap();
        }
        let (m, _) = joint(&losses, 1.0);
        let g = losses[0].grad(fed.theta_g()).unwrap() + fed.theta_g();
        assert!(linalg::max_abs_vec(&g) < 1e-8);
        assert!(linalg::max_abs_vec(&(fed.theta_g() - m)) < 1e-8);
        // v_k = -∇ℓ_k(θ_k)
        let c = &fed.clients[0];
        let resid = c.eta.first() + c.loss.grad(c.lambda.mean()).unwrap();
        assert!(linalg::max_abs_vec(&resid) < 1e-10);
    }

    #[test]
    fn one_round_convergence_for_linear_in_t() {
        let fam = FamilyDescriptor::full(2);
        let k = 3;
        let cs: Vec<DualVec> = (0..k)
            .map(|i| DualVec::Full {
                v: DVector::from_vec(vec![0.1 * i as f64, -0.2]),
                big_v: DMatrix::from_row_slice(2, 2, &[0.5 + i as f64, 0.1, 0.1, 0.3]),
            })
            .collect();
        let losses = cs.iter().cloned().map(LossSpec::linear_in_t).collect();
        let cfg = MethodConfig::new(Method::BayesAdmm).with_inner(InnerSolver::Conjugate);
        let mut fed = Federation::new(cfg, fam.clone(), hyper(1.0 / k as f64), losses, 0).unwrap();
        let eta0 = fed.server.eta0.clone();
        fed.round().unwrap();
        let expected = dual_sum(&cs).unwrap().unwrap().add(&eta0).unwrap();
        let got = fam.natural_coords(&fed.server.lambda_g).unwrap();
        let err = got.sub(&expected).unwrap().ambient_norm_inf();
        assert!(err < 1e-12, "{err} {got:?} {expected:?}");
        let before = fed.clone();
        fed.round().unwrap();
        for (a, b) in fed.clients.iter().zip(&before.clients) {
            assert!(fam.nat_sub(&a.lambda, &fed.server.lambda_g).unwrap().ambient_norm_inf() < 1e-12);
            assert!(a.eta.sub(&b.eta).unwrap().ambient_norm_inf() < 1e-12);
        }
        assert!(fed.verify_fixed_point().unwrap().within(1e-10));
    }

    #[test]
    fn isotropic_delta_method_recovers_admm() {
        let losses = ridge_shards(3, 4, 5, 3);
        let fam = FamilyDescriptor::isotropic(3);
        let mut admm = Federation::new(
            MethodConfig::new(Method::Admm),
            fam.clone(),
            hyper(0.7),
            losses.clone(),
            0,
        )
        .unwrap();
        let cfg = MethodConfig::new(Method::BayesAdmm).with_delta(true);
        let mut bayes = Federation::new(cfg, fam, hyper(0.7), losses, 0).unwrap();
        for _ in 0..50 {
            admm.round().unwrap();
            bayes.round().unwrap();
            assert!(linalg::max_abs_vec(&(admm.theta_g() - bayes.theta_g())) <= 1e-10);
            for (a, b) in admm.clients.iter().zip(&bayes.clients) {
                assert!(linalg::max_abs_vec(&(a.lambda.mean() - b.lambda.mean())) <= 1e-10);
                assert!(a.eta.sub(&b.eta).unwrap().ambient_norm_inf() <= 1e-10);
            }
        }
    }

    #[test]
    fn bregman_coincides_with_bayes_for_isotropic() {
        let losses = ridge_shards(4, 3, 5, 2);
        let fam = FamilyDescriptor::isotropic(2);
        let mut a = Federation::new(
            MethodConfig::new(Method::BayesAdmm),
            fam.clone(),
            hyper(0.5),
            losses.clone(),
            0,
        )
        .unwrap();
        let mut b = Federation::new(MethodConfig::new(Method::BregmanAdmm), fam, hyper(0.5), losses, 0).unwrap();
        for _ in 0..10 {
            a.round().unwrap();
            b.round().unwrap();
            assert_eq!(a.server.lambda_g, b.server.lambda_g);
        }
    }

    #[test]
    fn bregman_needs_more_than_one_round() {
        let k = 2;
        let losses = ridge_shards(5, k, 8, 3);
        let fam = FamilyDescriptor::full(3);
        let (m, s) = joint(&losses, 1.0);
        let star = fam.natural_coords(&NatParam::Full { m, s }).unwrap();
        let mut b = Federation::new(
            MethodConfig::new(Method::BregmanAdmm),
            fam.clone(),
            hyper(0.5),
            losses,
            0,
        )
        .unwrap();
        b.round().unwrap();
        let err = fam
            .natural_coords(&b.server.lambda_g)
            .unwrap()
            .sub(&star)
            .unwrap()
            .ambient_norm_inf();
        assert!(err > 1e-4, "{err}");
    }

    #[test]
    fn pvi_single_client_exact_in_one_round() {
        let losses = ridge_shards(6, 1, 10, 3);
        let fam = FamilyDescriptor::full(3);
        let (m, s) = joint(&losses, 1.0);
        let mut p = Federation::new(
            MethodConfig::new(Method::Pvi { damping: 1.0 }),
            fam.clone(),
            hyper(1.0),
            losses,
            0,
        )
        .unwrap();
        p.round().unwrap();
        let err = fam
            .nat_sub(&p.server.lambda_g, &NatParam::Full { m, s })
            .unwrap()
            .ambient_norm_inf();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn pvi_sites_factorize_global() {
        let losses = ridge_shards(7, 3, 6, 2);
        let fam = FamilyDescriptor::full(2);
        let mut p = Federation::new(
            MethodConfig::new(Method::Pvi { damping: 0.5 }),
            fam.clone(),
            hyper(1.0),
            losses,
            0,
        )
        .unwrap();
        for _ in 0..3 {
            p.round().unwrap();
        }
        let prior = prior(&fam, 1.0).unwrap();
        // log q_g - log π_0 - Σ log t_k is constant in θ
        let residual = |t: &DVector<f64>| {
            fam.log_density(&p.server.lambda_g, t).unwrap()
                - fam.log_density(&prior, t).unwrap()
                - p.clients.iter().map(|c| c.log_site(t)).sum::<f64>()
        };
        let base = residual(&DVector::zeros(2));
        for t in fam.sample(&p.server.lambda_g, 3, 5).unwrap() {
            assert!((residual(&t) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn pvi_damping_is_validated() {
        let fam = FamilyDescriptor::full(2);
        let res = Federation::new(
            MethodConfig::new(Method::Pvi { damping: 1.5 }),
            fam,
            hyper(1.0),
            ridge_shards(1, 2, 3, 2),
            0,
        );
        assert!(matches!(res, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ivon_admm_initial_state() {
        let fam = FamilyDescriptor::diag(2);
        let h = Hyper {
            delta: 0.3,
            ..hyper(1.0)
        };
        let fed = Federation::new(
            MethodConfig::new(Method::IvonAdmm),
            fam,
            h,
            logistic_shards(1, 2, 5, 2),
            0,
        )
        .unwrap();
        let NatParam::Diag { m, s } = &fed.server.lambda_g else {
            panic!()
        };
        assert_eq!(m.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.as_slice(), &[0.3, 0.3]);
        for c in &fed.clients {
            assert_eq!(c.eta.ambient_norm_inf(), 0.0);
        }
    }

    #[test]
    fn ivon_admm_requires_diag_family() {
        let fam = FamilyDescriptor::full(2);
        let res = Federation::new(
            MethodConfig::new(Method::IvonAdmm),
            fam,
            hyper(1.0),
            logistic_shards(1, 2, 5, 2),
            0,
        );
        assert!(matches!(res, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ivon_admm_single_client_matches_conjugate_posterior() {
        // 1-d quadratic with N = 1 so that the IVON loss scale stays at 1/(ρτ)
        let a = 2.0;
        let b = -1.0;
        let loss = LossSpec::quadratic(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), 1);
        let fam = FamilyDescriptor::diag(1);
        let h = Hyper {
            delta: 1.0,
            alpha: Some(1.0),
            ..hyper(1.0)
        };
        let ivon = IvonConfig {
            steps: 60_000,
            beta2: 0.9999,
            lr: vec![0.002],
            ..IvonConfig::default()
        };
        let cfg = MethodConfig::new(Method::IvonAdmm).with_inner(InnerSolver::Ivon(ivon));
        let mut fed = Federation::new(cfg, fam, h, vec![loss], 9).unwrap();
        fed.round().unwrap();
        let NatParam::Diag { m, s } = &fed.server.lambda_g else {
            panic!()
        };
        assert!((s[0] - (1.0 + a)).abs() < 5e-2, "{}", s[0]);
        assert!((m[0] - (-b / (1.0 + a))).abs() < 1e-2, "{}", m[0]);
    }

    #[test]
    fn fedavg_zero_steps_keeps_server() {
        let fam = FamilyDescriptor::isotropic(2);
        let mut fed = Federation::new(
            MethodConfig::new(Method::FedAvg {
                local_steps: 0,
                lr: 0.1,
            }),
            fam,
            hyper(1.0),
            ridge_shards(1, 3, 4, 2),
            0,
        )
        .unwrap();
        let before = fed.theta_g().clone();
        fed.round().unwrap();
        assert_eq!(fed.theta_g(), &before);
    }

    #[test]
    fn fedavg_identical_clients_match_centralized_gd() {
        let shard = ridge_shards(8, 1, 6, 2).remove(0);
        let k = 3;
        let fam = FamilyDescriptor::isotropic(2);
        let steps = 5;
        let lr = 0.05;
        let mut fed = Federation::new(
            MethodConfig::new(Method::FedAvg { local_steps: steps, lr }),
            fam,
            hyper(1.0),
            vec![shard.clone(); k],
            0,
        )
        .unwrap();
        fed.round().unwrap();
        let mut theta = DVector::zeros(2);
        for _ in 0..steps {
            let g = shard.grad(&theta).unwrap() + &theta / k as f64;
            theta -= g * lr;
        }
        assert!(linalg::max_abs_vec(&(fed.theta_g() - theta)) < 1e-14);
    }

    #[test]
    fn fixed_point_at_conjugate_oracle() {
        let losses = ridge_shards(9, 3, 6, 3);
        let fam = FamilyDescriptor::full(3);
        let (m, s) = joint(&losses, 1.0);
        let star = NatParam::Full { m, s };
        let cfg = MethodConfig::new(Method::BayesAdmm);
        let mut fed = Federation::new(cfg, fam.clone(), hyper(1.0), losses, 0).unwrap();
        fed.server.lambda_g = star.clone();
        for c in fed.clients.iter_mut() {
            c.lambda = star.clone();
            c.eta = c
                .loss
                .natural_gradient(&fam, &star, &Estimator::Analytic)
                .unwrap()
                .scale(-1.0);
        }
        let r = fed.verify_fixed_point().unwrap();
        assert!(r.within(1e-10), "{r:?}");
    }

    #[test]
    fn fixed_point_dual_residual_at_zero_duals() {
        let losses = ridge_shards(10, 2, 5, 2);
        let fam = FamilyDescriptor::diag(2);
        let fed = Federation::new(MethodConfig::new(Method::BayesAdmm), fam.clone(), hyper(1.0), losses, 0).unwrap();
        let r = fed.verify_fixed_point().unwrap();
        let expected = fed
            .clients
            .iter()
            .map(|c| {
                c.loss
                    .natural_gradient(&fam, &fed.server.lambda_g, &Estimator::Analytic)
                    .unwrap()
                    .ambient_norm_inf()
            })
            .fold(0.0, f64::max);
        assert!((r.dual - expected).abs() < 1e-14);
        assert!(!r.within(1e-6));
    }

    #[test]
    fn failed_round_leaves_state_untouched() {
        let fam = FamilyDescriptor::diag(1);
        let loss = LossSpec::linear_in_t(DualVec::Diag {
            v: DVector::zeros(1),
            u: DVector::from_element(1, -10.0),
        });
        let cfg = MethodConfig::new(Method::BayesAdmm).with_inner(InnerSolver::Conjugate);
        let mut fed = Federation::new(cfg, fam, hyper(1.0), vec![loss], 0).unwrap();
        let before = fed.clone();
        let err = fed.round().unwrap_err();
        assert!(err.is_divergence());
        assert_eq!(fed, before);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let losses = logistic_shards(11, 4, 10, 3);
        let fam = FamilyDescriptor::full(3);
        let run = |workers| {
            let mut cfg = MethodConfig::new(Method::BayesAdmm);
            cfg.workers = workers;
            let mut fed = Federation::new(cfg, fam.clone(), hyper(1.0), losses.clone(), 42).unwrap();
            for _ in 0..3 {
                fed.round().unwrap();
            }
            serde_json::to_string(&(&fed.server, &fed.clients)).unwrap()
        };
        let a = run(Some(1));
        assert_eq!(a, run(Some(4)));
        assert_eq!(a, run(None));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let losses = logistic_shards(12, 2, 6, 2);
        let fam = FamilyDescriptor::diag(2);
        let mut fed = Federation::new(MethodConfig::new(Method::BayesAdmm), fam, hyper(1.0), losses, 5).unwrap();
        fed.round().unwrap();
        let text = fed.to_checkpoint().unwrap();
        let mut back = Federation::from_checkpoint(&text).unwrap();
        assert_eq!(back, fed);
        fed.round().unwrap();
        back.round().unwrap();
        assert_eq!(back, fed);
    }

    #[test]
    fn derived_seeds_differ_across_clients_and_rounds() {
        let a = derive_seed(1, 0, 1);
        assert_ne!(a, derive_seed(1, 1, 1));
        assert_ne!(a, derive_seed(1, 0, 2));
        assert_ne!(a, derive_seed(2, 0, 1));
        assert_eq!(a, derive_seed(1, 0, 1));
    }

    #[test]
    fn converged_clients_give_blr_step() {
        let losses = logistic_shards(13, 2, 15, 2);
        let fam = FamilyDescriptor::full(2);
        let mut cfg = MethodConfig::new(Method::BayesAdmm).with_inner(InnerSolver::Von(VonConfig {
            beta: 0.5,
            max_steps: 500,
            tol: 1e-12,
        }));
        cfg.delta_method = true;
        cfg.client_repeats = 500;
        cfg.client_repeat_tol = 1e-12;
        let mut fed = Federation::new(cfg, fam.clone(), hyper(1.0), losses, 0).unwrap();
        fed.round().unwrap();
        let lg = fed.server.lambda_g.clone();
        let alpha = fed.server.alpha();
        let mut ng = fed.server.eta0.clone();
        for c in &fed.clients {
            ng = c
                .loss
                .natural_gradient(&fam, &lg, &Estimator::Delta)
                .unwrap()
                .axpy(-1.0, &ng)
                .unwrap();
        }
        let blr = ng
            .axpy(alpha, &fam.natural_coords(&lg).unwrap().scale(1.0 - alpha))
            .unwrap();
        fed.round().unwrap();
        let got = fam.natural_coords(&fed.server.lambda_g).unwrap();
        let err = got.sub(&blr).unwrap().ambient_norm_inf();
        assert!(err < 1e-8, "{err}");
    }
}
