//! Run configuration: a TOML file, overridden by command-line flags.
//!
//! Precedence, highest first: explicit flags, the config file, built-in defaults. Unknown keys
//! are rejected at every level.

use std::path::{Path, PathBuf};

use bayes_admm::federation::{Hyper, InnerSolver, Method, MethodConfig};
use bayes_admm::harness::{LabelKind, SplitKind, SplitPlan};
use bayes_admm::losses::{Estimator, DEFAULT_MC_SAMPLES};
use bayes_admm::solvers::{GdConfig, IvonConfig, VonConfig};
use bayes_admm::{FamilyDescriptor, FamilyKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DATA_ENV: &str = "BAYES_ADMM_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Output directory; not part of the experiment identity.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub svg: bool,
    /// Client worker threads; results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    pub method: MethodSection,
    pub hyper: Hyper,
    pub data: DataSection,
    pub split: SplitSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            rounds: 20,
            out: PathBuf::from("out"),
            svg: false,
            workers: None,
            method: MethodSection::default(),
            hyper: Hyper::default(),
            data: DataSection::default(),
            split: SplitSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Admm,
    BayesAdmm,
    Pvi,
    BregmanAdmm,
    IvonAdmm,
    Fedavg,
}

impl std::str::FromStr for MethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| format!("unknown method '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerName {
    Auto,
    Conjugate,
    Von,
    Ivon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    Analytic,
    Delta,
    MonteCarlo,
    Reparam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: MethodName,
    pub family: FamilyKind,
    /// PVI dual damping.
    pub damping: f64,
    /// FedAvg local gradient steps and step size.
    pub local_steps: usize,
    pub lr: f64,
    pub inner: InnerName,
    /// `None` lets the engine choose per loss.
    pub estimator: Option<EstimatorName>,
    pub samples: usize,
    pub delta_method: bool,
    pub client_repeats: usize,
    pub client_repeat_tol: f64,
    pub von: VonConfig,
    pub ivon: IvonConfig,
    pub gd: GdConfig,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            name: MethodName::BayesAdmm,
            family: FamilyKind::FullPrecision,
            damping: 1.0,
            local_steps: 10,
            lr: 0.1,
            inner: InnerName::Auto,
            estimator: None,
            samples: DEFAULT_MC_SAMPLES,
            delta_method: false,
            client_repeats: 1,
            client_repeat_tol: 0.0,
            von: VonConfig::default(),
            ivon: IvonConfig::default(),
            gd: GdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Ridge,
    OutlierToy,
    Blobs,
    /// IDX files from the data directory, with a synthetic 10-class stand-in when absent.
    Mnist,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub noise_sd: f64,
    pub classes: usize,
    pub separation: f64,
    /// CSV path, relative paths resolve against the data directory first.
    pub path: Option<PathBuf>,
    pub label_kind: LabelKind,
    pub limit: Option<usize>,
    /// Average-pool 28×28 images by this factor.
    pub pool: usize,
    pub bias: bool,
    /// Held-out share for evaluation; `0` evaluates on the training data.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Ridge,
            seed: 0,
            n: 100,
            d: 10,
            noise_sd: 0.5,
            classes: 10,
            separation: 3.0,
            path: None,
            label_kind: LabelKind::Binary,
            limit: None,
            pool: 4,
            bias: true,
            test_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub kind: SplitKindName,
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
    pub concentration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKindName {
    Homogeneous,
    ClassPartition,
    Dirichlet,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            kind: SplitKindName::Homogeneous,
            k: 2,
            seed: 0,
            assignments: Vec::new(),
            concentration: 1.0,
        }
    }
}

impl MethodSection {
    pub fn family_name(&self) -> &'static str {
        self.family.name()
    }
}

impl SplitSection {
    pub fn plan(&self) -> SplitPlan {
        let kind = match self.kind {
            SplitKindName::Homogeneous => SplitKind::Homogeneous,
            SplitKindName::ClassPartition => SplitKind::ClassPartition {
                assignments: self.assignments.clone(),
            },
            SplitKindName::Dirichlet => SplitKind::Dirichlet {
                concentration: self.concentration,
            },
        };
        SplitPlan {
            kind,
            k: self.k,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    /// Closed form when every loss is quadratic, none otherwise.
    Auto,
    None,
    Conjugate,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub oracle: OracleChoice,
    /// Threshold for `rounds_to_tol`.
    pub tol: f64,
    pub stop_at_tol: bool,
    pub samples: usize,
    pub timing: bool,
    pub reference: VonConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            oracle: OracleChoice::Auto,
            tol: 1e-8,
            stop_at_tol: false,
            samples: bayes_admm::harness::DEFAULT_POSTERIOR_SAMPLES,
            timing: false,
            reference: VonConfig {
                max_steps: 5000,
                ..VonConfig::default()
            },
        }
    }
}

/// Flag values that replace file values when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub method: Option<MethodName>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub damping: Option<f64>,
    pub family: Option<FamilyKind>,
    pub svg: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.rounds {
            self.rounds = v;
        }
        if let Some(v) = o.method {
            self.method.name = v;
        }
        if let Some(v) = o.rho {
            self.hyper.rho = v;
        }
        if o.gamma.is_some() {
            self.hyper.gamma = o.gamma;
        }
        if let Some(v) = o.tau {
            self.hyper.tau = v;
        }
        if let Some(v) = o.delta {
            self.hyper.delta = v;
        }
        if let Some(v) = o.damping {
            self.method.damping = v;
        }
        if let Some(v) = o.family {
            self.method.family = v;
        }
        self.svg |= o.svg;
    }

    /// Canonical JSON of the experiment-defining fields.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical_json()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn method(&self) -> Method {
        match self.method.name {
            MethodName::Admm => Method::Admm,
            MethodName::BayesAdmm => Method::BayesAdmm,
            MethodName::Pvi => Method::Pvi {
                damping: self.method.damping,
            },
            MethodName::BregmanAdmm => Method::BregmanAdmm,
            MethodName::IvonAdmm => Method::IvonAdmm,
            MethodName::Fedavg => Method::FedAvg {
                local_steps: self.method.local_steps,
                lr: self.method.lr,
            },
        }
    }

    pub fn estimator(&self) -> Option<Estimator> {
        let count = self.method.samples;
        self.method.estimator.map(|e| match e {
            EstimatorName::Analytic => Estimator::Analytic,
            EstimatorName::Delta => Estimator::Delta,
            EstimatorName::MonteCarlo => Estimator::MonteCarlo { count, seed: None },
            EstimatorName::Reparam => Estimator::Reparam { count, seed: None },
        })
    }

    pub fn method_config(&self) -> MethodConfig {
        let m = &self.method;
        let inner = match m.inner {
            InnerName::Auto => InnerSolver::Auto,
            InnerName::Conjugate => InnerSolver::Conjugate,
            InnerName::Von => InnerSolver::Von(m.von),
            InnerName::Ivon => InnerSolver::Ivon(m.ivon.clone()),
        };
        MethodConfig {
            method: self.method(),
            inner,
            gd: m.gd,
            estimator: self.estimator(),
            delta_method: m.delta_method,
            client_repeats: m.client_repeats,
            client_repeat_tol: m.client_repeat_tol,
            workers: self.workers,
        }
    }

    pub fn family(&self, dim: usize) -> Result<FamilyDescriptor, CliError> {
        match self.method.family {
            FamilyKind::IsotropicUnit => Ok(FamilyDescriptor::isotropic(dim)),
            FamilyKind::DiagPrecision => Ok(FamilyDescriptor::diag(dim)),
            FamilyKind::FullPrecision => Ok(FamilyDescriptor::full(dim)),
            FamilyKind::FixedPrecision => Err(CliError::Config(
                "method.family = \"fixed_precision\" needs a precision matrix and is library-only".into(),
            )),
        }
    }

    /// Inner tolerance recorded in the trace header.
    pub fn inner_tol(&self) -> Option<f64> {
        match (self.method.name, self.method.inner) {
            (MethodName::Admm | MethodName::Fedavg, _) => Some(self.method.gd.tol),
            (MethodName::IvonAdmm, _) | (_, InnerName::Ivon) => None,
            (_, InnerName::Von) => Some(self.method.von.tol),
            _ => Some(VonConfig::default().tol),
        }
    }
}

/// Directory named by the data environment variable, if set.
pub fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_ENV).map(PathBuf::from)
}

pub fn parse_family(s: &str) -> Result<FamilyKind, String> {
    match s {
        "isotropic" | "isotropic_unit" => Ok(FamilyKind::IsotropicUnit),
        "diag" | "diag_precision" => Ok(FamilyKind::DiagPrecision),
        "full" | "full_precision" => Ok(FamilyKind::FullPrecision),
        "fixed" | "fixed_precision" => Ok(FamilyKind::FixedPrecision),
        _ => Err(format!("unknown family '{s}' (isotropic, diag, full)")),
    }
}
