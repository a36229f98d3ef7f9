//! The `run`, `sweep`, `verify` and `oracle` subcommands.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bayes_admm::federation::{Federation, FixedPointReport};
use bayes_admm::harness::{
    self, conjugate_oracle, gen_blobs, gen_outlier_toy, gen_ridge, load_csv, load_idx, pool_images, reference_solution,
    split, train_test_split, Dataset, MetricsConfig, Oracle, ReferenceConfig,
};
use bayes_admm::losses::{Estimator, LossKind, LossSpec};
use bayes_admm::trace::{
    drive, DriveOptions, Evaluation, RoundRecord, RunSummary, TraceHeader, TraceWriter, TRACE_FORMAT,
};
use bayes_admm::FamilyKind;
use serde::Serialize;

use crate::config::{data_dir, DataSource, EstimatorName, OracleChoice, RunConfig};
use crate::svg;
use crate::CliError;

pub const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "train-labels-idx1-ubyte";
const MNIST_SIDE: usize = 28;

/// Outcome of a command that completed without an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Diverged,
    /// `verify` found a residual above tolerance.
    ResidualsAboveTol,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Completed => 0,
            Outcome::Diverged => 2,
            Outcome::ResidualsAboveTol => 3,
        }
    }
}

/// Everything a run needs, built from a config alone.
pub struct Experiment {
    pub federation: Federation,
    pub shards: Vec<Dataset>,
    pub train: Dataset,
    pub test: Dataset,
    pub oracle: Option<Oracle>,
    /// Which data source actually backed the run.
    pub data_note: String,
}

fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(dir) = data_dir() {
            return dir.join(p);
        }
    }
    p.to_path_buf()
}

/// Data as loaded, before the train/test split and the client split.
struct Loaded {
    data: Dataset,
    /// Evaluation set fixed by the source.
    test: Option<Dataset>,
    /// Client split fixed by the source.
    shards: Option<Vec<Vec<usize>>>,
    note: String,
}

impl Loaded {
    fn plain(data: Dataset, note: impl Into<String>) -> Self {
        Loaded {
            data,
            test: None,
            shards: None,
            note: note.into(),
        }
    }
}

/// Loads or generates the training data and the evaluation set.
fn load_data(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let d = &cfg.data;
    let with_bias = |ds: Dataset| if d.bias { ds.with_bias() } else { ds };
    match d.source {
        DataSource::Ridge => Ok(Loaded::plain(gen_ridge(d.n, d.d, d.noise_sd, d.seed)?, "ridge")),
        DataSource::OutlierToy => {
            let toy = gen_outlier_toy(d.seed);
            Ok(Loaded {
                test: Some(toy.clean()),
                shards: Some(toy.shards.clone()),
                ..Loaded::plain(toy.train.clone(), "outlier_toy")
            })
        }
        DataSource::Blobs => {
            let per_class = (d.n / d.classes.max(1)).max(1);
            let ds = gen_blobs(per_class, d.classes, d.d, d.separation, d.seed)?;
            Ok(Loaded::plain(with_bias(ds), "blobs"))
        }
        DataSource::Mnist => {
            let dir = data_dir();
            let files = dir
                .as_ref()
                .map(|dir| (dir.join(MNIST_IMAGES), dir.join(MNIST_LABELS)))
                .filter(|(i, l)| i.exists() && l.exists());
            match files {
                Some((images, labels)) => {
                    let raw = load_idx(&images, &labels, d.limit)?;
                    let ds = if d.pool > 1 {
                        pool_images(&raw, MNIST_SIDE, d.pool)?
                    } else {
                        raw
                    };
                    Ok(Loaded::plain(with_bias(ds), format!("mnist:{}", images.display())))
                }
                None => {
                    let n = d.limit.unwrap_or(d.n);
                    let ds = gen_blobs((n / 10).max(1), 10, d.d, d.separation, d.seed)?;
                    Ok(Loaded::plain(with_bias(ds), "synthetic_blobs_standin"))
                }
            }
        }
        DataSource::Csv => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("data.path is required for source = \"csv\"".into()))?;
            let ds = load_csv(&resolve_data_path(path), d.label_kind)?;
            Ok(Loaded::plain(with_bias(ds), format!("csv:{}", path.display())))
        }
    }
}

fn all_quadratic(losses: &[LossSpec]) -> bool {
    losses.iter().all(|l| matches!(l.kind, LossKind::Quadratic { .. }))
}

pub fn prepare(cfg: &RunConfig) -> Result<Experiment, CliError> {
    let Loaded {
        data,
        test: fixed_test,
        shards: fixed_shards,
        note: data_note,
    } = load_data(cfg)?;
    let (train, test) = match fixed_test {
        Some(test) => (data, test),
        None if cfg.data.test_fraction > 0.0 => train_test_split(&data, cfg.data.test_fraction, cfg.data.seed)?,
        None => (data.clone(), data),
    };
    let shard_idx = match fixed_shards {
        Some(s) => s,
        None => split(&train, &cfg.split.plan())?,
    };
    let shards: Vec<Dataset> = shard_idx.iter().map(|s| train.subset(s)).collect();
    let losses: Vec<LossSpec> = shards.iter().map(Dataset::loss).collect();
    let dim = train.param_dim();
    let family = cfg.family(dim)?;
    let h = &cfg.hyper;
    let oracle = match cfg.eval.oracle {
        OracleChoice::None => None,
        OracleChoice::Auto if !all_quadratic(&losses) => None,
        OracleChoice::Auto | OracleChoice::Conjugate => Some(conjugate_oracle(h.delta, &losses, dim, h.tau)?),
        OracleChoice::Reference => {
            // deterministic estimators only: a sampled reference cannot meet a 1e-8 tolerance
            let estimator = match cfg.method.estimator {
                Some(EstimatorName::Analytic) => Estimator::Analytic,
                _ => Estimator::Delta,
            };
            let rc = ReferenceConfig {
                von: cfg.eval.reference,
                estimator,
            };
            Some(reference_solution(&family, &train.loss(), h.delta, h.tau, &rc)?)
        }
    };
    let federation = Federation::new(cfg.method_config(), family, cfg.hyper, losses, cfg.seed)?;
    Ok(Experiment {
        federation,
        shards,
        train,
        test,
        oracle,
        data_note,
    })
}

#[derive(Debug, Serialize)]
struct SummaryFile<'a> {
    status: &'static str,
    data: &'a str,
    #[serde(flatten)]
    summary: &'a RunSummary,
}

pub struct RunResult {
    pub outcome: Outcome,
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
    pub dir: PathBuf,
}

/// Executes one configured run into `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunResult, CliError> {
    let mut exp = prepare(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let header = TraceHeader {
        format: TRACE_FORMAT,
        method: exp.federation.method().name().to_string(),
        family: cfg.method.family_name().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        inner_tol: cfg.inner_tol(),
        config: cfg.canonical_json(),
    };
    let opts = DriveOptions {
        rounds: cfg.rounds,
        tol: cfg.eval.tol,
        stop_at_tol: cfg.eval.stop_at_tol,
        metrics: MetricsConfig {
            samples: cfg.eval.samples,
            seed: cfg.seed,
        },
        timing: cfg.eval.timing,
    };
    let eval = Evaluation {
        test: Some(&exp.test),
        oracle: exp.oracle.as_ref(),
    };
    let file = fs::File::create(cfg.out.join("trace.jsonl"))?;
    let mut writer = TraceWriter::new(BufWriter::new(file));
    let (summary, records) = drive(&mut exp.federation, header, &eval, &opts, &mut writer)?;
    drop(writer);
    let outcome = if summary.divergence.is_some() {
        Outcome::Diverged
    } else {
        Outcome::Completed
    };
    let file = SummaryFile {
        status: if outcome == Outcome::Diverged {
            "diverged"
        } else {
            "completed"
        },
        data: &exp.data_note,
        summary: &summary,
    };
    write_json(&cfg.out.join("summary.json"), &file)?;
    fs::write(cfg.out.join("checkpoint.json"), exp.federation.to_checkpoint()?)?;
    if cfg.svg {
        let metric = svg::pick_metric(&records);
        fs::write(
            cfg.out.join("chart.svg"),
            svg::line_chart(&records, metric, &summary.method),
        )?;
    }
    Ok(RunResult {
        outcome,
        summary,
        records,
        dir: cfg.out.clone(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub rho: f64,
    pub tau: f64,
    pub alpha: f64,
    pub status: String,
    pub rounds_run: usize,
    pub converged: bool,
    pub rounds_to_tol: Option<usize>,
    pub dist_oracle: Option<f64>,
    pub nll: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: String,
}

/// Cartesian grid over `ρ` and `τ`; each cell runs into `out/cell-<i>` and a failing cell is
/// recorded without stopping the sweep.
pub fn sweep(cfg: &RunConfig, rhos: &[f64], taus: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    let rhos = if rhos.is_empty() {
        vec![cfg.hyper.rho]
    } else {
        rhos.to_vec()
    };
    let taus = if taus.is_empty() {
        vec![cfg.hyper.tau]
    } else {
        taus.to_vec()
    };
    fs::create_dir_all(&cfg.out)?;
    let mut rows = Vec::new();
    for &rho in &rhos {
        for &tau in &taus {
            let mut cell = cfg.clone();
            cell.hyper.rho = rho;
            cell.hyper.tau = tau;
            cell.out = cfg.out.join(format!("cell-{}", rows.len()));
            let k = match cell.data.source {
                DataSource::OutlierToy => 2,
                _ => cell.split.k,
            };
            let alpha = cell.hyper.alpha.unwrap_or(1.0 / (1.0 + rho * k as f64));
            let mut row = SweepRow {
                rho,
                tau,
                alpha,
                status: String::new(),
                rounds_run: 0,
                converged: false,
                rounds_to_tol: None,
                dist_oracle: None,
                nll: None,
                accuracy: None,
                error: String::new(),
            };
            match run(&cell) {
                Ok(res) => {
                    let s = &res.summary;
                    row.status = match res.outcome {
                        Outcome::Diverged => "diverged".into(),
                        _ => "completed".into(),
                    };
                    row.alpha = s.alpha;
                    row.rounds_run = s.rounds_run;
                    row.converged = s.rounds_to_tol.is_some();
                    row.rounds_to_tol = s.rounds_to_tol;
                    row.dist_oracle = s.final_metrics.get("dist_oracle").copied();
                    row.nll = s.final_metrics.get("nll").copied();
                    row.accuracy = s.final_metrics.get("accuracy").copied();
                    if let Some(ev) = &s.divergence {
                        row.error = ev.quantity.clone();
                    }
                }
                Err(e) => {
                    row.status = "error".into();
                    row.error = e.to_string();
                }
            }
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}

/// Residuals of a checkpointed state.
pub fn verify(checkpoint: &Path) -> Result<FixedPointReport, CliError> {
    let text = fs::read_to_string(checkpoint).map_err(|e| CliError::Io(format!("{}: {e}", checkpoint.display())))?;
    let fed = Federation::from_checkpoint(&text)?;
    Ok(fed.verify_fixed_point()?)
}

#[derive(Debug, Serialize)]
pub struct OracleReport {
    pub family: &'static str,
    pub delta: f64,
    pub tau: f64,
    pub posterior: bayes_admm::NatParam,
}

/// Closed-form posterior of a conjugate configuration.
pub fn oracle(cfg: &RunConfig) -> Result<OracleReport, CliError> {
    let Loaded { data, shards, .. } = load_data(cfg)?;
    let train = if cfg.data.test_fraction > 0.0 {
        train_test_split(&data, cfg.data.test_fraction, cfg.data.seed)?.0
    } else {
        data
    };
    let shards = match shards {
        Some(s) => s,
        None => split(&train, &cfg.split.plan())?,
    };
    let losses: Vec<LossSpec> = shards.iter().map(|s| train.subset(s).loss()).collect();
    let o = conjugate_oracle(cfg.hyper.delta, &losses, train.param_dim(), cfg.hyper.tau)?;
    Ok(OracleReport {
        family: FamilyKind::FullPrecision.name(),
        delta: o.delta,
        tau: o.tau,
        posterior: o.lambda,
    })
}

/// Metrics of the final state on the evaluation set, for callers that build experiments
/// themselves.
pub fn final_metrics(exp: &Experiment, cfg: &RunConfig) -> Result<harness::Metrics, CliError> {
    let fed = &exp.federation;
    Ok(harness::metrics(
        &fed.family,
        &fed.server.lambda_g,
        &exp.test,
        exp.oracle.as_ref(),
        &MetricsConfig {
            samples: cfg.eval.samples,
            seed: cfg.seed,
        },
    )?)
}
