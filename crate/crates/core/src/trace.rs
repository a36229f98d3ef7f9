//! JSON-lines run traces and the round driver that produces them.
//!
//! A trace is one header line, one record per completed round, and at most one terminal
//! divergence event. With timing off a trace is a pure function of config and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Federation, FixedPointReport};
use crate::harness::{self, Dataset, MetricsConfig, Oracle};

pub const TRACE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format: u32,
    pub method: String,
    pub family: String,
    pub seed: u64,
    pub config_hash: String,
    /// Inner-solver convergence tolerance the run used, when one applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: usize,
    pub method: String,
    /// Finite metric values by name; a metric that cannot be evaluated is absent.
    pub metrics: BTreeMap<String, f64>,
    pub residuals: FixedPointReport,
    pub clients_converged: bool,
    pub max_inner_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceEvent {
    pub round: usize,
    pub method: String,
    /// Error kind, e.g. `result_not_in_family`.
    pub error: String,
    /// The offending quantity as reported by the failing check.
    pub quantity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Round(RoundRecord),
    Divergence(DivergenceEvent),
}

/// Writes one JSON object per line and flushes after each, so a crash loses at most one line.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write(&mut self, line: &TraceLine) -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| Error::InvalidData(format!("trace encode: {e}")))?;
        writeln!(self.out, "{text}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::InvalidData(format!("trace line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveOptions {
    pub rounds: usize,
    /// Threshold on `dist_oracle` (or on the largest residual without an oracle) for
    /// `rounds_to_tol`.
    pub tol: f64,
    /// Stop as soon as the threshold is met.
    #[serde(default)]
    pub stop_at_tol: bool,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Record `wall_ms`; off keeps traces byte-identical across runs.
    #[serde(default)]
    pub timing: bool,
}

impl Default for DriveOptions {
    fn default() -> Self {
        DriveOptions {
            rounds: 10,
            tol: 1e-8,
            stop_at_tol: false,
            metrics: MetricsConfig::default(),
            timing: false,
        }
    }
}

/// What a round record is evaluated against.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluation<'a> {
    pub test: Option<&'a Dataset>,
    pub oracle: Option<&'a Oracle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub config_hash: String,
    pub rounds_run: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds_to_tol: Option<usize>,
    pub alpha: f64,
    pub final_metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_residuals: Option<FixedPointReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceEvent>,
}

/// Metrics of the current server state.
pub fn evaluate(fed: &Federation, eval: &Evaluation, cfg: &MetricsConfig) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if let Some(oracle) = eval.oracle {
        let (d, kl) = harness::oracle_distance(&fed.family, &fed.server.lambda_g, oracle)?;
        insert_finite(&mut out, "dist_oracle", Some(d));
        insert_finite(&mut out, "kl_oracle", kl);
    }
    if let Some(test) = eval.test {
        let m = harness::metrics(&fed.family, &fed.server.lambda_g, test, None, cfg)?;
        insert_finite(&mut out, "nll", Some(m.nll));
        insert_finite(&mut out, "nll_posterior", m.nll_posterior);
        insert_finite(&mut out, "accuracy", m.accuracy);
    }
    Ok(out)
}

fn insert_finite(map: &mut BTreeMap<String, f64>, key: &str, v: Option<f64>) {
    if let Some(v) = v.filter(|v| v.is_finite()) {
        map.insert(key.to_string(), v);
    }
}

fn divergence(fed: &Federation, round: usize, err: &Error) -> DivergenceEvent {
    DivergenceEvent {
        round,
        method: fed.method().name().to_string(),
        error: err.kind_name().to_string(),
        quantity: err.to_string(),
    }
}

/// Runs up to `opts.rounds` rounds, writing the header, one record per round and a terminal
/// divergence event if one occurs. Divergence ends the run but is not an error.
pub fn drive<W: Write>(
    fed: &mut Federation,
    header: TraceHeader,
    eval: &Evaluation,
    opts: &DriveOptions,
    writer: &mut TraceWriter<W>,
) -> Result<(RunSummary, Vec<RoundRecord>)> {
    let mut summary = RunSummary {
        method: fed.method().name().to_string(),
        config_hash: header.config_hash.clone(),
        rounds_run: 0,
        rounds_to_tol: None,
        alpha: fed.server.alpha(),
        final_metrics: BTreeMap::new(),
        final_residuals: None,
        divergence: None,
    };
    writer.write(&TraceLine::Header(header))?;
    let mut records = Vec::new();
    for _ in 0..opts.rounds {
        let round = fed.server.round + 1;
        let start = Instant::now();
        let step = fed.round().and_then(|report| {
            let residuals = fed.verify_fixed_point()?;
            if !residuals.as_array().iter().all(|r| r.is_finite()) {
                return Err(Error::NonFiniteUpdate {
                    step: round,
                    quantity: "fixed-point residual".into(),
                });
            }
            let metrics = evaluate(fed, eval, &opts.metrics)?;
            Ok((report, residuals, metrics))
        });
        let (report, residuals, metrics) = match step {
            Ok(v) => v,
            Err(e) if e.is_divergence() => {
                let ev = divergence(fed, round, &e);
                writer.write(&TraceLine::Divergence(ev.clone()))?;
                summary.divergence = Some(ev);
                break;
            }
            Err(e) => return Err(e),
        };
        let record = RoundRecord {
            round: report.round,
            method: summary.method.clone(),
            metrics,
            residuals,
            clients_converged: report.clients.iter().all(|c| c.converged),
            max_inner_steps: report.clients.iter().map(|c| c.steps).max().unwrap_or(0),
            wall_ms: opts.timing.then(|| start.elapsed().as_millis() as u64),
        };
        writer.write(&TraceLine::Round(record.clone()))?;
        summary.rounds_run = record.round;
        let reached = match record.metrics.get("dist_oracle") {
            Some(d) => *d <= opts.tol,
            None => residuals.within(opts.tol),
        };
        if reached && summary.rounds_to_tol.is_none() {
            summary.rounds_to_tol = Some(record.round);
        }
        summary.final_metrics = record.metrics.clone();
        summary.final_residuals = Some(residuals);
        records.push(record);
        if reached && opts.stop_at_tol {
            break;
        }
    }
    Ok((summary, records))
}

/// First round whose metric satisfies `pred`.
pub fn first_round_where(records: &[RoundRecord], metric: &str, pred: impl Fn(f64) -> bool) -> Option<usize> {
    records
        .iter()
        .find(|r| r.metrics.get(metric).is_some_and(|v| pred(*v)))
        .map(|r| r.round)
}
