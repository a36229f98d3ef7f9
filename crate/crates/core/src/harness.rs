//! Datasets, heterogeneous splits, independent oracles and evaluation metrics.
//!
//! Nothing here depends on the round engines: the oracles use dense linear algebra or a
//! single-client solver path, so engine convergence can be measured against them.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{FamilyDescriptor, FamilyKind, NatParam};
use crate::federation::{prior, ClientState, Federation, FixedPointReport, Hyper, Method, MethodConfig};
use crate::linalg;
use crate::losses::{Estimator, LossKind, LossSpec};
use crate::solvers::{self, Subproblem, VonConfig};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const DEFAULT_POSTERIOR_SAMPLES: usize = 32;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Labels {
    Real(Vec<f64>),
    /// `0` or `1`.
    Binary(Vec<u8>),
    Classes(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Binary(v) => v.len(),
            Labels::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Binary(v) => Labels::Binary(idx.iter().map(|&i| v[i]).collect()),
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Class index of example `i`; `None` for real-valued targets.
    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self {
            Labels::Real(_) => None,
            Labels::Binary(v) => Some(v[i] as usize),
            Labels::Classes(v) => Some(v[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "linalg::serde_matrix")]
    pub x: DMatrix<f64>,
    pub labels: Labels,
    /// Number of classes; `0` for regression targets.
    pub class_count: usize,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, labels: Labels, class_count: usize) -> Result<Self> {
        let ds = Dataset { x, labels, class_count };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.x.nrows(),
                got: self.labels.len(),
            });
        }
        if let Some(p) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite feature at flat index {p}")));
        }
        match &self.labels {
            Labels::Real(v) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::InvalidData("non-finite regression target".into()));
                }
            }
            Labels::Binary(v) => {
                if self.class_count != 2 || v.iter().any(|&y| y > 1) {
                    return Err(Error::InvalidData(
                        "binary labels must be 0 or 1 with class_count 2".into(),
                    ));
                }
            }
            Labels::Classes(v) => {
                if let Some(&y) = v.iter().find(|&&y| y >= self.class_count) {
                    return Err(Error::InvalidData(format!("label {y} outside 0..{}", self.class_count)));
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.x[(idx[r], c)]);
        Dataset {
            x,
            labels: self.labels.select(idx),
            class_count: self.class_count,
        }
    }

    /// Appends a constant-one feature column.
    pub fn with_bias(&self) -> Dataset {
        let mut x = self.x.clone().insert_column(self.dim(), 1.0);
        if self.is_empty() {
            x = DMatrix::zeros(0, self.dim() + 1);
        }
        Dataset {
            x,
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    /// The natural loss for the label type: least squares, logistic or softmax cross-entropy.
    pub fn loss(&self) -> LossSpec {
        match &self.labels {
            Labels::Real(y) => LossSpec::least_squares(&self.x, &DVector::from_column_slice(y)),
            Labels::Binary(y) => LossSpec::logistic(
                self.x.clone(),
                DVector::from_iterator(y.len(), y.iter().map(|&v| v as f64)),
            ),
            Labels::Classes(y) => LossSpec::multiclass(self.x.clone(), y.clone(), self.class_count),
        }
    }

    /// Parameter dimension of [`Dataset::loss`].
    pub fn param_dim(&self) -> usize {
        match self.labels {
            Labels::Classes(_) => self.dim() * self.class_count,
            _ => self.dim(),
        }
    }

    /// Row-wise concatenation; all parts must share label type and feature dimension.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyDataset("nothing to concatenate".into()))?;
        let n: usize = parts.iter().map(Dataset::len).sum();
        let d = first.dim();
        let mut x = DMatrix::zeros(n, d);
        let mut row = 0;
        let mut labels = first.labels.select(&[]);
        for p in parts {
            if p.dim() != d || p.class_count != first.class_count {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
            x.rows_mut(row, p.len()).copy_from(&p.x);
            row += p.len();
            labels = match (labels, &p.labels) {
                (Labels::Real(mut a), Labels::Real(b)) => {
                    a.extend(b);
                    Labels::Real(a)
                }
                (Labels::Binary(mut a), Labels::Binary(b)) => {
                    a.extend(b);
                    Labels::Binary(a)
                }
                (Labels::Classes(mut a), Labels::Classes(b)) => {
                    a.extend(b);
                    Labels::Classes(a)
                }
                _ => return Err(Error::InvalidData("label types differ".into())),
            };
        }
        Dataset::new(x, labels, first.class_count)
    }
}

/// Linear-Gaussian regression data `y = Xw + ε` with standard-normal features and weights.
pub fn gen_ridge(n: usize, d: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig("gen_ridge needs n, d >= 1".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise_sd = {noise_sd} must be nonnegative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let clean = &x * w;
    let y = clean
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + noise_sd * z
        })
        .collect::<Vec<f64>>();
    Dataset::new(x, Labels::Real(y), 0)
}

/// Two-client separable binary data with one flipped label on client 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierToy {
    /// Features include the bias column.
    pub train: Dataset,
    pub shards: Vec<Vec<usize>>,
    /// Row of the mislabeled point in `train`.
    pub outlier: usize,
}

impl OutlierToy {
    /// Training points without the outlier.
    pub fn clean(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.train.len()).filter(|&i| i != self.outlier).collect();
        self.train.subset(&idx)
    }

    pub fn shard_datasets(&self) -> Vec<Dataset> {
        self.shards.iter().map(|s| self.train.subset(s)).collect()
    }
}

pub fn gen_outlier_toy(seed: u64) -> OutlierToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.35).expect("valid normal");
    let per_class = 8;
    let mut rows: Vec<[f64; 2]> = Vec::new();
    let mut labels = Vec::new();
    let mut shards = vec![Vec::new(), Vec::new()];
    // client 0 sits lower-left of client 1; the classes are split by the line x0 + x1 = 0
    let centers = [[(-1.5, -0.5), (0.5, 1.5)], [(-0.5, -1.5), (1.5, 0.5)]];
    for (client, cs) in centers.iter().enumerate() {
        for (label, &(cx, cy)) in cs.iter().enumerate() {
            for _ in 0..per_class {
                let p = [cx + jitter.sample(&mut rng), cy + jitter.sample(&mut rng)];
                shards[client].push(rows.len());
                rows.push(p);
                labels.push(label as u8);
            }
        }
    }
    let outlier = rows.len();
    rows.push([3.0 + jitter.sample(&mut rng) * 0.2, 2.5 + jitter.sample(&mut rng) * 0.2]);
    labels.push(0);
    shards[0].push(outlier);
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| if j < 2 { rows[i][j] } else { 1.0 });
    let train = Dataset::new(x, Labels::Binary(labels), 2).expect("generated data is valid");
    OutlierToy { train, shards, outlier }
}

/// Gaussian blobs, one per class, with means drawn at distance `separation` scale.
pub fn gen_blobs(n_per_class: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || classes < 2 || dim == 0 {
        return Err(Error::InvalidConfig(
            "gen_blobs needs n_per_class >= 1, classes >= 2, dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<DVector<f64>> = (0..classes)
        .map(|_| {
            DVector::from_fn(dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                separation * z
            })
        })
        .collect();
    let n = n_per_class * classes;
    let mut x = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = means[c][j] + z;
        }
        labels.push(c);
    }
    Dataset::new(x, Labels::Classes(labels), classes)
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    cur.read_u32::<BigEndian>()
        .map_err(|_| Error::TruncatedFile(format!("{what}: header ends early")))
}

fn check_magic(cur: &mut Cursor<&[u8]>, expected: u32, what: &str) -> Result<()> {
    let found = read_u32(cur, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses IDX image and label buffers; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let mut ci = Cursor::new(images);
    check_magic(&mut ci, IDX_IMAGES_MAGIC, "images")?;
    let n_img = read_u32(&mut ci, "images")? as usize;
    let rows = read_u32(&mut ci, "images")? as usize;
    let cols = read_u32(&mut ci, "images")? as usize;
    let mut cl = Cursor::new(labels);
    check_magic(&mut cl, IDX_LABELS_MAGIC, "labels")?;
    let n_lab = read_u32(&mut cl, "labels")? as usize;
    if n_img != n_lab {
        return Err(Error::DimensionMismatch {
            expected: n_img,
            got: n_lab,
        });
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    if n == 0 {
        return Err(Error::EmptyDataset("IDX selection holds no examples".into()));
    }
    let d = rows * cols;
    let pix_start = ci.position() as usize;
    let lab_start = cl.position() as usize;
    if images.len() < pix_start + n * d {
        return Err(Error::TruncatedFile(format!(
            "images: need {} bytes, have {}",
            pix_start + n * d,
            images.len()
        )));
    }
    if labels.len() < lab_start + n {
        return Err(Error::TruncatedFile(format!(
            "labels: need {} bytes, have {}",
            lab_start + n,
            labels.len()
        )));
    }
    let pix = &images[pix_start..pix_start + n * d];
    let x = DMatrix::from_fn(n, d, |i, j| pix[i * d + j] as f64 / 255.0);
    let ys: Vec<usize> = labels[lab_start..lab_start + n].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().copied().max().unwrap_or(0).max(9) + 1;
    Dataset::new(x, Labels::Classes(ys), classes)
}

/// Reads IDX image and label files; `limit` keeps the first examples.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let read = |p: &Path| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        fs::File::open(p)
            .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?
            .read_to_end(&mut buf)?;
        Ok(buf)
    };
    parse_idx(&read(images)?, &read(labels)?, limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Real,
    Binary,
    Classes,
}

/// CSV with a header row; the last column is the label.
pub fn parse_csv<R: BufRead>(reader: R, kind: LabelKind) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let width = rdr
        .headers()
        .map_err(|e| Error::InvalidData(format!("csv header: {e}")))?
        .len();
    if width < 2 {
        return Err(Error::InvalidData(
            "csv needs at least one feature and a label column".into(),
        ));
    }
    let mut feats = Vec::new();
    let mut raw_labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidData(format!("csv record {}: {e}", line + 2)))?;
        let mut vals = Vec::with_capacity(width);
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidData(format!(
                    "csv line {}, column {}: '{field}' is not a number",
                    line + 2,
                    col + 1
                ))
            })?;
            vals.push(v);
        }
        raw_labels.push(vals.pop().expect("width checked"));
        feats.extend(vals);
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset("csv has no records".into()));
    }
    let x = DMatrix::from_row_slice(n, width - 1, &feats);
    let as_class = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidData(format!("label {v} is not a class index")))
        }
    };
    match kind {
        LabelKind::Real => Dataset::new(x, Labels::Real(raw_labels), 0),
        LabelKind::Binary => {
            let ys = raw_labels
                .iter()
                .map(|&v| as_class(v).map(|c| c as u8))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(x, Labels::Binary(ys), 2)
        }
        LabelKind::Classes => {
            let ys = raw_labels.iter().map(|&v| as_class(v)).collect::<Result<Vec<_>>>()?;
            let classes = ys.iter().copied().max().unwrap_or(0) + 1;
            Dataset::new(x, Labels::Classes(ys), classes)
        }
    }
}

pub fn load_csv(path: &Path, kind: LabelKind) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(BufReader::new(f), kind)
}

/// Average-pools square images of side `side` by `factor` in each direction.
pub fn pool_images(ds: &Dataset, side: usize, factor: usize) -> Result<Dataset> {
    if factor == 0 || !side.is_multiple_of(factor) || ds.dim() != side * side {
        return Err(Error::InvalidConfig(format!(
            "cannot pool {}-pixel images of side {side} by {factor}",
            ds.dim()
        )));
    }
    let out = side / factor;
    let norm = (factor * factor) as f64;
    let x = DMatrix::from_fn(ds.len(), out * out, |i, j| {
        let (r0, c0) = ((j / out) * factor, (j % out) * factor);
        let mut acc = 0.0;
        for r in r0..r0 + factor {
            for c in c0..c0 + factor {
                acc += ds.x[(i, r * side + c)];
            }
        }
        acc / norm
    });
    Dataset::new(x, ds.labels.clone(), ds.class_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitKind {
    /// Shuffled contiguous shards of near-equal size.
    Homogeneous,
    /// `assignments[k]` lists the classes held by client `k`; every class appears once.
    ClassPartition { assignments: Vec<Vec<usize>> },
    /// Per-class client proportions drawn from a symmetric Dirichlet.
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    #[serde(flatten)]
    pub kind: SplitKind,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Partitions example indices over `plan.k` clients; each shard is sorted ascending.
pub fn split(ds: &Dataset, plan: &SplitPlan) -> Result<Vec<Vec<usize>>> {
    if plan.k == 0 {
        return Err(Error::InvalidConfig("split needs k >= 1".into()));
    }
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut shards = vec![Vec::new(); plan.k];
    match &plan.kind {
        SplitKind::Homogeneous => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let base = n / plan.k;
            let extra = n % plan.k;
            let mut start = 0;
            for (k, shard) in shards.iter_mut().enumerate() {
                let len = base + usize::from(k < extra);
                shard.extend_from_slice(&idx[start..start + len]);
                start += len;
            }
        }
        SplitKind::ClassPartition { assignments } => {
            if assignments.len() != plan.k {
                return Err(Error::InvalidConfig(format!(
                    "class partition lists {} clients, expected {}",
                    assignments.len(),
                    plan.k
                )));
            }
            let mut owner = vec![None; ds.class_count];
            for (k, classes) in assignments.iter().enumerate() {
                for &c in classes {
                    match owner.get_mut(c) {
                        Some(slot @ None) => *slot = Some(k),
                        Some(Some(_)) => return Err(Error::InvalidConfig(format!("class {c} assigned twice"))),
                        None => return Err(Error::InvalidConfig(format!("class {c} does not exist"))),
                    }
                }
            }
            for i in 0..n {
                let c = ds
                    .labels
                    .class_of(i)
                    .ok_or_else(|| Error::InvalidConfig("class partition needs class labels".into()))?;
                let k = owner[c].ok_or_else(|| Error::InvalidConfig(format!("class {c} is not assigned")))?;
                shards[k].push(i);
            }
        }
        SplitKind::Dirichlet { concentration } => {
            if !(*concentration > 0.0) {
                return Err(Error::InvalidConfig("Dirichlet concentration must be positive".into()));
            }
            if ds.class_count == 0 {
                return Err(Error::InvalidConfig("Dirichlet split needs class labels".into()));
            }
            let gamma = Gamma::new(*concentration, 1.0).map_err(|e| Error::InvalidConfig(format!("Dirichlet: {e}")))?;
            for c in 0..ds.class_count {
                let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels.class_of(i) == Some(c)).collect();
                members.shuffle(&mut rng);
                let w: Vec<f64> = (0..plan.k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                // cumulative rounding keeps every member assigned exactly once
                let mut acc = 0.0;
                let mut start = 0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk / total;
                    let end = if k + 1 == plan.k {
                        members.len()
                    } else {
                        ((acc * members.len() as f64).round() as usize).clamp(start, members.len())
                    };
                    shards[k].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
        }
    }
    for (k, shard) in shards.iter_mut().enumerate() {
        if shard.is_empty() {
            return Err(Error::EmptyClient(k));
        }
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Random seeded permutation split into train and test parts.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (ds.len() as f64 * test_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ConjugateClosedForm,
    FullBatchReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub kind: OracleKind,
    pub family: FamilyDescriptor,
    pub lambda: NatParam,
    /// Estimator the oracle's stationarity holds under.
    pub estimator: Estimator,
    pub delta: f64,
    pub tau: f64,
}

impl Oracle {
    /// Fixed-point residuals of the oracle posed as a one-client federation with its exact dual.
    pub fn verify(&self, losses: &[LossSpec]) -> Result<FixedPointReport> {
        let mut cfg = MethodConfig::new(Method::BayesAdmm);
        cfg.estimator = Some(self.estimator);
        let hyper = Hyper {
            delta: self.delta,
            tau: self.tau,
            ..Hyper::default()
        };
        let mut fed = Federation::new(cfg, self.family.clone(), hyper, losses.to_vec(), 0)?;
        fed.server.lambda_g = self.lambda.clone();
        let clients: Vec<ClientState> = fed
            .clients
            .iter()
            .map(|c| {
                let ng = c.loss.natural_gradient(&self.family, &self.lambda, &self.estimator)?;
                Ok(ClientState {
                    lambda: self.lambda.clone(),
                    eta: ng.scale(-1.0 / self.tau),
                    ..c.clone()
                })
            })
            .collect::<Result<_>>()?;
        fed.clients = clients;
        fed.verify_fixed_point()
    }
}

/// Tempered posterior `S* = δI + Σ A_k/τ`, `S* m* = -Σ b_k/τ` for quadratic (or linear-in-T)
/// losses, by a direct dense solve.
pub fn conjugate_oracle(delta: f64, losses: &[LossSpec], dim: usize, tau: f64) -> Result<Oracle> {
    if !(delta > 0.0) || !(tau > 0.0) {
        return Err(Error::InvalidConfig("delta and tau must be positive".into()));
    }
    let mut s = DMatrix::identity(dim, dim) * delta;
    let mut r = DVector::zeros(dim);
    for loss in losses {
        if loss.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: loss.dim(),
            });
        }
        match &loss.kind {
            LossKind::Quadratic { a, b, .. } => {
                s += a / tau;
                r -= b / tau;
            }
            LossKind::LinearInT { c } => {
                let full = solvers::conjugate_parameter(&FamilyDescriptor::full(dim), loss)
                    .ok_or_else(|| Error::NotConjugate(format!("{} layout", c.layout_name())))?;
                let crate::expfam::DualVec::Full { v, big_v } = full else {
                    unreachable!("promoted to the full layout")
                };
                s += big_v / tau;
                r += v / tau;
            }
            _ => {
                return Err(Error::NotConjugate(format!(
                    "{} loss has no closed-form posterior",
                    loss.kind_name()
                )))
            }
        }
    }
    let s = linalg::symmetrize(&s);
    let chol = linalg::cholesky(&s).map_err(|e| Error::SingularSystem(e.to_string()))?;
    let m = chol.solve(&r);
    Ok(Oracle {
        kind: OracleKind::ConjugateClosedForm,
        family: FamilyDescriptor::full(dim),
        lambda: NatParam::Full { m, s },
        estimator: Estimator::Analytic,
        delta,
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub von: VonConfig,
    pub estimator: Estimator,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            von: VonConfig {
                beta: 0.5,
                max_steps: 5000,
                tol: 1e-8,
            },
            estimator: Estimator::Delta,
        }
    }
}

/// Full-batch natural-gradient solution of the tempered variational problem on the pooled
/// data, started at the prior.
pub fn reference_solution(
    fam: &FamilyDescriptor,
    pooled: &LossSpec,
    delta: f64,
    tau: f64,
    cfg: &ReferenceConfig,
) -> Result<Oracle> {
    let p = prior(fam, delta)?;
    let eta = fam.zero_dual();
    let sp = Subproblem {
        fam,
        loss: pooled,
        eta: &eta,
        lambda_g: &p,
        rho: 1.0,
        tau,
    };
    let out = solvers::solve_von(&sp, &cfg.von, &cfg.estimator, None)?;
    if !out.converged {
        return Err(Error::ReferenceNotConverged {
            residual: out.grad_norm,
            iters: out.steps,
        });
    }
    Ok(Oracle {
        kind: OracleKind::FullBatchReference,
        family: fam.clone(),
        lambda: out.lambda,
        estimator: cfg.estimator,
        delta,
        tau,
    })
}

/// Evaluation of one posterior (or point estimate) on held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-example negative log-likelihood at the posterior mean.
    pub nll: f64,
    /// Mean NLL of the prediction averaged over posterior samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll_posterior: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// `‖λ - λ*‖∞`, or the mean distance when the families differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_oracle: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Posterior samples for the averaged prediction; `0` disables it.
    pub samples: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            samples: DEFAULT_POSTERIOR_SAMPLES,
            seed: 0,
        }
    }
}

/// Per-example predictive probabilities of the observed label, or Gaussian densities for
/// regression targets.
fn label_likelihoods(ds: &Dataset, theta: &DVector<f64>) -> Result<Vec<f64>> {
    match &ds.labels {
        Labels::Real(y) => {
            let pred = &ds.x * theta;
            Ok(y.iter()
                .zip(pred.iter())
                .map(|(yi, pi)| (-0.5 * (yi - pi).powi(2) - 0.5 * LN_2PI).exp())
                .collect())
        }
        _ => {
            let probs = ds.loss().predict_proba(&ds.x, theta)?;
            Ok((0..ds.len())
                .map(|i| probs[(i, ds.labels.class_of(i).expect("class labels"))])
                .collect())
        }
    }
}

fn regression_nll(ds: &Dataset, theta: &DVector<f64>) -> f64 {
    let Labels::Real(y) = &ds.labels else { unreachable!() };
    let pred = &ds.x * theta;
    let total = linalg::compensated_sum(
        y.iter()
            .zip(pred.iter())
            .map(|(yi, pi)| 0.5 * (yi - pi).powi(2) + 0.5 * LN_2PI),
    );
    total / ds.len() as f64
}

fn mean_nll(ds: &Dataset, theta: &DVector<f64>) -> Result<f64> {
    if matches!(ds.labels, Labels::Real(_)) {
        return Ok(regression_nll(ds, theta));
    }
    let lik = label_likelihoods(ds, theta)?;
    Ok(linalg::compensated_sum(lik.iter().map(|p| -p.max(f64::MIN_POSITIVE).ln())) / ds.len() as f64)
}

pub fn accuracy(ds: &Dataset, theta: &DVector<f64>) -> Result<Option<f64>> {
    if matches!(ds.labels, Labels::Real(_)) || ds.is_empty() {
        return Ok(None);
    }
    let probs = ds.loss().predict_proba(&ds.x, theta)?;
    let hits = (0..ds.len())
        .filter(|&i| {
            let row = probs.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (c, &p)| if p > b.1 { (c, p) } else { b })
                .0;
            Some(best) == ds.labels.class_of(i)
        })
        .count();
    Ok(Some(hits as f64 / ds.len() as f64))
}

/// `‖λ - λ*‖∞` and `KL(q_λ ‖ q*)` when the families agree; otherwise the largest mean
/// difference and no KL.
pub fn oracle_distance(fam: &FamilyDescriptor, lambda: &NatParam, oracle: &Oracle) -> Result<(f64, Option<f64>)> {
    if oracle.family == *fam {
        Ok((
            fam.nat_sub(lambda, &oracle.lambda)?.ambient_norm_inf(),
            Some(fam.kl(lambda, &oracle.lambda)?),
        ))
    } else {
        Ok((linalg::max_abs_vec(&(lambda.mean() - oracle.lambda.mean())), None))
    }
}

/// Metrics of `q_λ` on `test`. Point-estimate states (mean-only families) skip the
/// posterior-averaged prediction.
pub fn metrics(
    fam: &FamilyDescriptor,
    lambda: &NatParam,
    test: &Dataset,
    oracle: Option<&Oracle>,
    cfg: &MetricsConfig,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set".into()));
    }
    let m = lambda.mean();
    let nll = mean_nll(test, m)?;
    let nll_posterior = if cfg.samples > 0 && !matches!(fam.kind, FamilyKind::IsotropicUnit) {
        let draws = fam.sample(lambda, cfg.seed, cfg.samples)?;
        let mut avg = vec![0.0; test.len()];
        for t in &draws {
            for (a, p) in avg.iter_mut().zip(label_likelihoods(test, t)?) {
                *a += p / draws.len() as f64;
            }
        }
        Some(linalg::compensated_sum(avg.iter().map(|p| -p.max(f64::MIN_POSITIVE).ln())) / test.len() as f64)
    } else {
        None
    };
    let (dist_oracle, kl_oracle) = match oracle {
        Some(o) => {
            let (d, kl) = oracle_distance(fam, lambda, o)?;
            (Some(d), kl)
        }
        None => (None, None),
    };
    Ok(Metrics {
        nll,
        nll_posterior,
        accuracy: accuracy(test, m)?,
        dist_oracle,
        kl_oracle,
    })
}

/// Uniform draws in `[lo, hi)`; exposed for generators in tests and tools.
pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}
