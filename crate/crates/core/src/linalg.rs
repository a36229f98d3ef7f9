//! Dense linear-algebra helpers shared by the family algebra, the solvers and the oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter policy for Cholesky factorizations of symmetric positive-definite matrices.
///
/// On failure, `scale * trace / dim` is added to the diagonal and the factorization is retried,
/// multiplying the jitter by ten each time, at most `retries` times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub retries: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            scale: 1e-10,
            retries: 3,
        }
    }
}

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization with the default jitter policy.
pub fn cholesky(mat: &DMatrix<f64>) -> Result<Chol> {
    cholesky_with(mat, Jitter::default())
}

pub fn cholesky_with(mat: &DMatrix<f64>, jitter: Jitter) -> Result<Chol> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::DimensionMismatch {
            expected: mat.nrows(),
            got: mat.ncols(),
        });
    }
    if mat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonPositivePrecision("non-finite entry".into()));
    }
    if let Some(c) = Cholesky::new(mat.clone()) {
        return Ok(c);
    }
    let n = mat.nrows().max(1) as f64;
    let trace = mat.trace();
    if trace <= 0.0 {
        return Err(Error::NonPositivePrecision(format!("trace {trace:e}")));
    }
    let mut eps = jitter.scale * trace / n;
    for _ in 0..jitter.retries {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::NonPositivePrecision("cholesky failed".into()))
}

pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `L^T x = z` for the lower Cholesky factor `L` of a precision matrix, which maps a
/// standard normal draw `z` to a draw with covariance equal to the inverse precision.
pub fn solve_upper_transpose(chol: &Chol, z: &DVector<f64>) -> DVector<f64> {
    let l = chol.l();
    l.transpose()
        .solve_upper_triangular(z)
        .expect("cholesky factor has a positive diagonal")
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

pub fn max_abs_mat(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Neumaier-compensated accumulator for a single scalar.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Elementwise compensated sum over a sequence of equally shaped slices.
pub fn compensated_sum_slices<'a, I>(len: usize, items: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![CompensatedSum::default(); len];
    for item in items {
        assert_eq!(item.len(), len, "compensated sum over mismatched lengths");
        for (a, x) in acc.iter_mut().zip(item) {
            a.add(*x);
        }
    }
    acc.iter().map(CompensatedSum::value).collect()
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Row-major (de)serialization of dense matrices as nested arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(n, c, rows.into_iter().flatten()))
    }
}

pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

pub mod serde_opt_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => super::serde_matrix::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(d)?;
        match rows {
            None => Ok(None),
            Some(rows) => {
                let n = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != c) {
                    return Err(serde::de::Error::custom("ragged matrix rows"));
                }
                Ok(Some(DMatrix::from_row_iterator(n, c, rows.into_iter().flatten())))
            }
        }
    }
}
