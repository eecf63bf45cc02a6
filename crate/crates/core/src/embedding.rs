//! Unit-norm embeddings, class ids and in-memory embedding stores.
//!
//! Every vector that flows through retrieval and adaptation is an
//! ℓ2-normalized `f64` embedding. Construction goes through [`normalize`] (or
//! the validating [`UnitVector::from_unit`]) so downstream code can rely on
//! the unit-norm invariant.

use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

/// Norms at or below this are treated as having no direction.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Tolerance of the unit-norm invariant for freshly normalized vectors.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// An ℓ2-normalized embedding of dimension ≥ 2.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps values that are already unit norm within `tol`.
    pub fn from_unit(values: Vec<f64>, tol: f64) -> Result<Self> {
        check_finite(&values)?;
        let norm = norm(&values);
        if (norm - 1.0).abs() > tol {
            return Err(Error::NormViolation { row: 0, norm });
        }
        Ok(Self(values))
    }

    /// Standard basis vector `e_axis` in dimension `dim`.
    pub fn basis(dim: usize, axis: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if axis >= dim {
            return Err(Error::InvalidParameter(format!("axis {axis} >= dim {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Ok(Self(v))
    }

    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

impl Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// 1-based class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(usize);

impl ClassId {
    pub fn new(value: usize, classes: usize) -> Result<Self> {
        if value == 0 || value > classes {
            return Err(Error::InvalidClass { id: value, classes });
        }
        Ok(Self(value))
    }

    /// Class id for a 0-based column index.
    pub fn from_index(index: usize) -> Self {
        Self(index + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// 0-based column index of this class.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Plain dot product in a fixed left-to-right order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit ℓ2 norm.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.len() < 2 {
        return Err(Error::DimensionTooSmall(v.len()));
    }
    check_finite(v)?;
    let n = norm(v);
    if n <= ZERO_NORM_THRESHOLD {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(())
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
///
/// Products are commutative and the traversal order is fixed, so the result is
/// exactly symmetric in its arguments.
pub fn cosine(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Euclidean distance between two unit vectors, `sqrt(2 - 2 cos)`.
pub fn chordal_distance(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    let c = cosine(a, b)?;
    Ok((2.0 - 2.0 * c).max(0.0).sqrt())
}

/// Pairwise (cascade) summation with a fixed split rule, so the reduction
/// tree depends only on the input length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().fold(0.0, |acc, x| acc + x);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// A labeled or unlabeled collection of unit embeddings of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: Vec<UnitVector>,
    labels: Option<Vec<ClassId>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, vectors: Vec<UnitVector>, labels: Option<Vec<ClassId>>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.dim() });
        }
        if let Some(labels) = &labels {
            if labels.len() != vectors.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} vectors",
                    labels.len(),
                    vectors.len()
                )));
            }
        }
        Ok(Self { dim, vectors, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[UnitVector] {
        &self.vectors
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn get(&self, index: usize) -> Option<&UnitVector> {
        self.vectors.get(index)
    }
}
