//! Classifier heads, losses and risks.
//!
//! Four heads produce class scores for a unit query `z`:
//!
//! * ZOC: cosine with each class text embedding.
//! * RET: per-class mean of exponentially sharpened cache similarities.
//! * EN: `α·ZOC + γ·RET`.
//! * THEORY: the linear head `(αT + βS + γK̄)ᵀz` with `α + β + γ = 1` and no
//!   exponential scaling, used by the bound checks.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, pairwise_sum, ClassId, UnitVector};
use crate::error::{Error, Result};
use crate::retrieval::{Cache, ClassAverages, ClassMatrix};

/// Which head produced a logit vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "ZOC")]
    Zoc,
    #[serde(rename = "RET")]
    Ret,
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "THEORY")]
    Theory,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Zoc => "ZOC",
            Head::Ret => "RET",
            Head::En => "EN",
            Head::Theory => "THEORY",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector {
    scores: Vec<f64>,
    head: Head,
}

impl LogitVector {
    pub fn new(scores: Vec<f64>, head: Head) -> Self {
        Self { scores, head }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn classes(&self) -> usize {
        self.scores.len()
    }

    pub fn predict(&self) -> ClassId {
        predict(&self.scores)
    }
}

/// Ensemble weights `(α, β, γ)`, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EnsembleWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, w) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidParameter(format!("{name} = {w} outside [0, 1]")));
            }
        }
        Ok(Self { alpha, beta, gamma })
    }

    /// Weights for the cache ensemble, `β = 0`.
    pub fn ensemble(alpha: f64, gamma: f64) -> Result<Self> {
        Self::new(alpha, 0.0, gamma)
    }

    /// `α = 1/(1+r)`, `γ = r/(1+r)` for a `γ:α` ratio `r`.
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio >= 0.0) {
            return Err(Error::InvalidParameter(format!("weight ratio {ratio}")));
        }
        Self::ensemble(1.0 / (1.0 + ratio), ratio / (1.0 + ratio))
    }

    pub fn sum(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }

    fn check_convex(&self) -> Result<()> {
        if (self.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::WeightSumViolation(self.sum()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub z: UnitVector,
    pub y: ClassId,
}

impl LabeledSample {
    pub fn new(z: UnitVector, y: ClassId) -> Self {
        Self { z, y }
    }
}

fn check_dim(expected: usize, z: &UnitVector) -> Result<()> {
    if z.dim() != expected {
        return Err(Error::DimensionMismatch { expected, found: z.dim() });
    }
    Ok(())
}

pub fn zoc_logits(text: &ClassAverages, z: &UnitVector) -> Result<LogitVector> {
    check_dim(text.dim(), z)?;
    let scores = text.columns().iter().map(|t| dot(t, z).clamp(-1.0, 1.0)).collect();
    Ok(LogitVector::new(scores, Head::Zoc))
}

/// `exp(ω(s − 1))`: maps `[-1, 1]` onto `[exp(−2ω), 1]`, strictly increasing.
pub fn exp_scale(s: f64, omega: f64) -> f64 {
    (omega * (s - 1.0)).exp()
}

/// RET logits from precomputed column similarities (cache column order).
pub fn ret_logits_from_similarities(sims: &[f64], classes: usize, shots: usize, omega: f64) -> Vec<f64> {
    let k = shots as f64;
    sims.chunks_exact(shots)
        .take(classes)
        .map(|chunk| chunk.iter().fold(0.0, |acc, &s| acc + exp_scale(s.clamp(-1.0, 1.0), omega)) / k)
        .collect()
}

/// RET logits. Raw inner products are clamped to `[-1, 1]` before scaling,
/// which only matters for fine-tuned (non-unit) caches.
pub fn ret_logits(cache: &Cache, z: &UnitVector) -> Result<LogitVector> {
    check_dim(cache.dim(), z)?;
    let sims: Vec<f64> = cache.columns().iter().map(|c| dot(c, z)).collect();
    let scores = ret_logits_from_similarities(&sims, cache.classes(), cache.shots(), cache.omega());
    Ok(LogitVector::new(scores, Head::Ret))
}

pub fn ensemble_logits(w: &EnsembleWeights, zoc: &LogitVector, ret: &LogitVector) -> Result<LogitVector> {
    if zoc.head != Head::Zoc || ret.head != Head::Ret {
        return Err(Error::HeadMismatch(zoc.head.as_str(), ret.head.as_str()));
    }
    if zoc.classes() != ret.classes() {
        return Err(Error::ShapeMismatch(format!("{} vs {} classes", zoc.classes(), ret.classes())));
    }
    let scores = zoc.scores.iter().zip(&ret.scores).map(|(a, b)| w.alpha * a + w.gamma * b).collect();
    Ok(LogitVector::new(scores, Head::En))
}

pub fn theory_logits(
    w: &EnsembleWeights,
    text: &ClassAverages,
    one_shot: &ClassAverages,
    kbar: &ClassAverages,
    z: &UnitVector,
) -> Result<LogitVector> {
    w.check_convex()?;
    let q = ClassMatrix::blend(&[(w.alpha, text), (w.beta, one_shot), (w.gamma, kbar)])?;
    Ok(LogitVector::new(q.apply(z)?, Head::Theory))
}

/// Index of the largest score; ties go to the lowest class id.
pub fn predict(scores: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    ClassId::from_index(best)
}

/// `log(1 + Σ_{i≠y} exp(v_i − v_y))`, shifted by the max for stability.
pub fn cross_entropy(v: &[f64], y: ClassId) -> f64 {
    let vy = v[y.index()];
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // log Σ exp(v_i) − v_y with the max pulled out
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    (lse - vy).max(0.0)
}

/// Gradient of [`cross_entropy`] in `v`: `softmax(v) − e_y`.
pub fn cross_entropy_grad(v: &[f64], y: ClassId) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().enumerate().map(|(i, ei)| ei / s - if i == y.index() { 1.0 } else { 0.0 }).collect()
}

/// Anything that maps a query embedding to class scores.
pub trait Classifier: Sync {
    fn classes(&self) -> usize;
    fn scores(&self, z: &UnitVector) -> Result<Vec<f64>>;
}

impl Classifier for ClassMatrix {
    fn classes(&self) -> usize {
        ClassMatrix::classes(self)
    }

    fn scores(&self, z: &UnitVector) -> Result<Vec<f64>> {
        self.apply(z)
    }
}

/// Zero-shot head over text embeddings.
pub struct ZeroShotHead<'a>(pub &'a ClassAverages);

impl Classifier for ZeroShotHead<'_> {
    fn classes(&self) -> usize {
        self.0.classes()
    }

    fn scores(&self, z: &UnitVector) -> Result<Vec<f64>> {
        Ok(zoc_logits(self.0, z)?.scores)
    }
}

/// Cache head.
pub struct RetrievalHead<'a>(pub &'a Cache);

impl Classifier for RetrievalHead<'_> {
    fn classes(&self) -> usize {
        self.0.classes()
    }

    fn scores(&self, z: &UnitVector) -> Result<Vec<f64>> {
        Ok(ret_logits(self.0, z)?.scores)
    }
}

/// `α·ZOC + γ·RET` head.
pub struct EnsembleHead<'a> {
    pub text: &'a ClassAverages,
    pub cache: &'a Cache,
    pub weights: EnsembleWeights,
}

impl Classifier for EnsembleHead<'_> {
    fn classes(&self) -> usize {
        self.text.classes()
    }

    fn scores(&self, z: &UnitVector) -> Result<Vec<f64>> {
        let zoc = zoc_logits(self.text, z)?;
        let ret = ret_logits(self.cache, z)?;
        Ok(ensemble_logits(&self.weights, &zoc, &ret)?.scores)
    }
}

fn check_classes(head: &dyn Classifier, samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if let Some(s) = samples.iter().find(|s| s.y.get() > head.classes()) {
        return Err(Error::InvalidClass { id: s.y.get(), classes: head.classes() });
    }
    Ok(())
}

/// Mean cross-entropy of a head over samples (pairwise-reduced).
pub fn ce_risk<H: Classifier>(head: &H, samples: &[LabeledSample]) -> Result<f64> {
    check_classes(head, samples)?;
    let losses = samples
        .par_iter()
        .map(|s| Ok(cross_entropy(&head.scores(&s.z)?, s.y)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / samples.len() as f64)
}

/// `R(Q) = mean ℓ(Qᵀz, y)`.
pub fn empirical_risk(q: &ClassMatrix, samples: &[LabeledSample]) -> Result<f64> {
    ce_risk(q, samples)
}

/// Number of samples whose prediction differs from the label.
pub fn count_errors<H: Classifier>(head: &H, samples: &[LabeledSample]) -> Result<usize> {
    check_classes(head, samples)?;
    let wrong = samples
        .par_iter()
        .map(|s| Ok(usize::from(predict(&head.scores(&s.z)?) != s.y)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(wrong.iter().sum())
}

/// Fraction of misclassified samples.
pub fn zero_one_risk<H: Classifier>(head: &H, samples: &[LabeledSample]) -> Result<f64> {
    Ok(count_errors(head, samples)? as f64 / samples.len() as f64)
}

/// Concatenates two caches per class (`K + K` shots), ID columns first.
pub fn mixture_cache(id_cache: &Cache, ret_cache: &Cache) -> Result<Cache> {
    if id_cache.dim() != ret_cache.dim()
        || id_cache.classes() != ret_cache.classes()
        || id_cache.shots() != ret_cache.shots()
        || id_cache.omega() != ret_cache.omega()
    {
        return Err(Error::ShapeMismatch(format!(
            "cannot mix d={} C={} K={} ω={} with d={} C={} K={} ω={}",
            id_cache.dim(),
            id_cache.classes(),
            id_cache.shots(),
            id_cache.omega(),
            ret_cache.dim(),
            ret_cache.classes(),
            ret_cache.shots(),
            ret_cache.omega()
        )));
    }
    let mut columns = Vec::with_capacity(id_cache.columns().len() * 2);
    for c in 0..id_cache.classes() {
        let class = ClassId::from_index(c);
        columns.extend_from_slice(id_cache.class_columns(class));
        columns.extend_from_slice(ret_cache.class_columns(class));
    }
    Cache::from_raw(
        id_cache.dim(),
        id_cache.classes(),
        id_cache.shots() * 2,
        columns,
        id_cache.omega(),
        id_cache.is_normalized() && ret_cache.is_normalized(),
    )
}
