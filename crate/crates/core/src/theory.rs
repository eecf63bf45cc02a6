//! Measurement of world quantities and numeric checks of the risk bounds.
//!
//! Every check produces a [`BoundCheck`] of the form `lhs ≤ rhs` with an
//! absolute slack of [`BOUND_SLACK`], together with the parameters needed to
//! recompute the right-hand side. Lower bounds are flipped so that the
//! measured quantity sits on the right.

use std::f64::consts::E;

use rayon::prelude::*;

use crate::adaptation::{count_errors, cross_entropy, cross_entropy_grad, empirical_risk, predict, LabeledSample};
use crate::embedding::{dot, ClassId, UnitVector};
use crate::error::{Error, Result};
use crate::retrieval::{build_cache, class_averages, oracle_cache, ClassAverages, ClassMatrix, QuerySet, RetrievalMode};
use crate::rng::SeedTree;
use crate::sphere::CapSampler;
use crate::world::{modality_gap, separation, World};

/// Absolute slack of every `lhs ≤ rhs` comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// Tolerance on chordal distances when deciding cap membership.
pub const CAP_TOLERANCE: f64 = 1e-12;

/// Lipschitz constant of cross-entropy on `[-1, 1]^C`: `√(e² + 1)`.
pub fn lipschitz_constant() -> f64 {
    (E * E + 1.0).sqrt()
}

/// One numeric inequality `lhs ≤ rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// False when the preconditions of the statement do not hold on this
    /// input; such checks are reported but never fail a run.
    pub applicable: bool,
    pub context: Vec<(String, f64)>,
}

impl BoundCheck {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, context: Vec<(&str, f64)>) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            satisfied: lhs <= rhs + BOUND_SLACK,
            applicable: true,
            context: context.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn with_applicable(mut self, applicable: bool) -> Self {
        self.applicable = applicable;
        self
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.context.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Satisfied, or not applicable.
    pub fn passed(&self) -> bool {
        !self.applicable || self.satisfied
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn is_outlier(world: &World, s: &LabeledSample) -> bool {
    distance(&s.z, world.prototypes().column(s.y)) > world.kappa() + CAP_TOLERANCE
}

fn check_samples(samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    Ok(())
}

/// Measured separation, modality gap and outlier mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldStats {
    pub nu: f64,
    pub tau: f64,
    /// Largest per-class fraction of samples farther than `κ` from their
    /// prototype.
    pub rho_c_hat: f64,
    /// Overall fraction of such samples.
    pub outlier_fraction: f64,
    pub kappa: f64,
}

pub fn measure_world_stats(world: &World, samples: &[LabeledSample]) -> Result<WorldStats> {
    check_samples(samples)?;
    let classes = world.classes();
    let mut total = vec![0usize; classes];
    let mut outside = vec![0usize; classes];
    for s in samples {
        if s.y.get() > classes {
            return Err(Error::InvalidClass { id: s.y.get(), classes });
        }
        total[s.y.index()] += 1;
        outside[s.y.index()] += usize::from(is_outlier(world, s));
    }
    let rho_c_hat = total
        .iter()
        .zip(&outside)
        .filter(|(t, _)| **t > 0)
        .map(|(t, o)| *o as f64 / *t as f64)
        .fold(0.0, f64::max);
    Ok(WorldStats {
        nu: separation(world.prototypes()),
        tau: modality_gap(world.text(), world.prototypes()),
        rho_c_hat,
        outlier_fraction: outside.iter().sum::<usize>() as f64 / samples.len() as f64,
        kappa: world.kappa(),
    })
}

/// Retrieval shift `ξ_c = 1 − k̄_{q_c}ᵀs̄_c` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalShift {
    pub mode: RetrievalMode,
    pub per_class: Vec<f64>,
    pub xi_max: f64,
    /// Retrieval cluster reached by each class query.
    pub clusters: Vec<usize>,
}

/// The class queries of a retrieval mode: one-shot samples for I2I, text
/// embeddings for T2I.
pub fn class_queries(world: &World, mode: RetrievalMode) -> &ClassAverages {
    match mode {
        RetrievalMode::I2I => world.one_shot(),
        RetrievalMode::T2I => world.text(),
    }
}

/// Exact retrieval shift.
///
/// A uniform cap distribution is invariant under rotations about its
/// center, so its normalized mean is the center itself and `k̄_{q_c}` is
/// the center of the cluster closest to `q_c`.
pub fn measure_retrieval_shift(world: &World, mode: RetrievalMode) -> Result<RetrievalShift> {
    let queries = class_queries(world, mode);
    let mut per_class = Vec::with_capacity(world.classes());
    let mut clusters = Vec::with_capacity(world.classes());
    for (c, q) in queries.columns().iter().enumerate() {
        let j = world.nearest_cluster(q)?;
        let s = world.prototypes().column(ClassId::from_index(c));
        per_class.push(1.0 - dot(&world.clusters()[j].center, s));
        clusters.push(j);
    }
    let xi_max = per_class.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RetrievalShift { mode, per_class, xi_max, clusters })
}

/// Monte-Carlo estimate of the retrieval shift with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftEstimate {
    pub per_class: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Estimates `ξ_c` from `draws` samples of each query's retrieval cluster.
pub fn estimate_retrieval_shift(world: &World, mode: RetrievalMode, draws: usize, seed: u64) -> Result<ShiftEstimate> {
    if draws < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 draws, got {draws}")));
    }
    const CHUNK: usize = 4096;
    let seeds = SeedTree::new(seed);
    let queries = class_queries(world, mode);
    let mut per_class = Vec::with_capacity(world.classes());
    let mut std_error = Vec::with_capacity(world.classes());
    for (c, q) in queries.columns().iter().enumerate() {
        let cluster = &world.clusters()[world.nearest_cluster(q)?];
        let cap = CapSampler::new(world.dim(), cluster.kappa)?;
        let s = world.prototypes().column(ClassId::from_index(c));
        let chunks: Vec<(Vec<f64>, f64, f64)> = (0..draws.div_ceil(CHUNK))
            .into_par_iter()
            .map(|j| {
                let mut rng = seeds.stream("shift", &[c as u64, j as u64]);
                let n = CHUNK.min(draws - j * CHUNK);
                let mut sum = vec![0.0; world.dim()];
                let (mut p1, mut p2) = (0.0, 0.0);
                for _ in 0..n {
                    let u = cap.sample(&cluster.center, &mut rng);
                    sum.iter_mut().zip(u.iter()).for_each(|(a, x)| *a += x);
                    let p = dot(&u, s);
                    p1 += p;
                    p2 += p * p;
                }
                (sum, p1, p2)
            })
            .collect();
        let mut sum = vec![0.0; world.dim()];
        let (mut p1, mut p2) = (0.0, 0.0);
        for (v, a, b) in chunks {
            sum.iter_mut().zip(&v).for_each(|(x, y)| *x += y);
            p1 += a;
            p2 += b;
        }
        let n = draws as f64;
        let mean_norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt() / n;
        let proj = dot(&sum, s) / n;
        per_class.push(1.0 - proj / mean_norm);
        let var = ((p2 / n) - (p1 / n).powi(2)).max(0.0) * n / (n - 1.0);
        std_error.push((var / n).sqrt() / mean_norm);
    }
    Ok(ShiftEstimate { per_class, std_error })
}

fn phi_members(v: &[f64], i: usize, z: f64) -> Vec<usize> {
    (0..v.len()).filter(|&j| v[i] - v[j] <= z).collect()
}

/// `φ(v, i, z) = {j : v_i − v_j ≤ z}`.
///
/// A negative threshold excludes `i` itself and is reported as
/// [`Error::NegativeThreshold`].
pub fn phi_set(v: &[f64], i: ClassId, z: f64) -> Result<Vec<ClassId>> {
    if i.index() >= v.len() {
        return Err(Error::InvalidClass { id: i.get(), classes: v.len() });
    }
    if z < 0.0 {
        return Err(Error::NegativeThreshold(z));
    }
    Ok(phi_members(v, i.index(), z).into_iter().map(ClassId::from_index).collect())
}

/// Joint correctness of the zero-shot and linear retrieval heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    /// Both wrong.
    E1,
    /// Only zero-shot right.
    E2,
    /// Only retrieval right.
    E3,
    /// Both right.
    E4,
}

impl Event {
    fn index(self) -> usize {
        match self {
            Event::E1 => 0,
            Event::E2 => 1,
            Event::E3 => 2,
            Event::E4 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventReport {
    pub counts: [usize; 4],
    pub total: usize,
    pub tags: Vec<Event>,
    /// `ρ_d(z)` for each requested `z`; `None` when no sample falls in
    /// `E2 ∪ E3`.
    pub rho_d: Vec<(f64, Option<f64>)>,
}

impl EventReport {
    pub fn probabilities(&self) -> [f64; 4] {
        self.counts.map(|c| c as f64 / self.total as f64)
    }

    pub fn p(&self, event: Event) -> f64 {
        self.probabilities()[event.index()]
    }

    pub fn rho_d_at(&self, z: f64) -> Option<f64> {
        self.rho_d.iter().find(|(t, _)| *t == z).and_then(|(_, r)| *r)
    }
}

/// Tags every sample with its event under the heads `Tᵀz` and `K̄ᵀz` and
/// measures `ρ_d(z) = Pr(φ(Tᵀz,y,z) ∩ φ(K̄ᵀz,y,z) ≠ {y} | E2 ∪ E3)` at each
/// threshold.
pub fn classify_events(
    samples: &[LabeledSample],
    text: &ClassAverages,
    kbar: &ClassAverages,
    thresholds: &[f64],
) -> Result<EventReport> {
    check_samples(samples)?;
    let (t, k) = (text.to_matrix(), kbar.to_matrix());
    let scored = samples
        .par_iter()
        .map(|s| Ok((t.apply(&s.z)?, k.apply(&s.z)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = [0usize; 4];
    let mut tags = Vec::with_capacity(samples.len());
    let mut disagree = vec![0usize; thresholds.len()];
    let mut confused = vec![0usize; thresholds.len()];
    for (s, (vt, vk)) in samples.iter().zip(&scored) {
        let ok_t = predict(vt) == s.y;
        let ok_k = predict(vk) == s.y;
        let event = match (ok_t, ok_k) {
            (false, false) => Event::E1,
            (true, false) => Event::E2,
            (false, true) => Event::E3,
            (true, true) => Event::E4,
        };
        counts[event.index()] += 1;
        tags.push(event);
        if ok_t != ok_k {
            for (n, &z) in thresholds.iter().enumerate() {
                disagree[n] += 1;
                let pt = phi_members(vt, s.y.index(), z);
                let pk = phi_members(vk, s.y.index(), z);
                let shared: Vec<usize> = pt.into_iter().filter(|j| pk.contains(j)).collect();
                if shared != [s.y.index()] {
                    confused[n] += 1;
                }
            }
        }
    }
    let rho_d = thresholds
        .iter()
        .zip(disagree.iter().zip(&confused))
        .map(|(&z, (&d, &c))| (z, (d > 0).then(|| c as f64 / d as f64)))
        .collect();
    Ok(EventReport { counts, total: samples.len(), tags, rho_d })
}

/// `(1−ρ_c) log(1 + (C−1)e^{2κ−ν}) + ρ_c log(1 + (C−1)e²)`.
pub fn soln_good_bound(classes: usize, kappa: f64, nu: f64, rho_c: f64) -> f64 {
    let c1 = classes as f64 - 1.0;
    (1.0 - rho_c) * (c1 * (2.0 * kappa - nu).exp()).ln_1p() + rho_c * (c1 * E * E).ln_1p()
}

/// Risk of the prototype head against its closed-form upper bound, using the
/// measured separation and the configured `κ` and `ρ_c`.
pub fn check_lemma_soln_good(world: &World, samples: &[LabeledSample]) -> Result<BoundCheck> {
    check_samples(samples)?;
    let lhs = empirical_risk(&world.prototypes().to_matrix(), samples)?;
    let (c, kappa, nu, rho) = (world.classes(), world.kappa(), world.nu(), world.rho_c());
    let rhs = soln_good_bound(c, kappa, nu, rho);
    Ok(BoundCheck::new(
        "lemma_soln_good",
        lhs,
        rhs,
        vec![("classes", c as f64), ("kappa", kappa), ("nu", nu), ("rho_c", rho), ("samples", samples.len() as f64)],
    ))
}

/// Fails unless every one-shot sample lies within `κ` of its prototype.
pub fn assert_representative_support(world: &World) -> Result<()> {
    for c in 0..world.classes() {
        let id = ClassId::from_index(c);
        let d = distance(world.one_shot().column(id), world.prototypes().column(id));
        if d > world.kappa() + CAP_TOLERANCE {
            return Err(Error::AssumptionViolated(format!(
                "one-shot sample of class {id} lies {d} from its prototype, beyond kappa = {}",
                world.kappa()
            )));
        }
    }
    Ok(())
}

/// Logit gap of the one-shot head and its accuracy.
///
/// The gap check takes the order statistic at the realized inlier fraction
/// (every inlier gap is at most `4κ − ν`). The accuracy check applies when
/// `4κ < ν` and compares against `1 − ρ_c − 3σ` with the binomial `σ` of the
/// configured `ρ_c`; it is written `1 − ρ_c − 3σ ≤ accuracy`.
pub fn check_lemma_top_acc(world: &World, samples: &[LabeledSample]) -> Result<Vec<BoundCheck>> {
    check_samples(samples)?;
    assert_representative_support(world)?;
    let s = world.one_shot().to_matrix();
    let mut gaps = samples
        .par_iter()
        .map(|x| {
            let v = s.apply(&x.z)?;
            let own = v[x.y.index()];
            let other = v.iter().enumerate().filter(|(j, _)| *j != x.y.index()).map(|(_, &g)| g);
            Ok(other.fold(f64::NEG_INFINITY, f64::max) - own)
        })
        .collect::<Result<Vec<f64>>>()?;
    gaps.sort_by(f64::total_cmp);
    let inliers = samples.iter().filter(|x| !is_outlier(world, x)).count();
    let n = samples.len() as f64;
    let (kappa, nu, rho) = (world.kappa(), world.nu(), world.rho_c());
    let gap_rhs = 4.0 * kappa - nu;
    let gap_lhs = if inliers > 0 { gaps[inliers - 1] } else { f64::NEG_INFINITY };
    let gap = BoundCheck::new(
        "lemma_top_acc_gap",
        gap_lhs,
        gap_rhs,
        vec![("kappa", kappa), ("nu", nu), ("quantile", inliers as f64 / n), ("samples", n)],
    )
    .with_applicable(inliers > 0);

    let errors = count_errors(&s, samples)?;
    let accuracy = 1.0 - errors as f64 / n;
    let sigma = (rho * (1.0 - rho) / n).sqrt();
    let floor = 1.0 - rho - 3.0 * sigma;
    let acc = BoundCheck::new(
        "lemma_top_acc_accuracy",
        floor,
        accuracy,
        vec![("kappa", kappa), ("nu", nu), ("rho_c", rho), ("sigma", sigma), ("samples", n)],
    )
    .with_applicable(4.0 * kappa < nu);
    Ok(vec![gap, acc])
}

/// `ξ_I2I ≤ 2κ²`, and `ν − 2κ ≤ ξ_T2I` when every text query reaches a
/// different cluster than the one-shot sample of its class.
pub fn check_lemma_uni(world: &World) -> Result<Vec<BoundCheck>> {
    assert_representative_support(world)?;
    let (kappa, nu) = (world.kappa(), world.nu());
    let i2i = measure_retrieval_shift(world, RetrievalMode::I2I)?;
    let t2i = measure_retrieval_shift(world, RetrievalMode::T2I)?;
    let upper = BoundCheck::new("lemma_uni_i2i", i2i.xi_max, 2.0 * kappa * kappa, vec![("kappa", kappa)]);
    let lower = BoundCheck::new("lemma_uni_t2i", nu - 2.0 * kappa, t2i.xi_max, vec![("kappa", kappa), ("nu", nu)])
        .with_applicable(world.text_clusters_differ()?);
    Ok(vec![upper, lower])
}

/// `κ √(8/K · ln(C/δ))`.
pub fn bernstein_radius(kappa: f64, shots: usize, classes: usize, delta: f64) -> f64 {
    kappa * (8.0 / shots as f64 * (classes as f64 / delta).ln()).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremUniParams {
    pub alpha: f64,
    pub gamma: f64,
    pub shots: usize,
    pub delta: f64,
    pub mode: RetrievalMode,
    pub trials: usize,
    pub seed: u64,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Ensemble-risk bound over repeated oracle caches.
///
/// Each trial builds `K̄` from `K` oracle draws per class and measures
/// `R(αT + γK̄) − R(S̄)`. The right-hand side uses the largest modality term
/// `‖(T − S̄)ᵀz‖₂` over the samples and the exact shift `ξ` of the mode. The
/// returned check compares the fraction of violating trials with `δ`.
pub fn check_theorem_uni(world: &World, samples: &[LabeledSample], p: &TheoremUniParams) -> Result<BoundCheck> {
    check_samples(samples)?;
    check_delta(p.delta)?;
    if !((0.0..=1.0).contains(&p.alpha) && (0.0..=1.0).contains(&p.gamma)) {
        return Err(Error::InvalidParameter(format!("weights ({}, {}) outside [0, 1]", p.alpha, p.gamma)));
    }
    if p.alpha + p.gamma > 1.0 + 1e-12 {
        return Err(Error::WeightSumViolation(p.alpha + p.gamma));
    }
    if p.shots == 0 || p.trials == 0 {
        return Err(Error::InvalidParameter("shots and trials must be positive".into()));
    }
    let (c, kappa) = (world.classes(), world.kappa());
    let l = lipschitz_constant();
    let diff = ClassMatrix::blend(&[(1.0, world.text()), (-1.0, world.prototypes())])?;
    let modality: Vec<f64> = samples
        .iter()
        .map(|s| diff.apply(&s.z).map(|v| dot(&v, &v).sqrt()))
        .collect::<Result<_>>()?;
    let modality_max = modality.iter().copied().fold(0.0, f64::max);
    let modality_mean = crate::embedding::pairwise_sum(&modality) / modality.len() as f64;
    let xi = measure_retrieval_shift(world, p.mode)?.xi_max;
    let complexity = kappa * (8.0 * c as f64 / p.shots as f64 * (c as f64 / p.delta).ln()).sqrt();
    let shift = (2.0 * c as f64 * xi.max(0.0)).sqrt();
    let bound = l * (p.alpha * modality_max + p.gamma * complexity + p.gamma * shift);

    let base = empirical_risk(&world.prototypes().to_matrix(), samples)?;
    let queries: Vec<&UnitVector> = class_queries(world, p.mode).columns().iter().collect();
    let seeds = SeedTree::new(p.seed);
    let gaps = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeds.stream("theorem_uni", &[t as u64]);
            let cache = oracle_cache(world, &queries, p.shots, 1.0, &mut rng)?;
            let kbar = class_averages(&cache)?;
            let q = ClassMatrix::blend(&[(p.alpha, world.text()), (p.gamma, &kbar)])?;
            Ok(empirical_risk(&q, samples)? - base)
        })
        .collect::<Result<Vec<f64>>>()?;
    let violations = gaps.iter().filter(|&&g| g > bound + BOUND_SLACK).count();
    let max_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_gap = crate::embedding::pairwise_sum(&gaps) / gaps.len() as f64;
    Ok(BoundCheck::new(
        format!("theorem_uni_{}_k{}", p.mode, p.shots),
        violations as f64 / p.trials as f64,
        p.delta,
        vec![
            ("alpha", p.alpha),
            ("gamma", p.gamma),
            ("shots", p.shots as f64),
            ("delta", p.delta),
            ("trials", p.trials as f64),
            ("classes", c as f64),
            ("kappa", kappa),
            ("lipschitz", l),
            ("xi", xi),
            ("modality_max", modality_max),
            ("modality_mean", modality_mean),
            ("bound", bound),
            ("max_gap", max_gap),
            ("mean_gap", mean_gap),
        ],
    ))
}

/// Outcome of the ensemble theorem on one world.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutcome {
    pub bound: BoundCheck,
    /// `ACC(ZOC) ≤ ACC(EN)`, applicable when the corollary condition holds.
    pub corollary: BoundCheck,
    pub events: EventReport,
    pub z_star: f64,
}

/// 0-1 risk of the `α = γ = ½` linear ensemble against
/// `Pr(E1) + (Pr(E2) + Pr(E3)) ρ_d(z*) + ρ_c` with
/// `z* = max(6κ − ν, 2κ + τ)`.
///
/// `K̄` comes from an I2I cache of `shots` items per class retrieved from the
/// world database with the one-shot samples as seeds. `ν`, `τ` and `ρ_c` are
/// the measured values.
pub fn check_theorem_ensemble(world: &World, samples: &[LabeledSample], shots: usize) -> Result<EnsembleOutcome> {
    let stats = measure_world_stats(world, samples)?;
    let seeds = world.one_shot().columns().iter().map(|s| vec![s.clone()]).collect();
    let cache = build_cache(world.database(), &QuerySet::images(seeds)?, shots, 1.0)?;
    let kbar = class_averages(&cache)?;
    let kappa = world.kappa();
    let z_star = (6.0 * kappa - stats.nu).max(2.0 * kappa + stats.tau);
    let events = classify_events(samples, world.text(), &kbar, &[z_star])?;
    let [p1, p2, p3, _] = events.probabilities();
    let rho_d = events.rho_d_at(z_star);
    let ensemble = ClassMatrix::blend(&[(0.5, world.text()), (0.5, &kbar)])?;
    let n = samples.len() as f64;
    let en_accuracy = 1.0 - count_errors(&ensemble, samples)? as f64 / n;
    let zoc_accuracy = 1.0 - p1 - p3;
    let rho = stats.rho_c_hat;
    let rhs = p1 + (p2 + p3) * rho_d.unwrap_or(0.0) + rho;
    let context = vec![
        ("kappa", kappa),
        ("nu", stats.nu),
        ("tau", stats.tau),
        ("rho_c_hat", rho),
        ("z_star", z_star),
        ("rho_d", rho_d.unwrap_or(f64::NAN)),
        ("p1", p1),
        ("p2", p2),
        ("p3", p3),
        ("shots", shots as f64),
        ("samples", n),
    ];
    let bound = BoundCheck::new("theorem_ensemble", 1.0 - en_accuracy, rhs, context.clone());
    let condition = (p2 + p3) * (1.0 - rho_d.unwrap_or(0.0)) - rho >= p2.max(p3);
    let corollary =
        BoundCheck::new("theorem_ensemble_corollary", zoc_accuracy, en_accuracy, context).with_applicable(condition);
    Ok(EnsembleOutcome { bound, corollary, events, z_star })
}

/// Coverage of the Bernstein radius for normalized oracle-cache means.
///
/// Each trial draws `shots` items per class from the cluster reached by the
/// class's one-shot sample and records whether any class mean lies farther
/// than [`bernstein_radius`] from the cluster center. The check compares the
/// exceedance fraction with `δ + 3σ`.
pub fn check_bernstein(world: &World, shots: usize, delta: f64, trials: usize, seed: u64) -> Result<BoundCheck> {
    check_delta(delta)?;
    if shots == 0 || trials == 0 {
        return Err(Error::InvalidParameter("shots and trials must be positive".into()));
    }
    let radius = bernstein_radius(world.kappa(), shots, world.classes(), delta);
    let queries: Vec<&UnitVector> = world.one_shot().columns().iter().collect();
    let centers: Vec<&UnitVector> =
        queries.iter().map(|q| world.nearest_cluster(q).map(|j| &world.clusters()[j].center)).collect::<Result<_>>()?;
    let seeds = SeedTree::new(seed);
    let deviations = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeds.stream("bernstein", &[t as u64]);
            let kbar = class_averages(&oracle_cache(world, &queries, shots, 1.0, &mut rng)?)?;
            Ok(kbar.columns().iter().zip(&centers).map(|(k, c)| distance(k, c)).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let exceed = deviations.iter().filter(|&&d| d > radius).count() as f64 / trials as f64;
    let sigma = (delta * (1.0 - delta) / trials as f64).sqrt();
    Ok(BoundCheck::new(
        format!("bernstein_k{shots}"),
        exceed,
        delta + 3.0 * sigma,
        vec![
            ("kappa", world.kappa()),
            ("shots", shots as f64),
            ("classes", world.classes() as f64),
            ("delta", delta),
            ("trials", trials as f64),
            ("radius", radius),
            ("max_deviation", deviations.iter().copied().fold(0.0, f64::max)),
        ],
    ))
}

/// Largest cross-entropy gradient norm over random points of `[-1, 1]^C`,
/// and the worst relative error of the analytic gradient against central
/// differences (`h = 1e-6`) at 100 points per class count.
pub fn check_lipschitz(class_counts: &[usize], points_per_count: usize, seed: u64) -> Result<Vec<BoundCheck>> {
    use rand::Rng;
    if points_per_count == 0 || class_counts.iter().any(|&c| c < 2) {
        return Err(Error::InvalidParameter("need at least one point and two classes".into()));
    }
    const CHUNK: usize = 1024;
    let seeds = SeedTree::new(seed);
    let mut max_norm: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for (n, &c) in class_counts.iter().enumerate() {
        let chunk_max = (0..points_per_count.div_ceil(CHUNK))
            .into_par_iter()
            .map(|j| {
                let mut rng = seeds.stream("lipschitz", &[n as u64, j as u64]);
                let mut best: f64 = 0.0;
                for _ in 0..CHUNK.min(points_per_count - j * CHUNK) {
                    let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect();
                    let y = ClassId::from_index(rng.random_range(0..c));
                    let g = cross_entropy_grad(&v, y);
                    best = best.max(dot(&g, &g).sqrt());
                }
                best
            })
            .collect::<Vec<f64>>();
        max_norm = chunk_max.into_iter().fold(max_norm, f64::max);

        let mut rng = seeds.stream("lipschitz_fd", &[n as u64]);
        let h = 1e-6;
        for _ in 0..100 {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let y = ClassId::from_index(rng.random_range(0..c));
            let g = cross_entropy_grad(&v, y);
            let mut err = 0.0;
            for i in 0..c {
                let (mut up, mut down) = (v.clone(), v.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (cross_entropy(&up, y) - cross_entropy(&down, y)) / (2.0 * h);
                err += (fd - g[i]) * (fd - g[i]);
            }
            max_rel = max_rel.max(err.sqrt() / dot(&g, &g).sqrt());
        }
    }
    let counts = class_counts.iter().map(|&c| c as f64).fold(0.0, f64::max);
    Ok(vec![
        BoundCheck::new(
            "lipschitz",
            max_norm,
            lipschitz_constant(),
            vec![("points_per_count", points_per_count as f64), ("max_classes", counts)],
        ),
        BoundCheck::new("lipschitz_gradient_fd", max_rel, 1e-6, vec![("h", 1e-6), ("points_per_count", 100.0)]),
    ])
}

/// Settings of a full per-world report.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryParams {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
    pub theorem_shots: Vec<usize>,
    pub theorem_trials: usize,
    pub ensemble_shots: usize,
    pub bernstein_shots: usize,
    pub bernstein_delta: f64,
    pub bernstein_trials: usize,
    pub seed: u64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.5,
            delta: 0.1,
            theorem_shots: vec![1, 4, 16],
            theorem_trials: 200,
            ensemble_shots: 16,
            bernstein_shots: 16,
            bernstein_delta: 0.05,
            bernstein_trials: 1000,
            seed: 0,
        }
    }
}

/// Every measured quantity and world-dependent check on one world.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub stats: WorldStats,
    pub xi_i2i: RetrievalShift,
    pub xi_t2i: RetrievalShift,
    pub events: EventReport,
    pub z_star: f64,
    pub checks: Vec<BoundCheck>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(BoundCheck::passed)
    }
}

pub fn theory_report(world: &World, samples: &[LabeledSample], p: &TheoryParams) -> Result<TheoryReport> {
    let stats = measure_world_stats(world, samples)?;
    let mut checks = vec![check_lemma_soln_good(world, samples)?];
    checks.extend(check_lemma_top_acc(world, samples)?);
    checks.extend(check_lemma_uni(world)?);
    let seeds = SeedTree::new(p.seed);
    for mode in [RetrievalMode::I2I, RetrievalMode::T2I] {
        for (n, &shots) in p.theorem_shots.iter().enumerate() {
            let params = TheoremUniParams {
                alpha: p.alpha,
                gamma: p.gamma,
                shots,
                delta: p.delta,
                mode,
                trials: p.theorem_trials,
                seed: seeds.child("theorem_uni", &[n as u64]).master(),
            };
            checks.push(check_theorem_uni(world, samples, &params)?);
        }
    }
    let ens = check_theorem_ensemble(world, samples, p.ensemble_shots)?;
    checks.push(ens.bound);
    checks.push(ens.corollary);
    checks.push(check_bernstein(
        world,
        p.bernstein_shots,
        p.bernstein_delta,
        p.bernstein_trials,
        seeds.child("bernstein", &[]).master(),
    )?);
    Ok(TheoryReport {
        stats,
        xi_i2i: measure_retrieval_shift(world, RetrievalMode::I2I)?,
        xi_t2i: measure_retrieval_shift(world, RetrievalMode::T2I)?,
        events: ens.events,
        z_star: ens.z_star,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::{zero_one_risk, ZeroShotHead};
    use crate::embedding::normalize;
    use crate::world::{make_world, sample_target_set, TauMode, WorldConfig};

    fn uv(v: &[f64]) -> UnitVector {
        normalize(v).unwrap()
    }

    fn world(f: impl FnOnce(&mut WorldConfig)) -> World {
        let mut cfg = WorldConfig { dim: 16, classes: 5, ..Default::default() };
        f(&mut cfg);
        make_world(&cfg).unwrap()
    }

    #[test]
    fn phi_set_examples() {
        let v = [0.9, 0.5, 0.2];
        let first = ClassId::from_index(0);
        assert_eq!(phi_set(&v, first, 0.3).unwrap(), vec![first]);
        assert_eq!(phi_set(&v, first, 0.5).unwrap(), vec![first, ClassId::from_index(1)]);
        assert_eq!(phi_set(&v, first, 0.7).unwrap().len(), 3);
        assert!(matches!(phi_set(&v, first, -0.1), Err(Error::NegativeThreshold(_))));
    }

    #[test]
    fn phi_set_contains_index_and_grows() {
        let v = [0.1, -0.4, 0.35, 0.2];
        for i in 0..4 {
            let id = ClassId::from_index(i);
            let mut prev = phi_set(&v, id, 0.0).unwrap();
            assert!(prev.contains(&id));
            for z in [0.1, 0.3, 0.5, 1.0] {
                let next = phi_set(&v, id, z).unwrap();
                assert!(prev.iter().all(|j| next.contains(j)));
                prev = next;
            }
        }
    }

    #[test]
    fn lipschitz_gradient_example() {
        let g = cross_entropy_grad(&[0.0, 0.0], ClassId::from_index(0));
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        assert!((dot(&g, &g).sqrt() - 0.70710678).abs() < 1e-8);
        assert!((lipschitz_constant() - 2.89638673).abs() < 1e-8);
    }

    #[test]
    fn bernstein_radius_closed_form() {
        let r = bernstein_radius(0.3, 16, 10, 0.05);
        assert!((r - 0.3 * (0.5 * 200f64.ln()).sqrt()).abs() < 1e-15);
        assert!((r - 0.48829).abs() < 1e-5);
    }

    #[test]
    fn mirror_world_gap_is_minus_separation() {
        let w = world(|_| {});
        let samples = sample_target_set(&w, 50, 1).unwrap();
        let stats = measure_world_stats(&w, &samples).unwrap();
        assert!((stats.tau + stats.nu).abs() < 1e-12);
        assert_eq!(stats.rho_c_hat, 0.0);
    }

    #[test]
    fn antipodal_separation() {
        let w = world(|c| {
            c.classes = 2;
            c.nu = 2.0;
            c.kappa = 0.0;
            c.clusters_per_class = 1;
        });
        let s = measure_world_stats(&w, &sample_target_set(&w, 4, 0).unwrap()).unwrap();
        assert!((s.nu - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_samples_rejected() {
        let w = world(|_| {});
        assert!(matches!(measure_world_stats(&w, &[]), Err(Error::EmptySampleSet)));
        assert!(matches!(classify_events(&[], w.text(), w.text(), &[]), Err(Error::EmptySampleSet)));
    }

    #[test]
    fn outlier_fraction_is_measured() {
        let w = world(|c| c.rho_c = 0.2);
        let samples = sample_target_set(&w, 20_000, 3).unwrap();
        let s = measure_world_stats(&w, &samples).unwrap();
        let sigma = (0.2 * 0.8 / 20_000f64).sqrt();
        assert!((s.outlier_fraction - 0.2).abs() < 4.0 * sigma, "{}", s.outlier_fraction);
        assert!(s.rho_c_hat >= s.outlier_fraction);
    }

    #[test]
    fn shift_of_exact_clusters() {
        let w = world(|c| c.kappa = 0.0);
        let xi = measure_retrieval_shift(&w, RetrievalMode::I2I).unwrap();
        assert!(xi.xi_max.abs() < 1e-12);
    }

    #[test]
    fn shift_estimate_agrees_with_exact_value() {
        let w = world(|c| {
            c.kappa = 0.3;
            c.tau_mode = TauMode::adversarial(0.5);
        });
        for mode in [RetrievalMode::I2I, RetrievalMode::T2I] {
            let exact = measure_retrieval_shift(&w, mode).unwrap();
            let est = estimate_retrieval_shift(&w, mode, 40_000, 4).unwrap();
            for c in 0..w.classes() {
                let tol = 6.0 * est.std_error[c] + 1e-6;
                assert!((exact.per_class[c] - est.per_class[c]).abs() < tol, "{mode} class {c}");
            }
        }
    }

    #[test]
    fn lemma_uni_on_adversarial_world() {
        let w = world(|c| {
            c.kappa = 0.1;
            c.tau_mode = TauMode::adversarial(0.5);
        });
        let checks = check_lemma_uni(&w).unwrap();
        assert!(checks.iter().all(|c| c.applicable && c.satisfied), "{checks:?}");
        let mirror = check_lemma_uni(&world(|_| {})).unwrap();
        assert!(mirror[0].satisfied && !mirror[1].applicable);
    }

    fn sample(v: &[f64], y: usize) -> LabeledSample {
        LabeledSample::new(uv(v), ClassId::from_index(y))
    }

    #[test]
    fn four_event_fixture() {
        // T prefers axis 0 for class 1, K̄ prefers axis 1 for class 1
        let t = ClassAverages::new(vec![uv(&[1.0, 0.0]), uv(&[0.0, 1.0])]).unwrap();
        let k = ClassAverages::new(vec![uv(&[1.0, 1.0]), uv(&[1.0, -1.0])]).unwrap();
        let samples = vec![
            sample(&[-0.2, 1.0], 0), // T: class 2, K: 1 -> E3
            sample(&[1.0, -0.5], 0), // T: 1, K: 2 -> E2
            sample(&[1.0, 0.8], 0),  // both 1 -> E4
            sample(&[1.0, 0.5], 1),  // T: 1, K: 1 with y = 2 -> E1
        ];
        let r = classify_events(&samples, &t, &k, &[0.0]).unwrap();
        assert_eq!(r.tags, vec![Event::E3, Event::E2, Event::E4, Event::E1]);
        assert_eq!(r.probabilities(), [0.25; 4]);
    }

    #[test]
    fn identical_heads_never_disagree() {
        let w = world(|c| c.rho_c = 0.3);
        let samples = sample_target_set(&w, 500, 2).unwrap();
        let r = classify_events(&samples, w.text(), w.text(), &[0.1]).unwrap();
        assert_eq!(r.counts[1] + r.counts[2], 0);
        assert_eq!(r.rho_d_at(0.1), None);
    }

    #[test]
    fn event_counts_match_head_errors() {
        let w = world(|c| {
            c.rho_c = 0.1;
            c.kappa = 0.3;
            c.tau_mode = TauMode::adversarial(0.4);
        });
        let samples = sample_target_set(&w, 2000, 9).unwrap();
        let kbar = w.one_shot();
        let r = classify_events(&samples, w.text(), kbar, &[]).unwrap();
        assert_eq!(count_errors(&ZeroShotHead(w.text()), &samples).unwrap(), r.counts[0] + r.counts[2]);
        assert_eq!(count_errors(&kbar.to_matrix(), &samples).unwrap(), r.counts[0] + r.counts[1]);
        let p = r.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soln_good_on_noiseless_world() {
        let w = world(|c| c.kappa = 0.0);
        let samples = sample_target_set(&w, 200, 5).unwrap();
        let check = check_lemma_soln_good(&w, &samples).unwrap();
        assert!(check.satisfied);
        let c = w.classes() as f64;
        assert!(check.lhs <= ((c - 1.0) * (-w.nu()).exp()).ln_1p() + 1e-9);
    }

    #[test]
    fn top_acc_on_clean_world_has_no_errors() {
        let w = world(|c| c.kappa = 0.1);
        let samples = sample_target_set(&w, 2000, 6).unwrap();
        let checks = check_lemma_top_acc(&w, &samples).unwrap();
        assert!(checks.iter().all(BoundCheck::passed));
        assert_eq!(zero_one_risk(&w.one_shot().to_matrix(), &samples).unwrap(), 0.0);
        assert!(checks[0].lhs <= 4.0 * w.kappa() - w.nu());
    }

    #[test]
    fn theorem_uni_term_isolation() {
        let w = world(|c| c.tau_mode = TauMode::Perturbed { scale: 0.3 });
        let samples = sample_target_set(&w, 300, 7).unwrap();
        let p = TheoremUniParams {
            alpha: 1.0,
            gamma: 0.0,
            shots: 4,
            delta: 0.1,
            mode: RetrievalMode::I2I,
            trials: 5,
            seed: 1,
        };
        let check = check_theorem_uni(&w, &samples, &p).unwrap();
        let want = lipschitz_constant() * check.param("modality_max").unwrap();
        assert!((check.param("bound").unwrap() - want).abs() < 1e-12);
        assert!(check.satisfied);
        let too_heavy = TheoremUniParams { alpha: 0.7, gamma: 0.6, ..p };
        assert!(matches!(check_theorem_uni(&w, &samples, &too_heavy), Err(Error::WeightSumViolation(_))));
    }

    #[test]
    fn theorem_ensemble_with_identical_heads() {
        // κ = 0 and mirror text: K̄ = T = S̄, so only E1 and E4 occur
        let w = world(|c| {
            c.kappa = 0.0;
            c.rho_c = 0.2;
            c.clusters_per_class = 1;
        });
        let samples = sample_target_set(&w, 1000, 8).unwrap();
        let out = check_theorem_ensemble(&w, &samples, 2).unwrap();
        assert_eq!(out.events.counts[1] + out.events.counts[2], 0);
        assert!((out.bound.lhs - out.events.p(Event::E1)).abs() < 1e-12);
        let rho = out.bound.param("rho_c_hat").unwrap();
        assert!((out.bound.rhs - out.events.p(Event::E1) - rho).abs() < 1e-12);
        assert!(out.bound.satisfied);
    }

    #[test]
    fn bernstein_exact_clusters_never_deviate() {
        let w = world(|c| c.kappa = 0.0);
        let check = check_bernstein(&w, 4, 0.05, 20, 3).unwrap();
        assert_eq!(check.lhs, 0.0);
        assert_eq!(check.param("max_deviation"), Some(0.0));
    }

    #[test]
    fn report_on_default_world_passes() {
        let w = world(|c| c.kappa = 0.05);
        let samples = sample_target_set(&w, 500, 10).unwrap();
        let p = TheoryParams { theorem_trials: 10, bernstein_trials: 50, ..Default::default() };
        let report = theory_report(&w, &samples, &p).unwrap();
        assert!(report.passed(), "{:#?}", report.checks.iter().filter(|c| !c.passed()).collect::<Vec<_>>());
    }
}
