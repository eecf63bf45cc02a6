//! Synthetic embedding worlds on the unit sphere.
//!
//! A world is generated so that its geometry is known exactly:
//!
//! * class prototypes `S̄` with a prescribed separation `ν` (max pairwise
//!   inner product `1 − ν`), built from a randomly rotated regular simplex
//!   blended toward a common axis;
//! * target samples that fall uniformly in the chordal cap of radius `κ`
//!   around their prototype, except for an outlier fraction `ρ_c` drawn
//!   uniformly from the whole sphere;
//! * a retrieval database made of clean clusters (caps of radius `κ`), the
//!   first cluster of each class centred on its prototype and the rest
//!   placed as `ν`-separated distractors;
//! * a one-shot support set inside the caps and a text matrix `T` derived
//!   from the prototypes according to a [`TauMode`].

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adaptation::LabeledSample;
use crate::embedding::{dot, normalize, ClassId, EmbeddingStore, UnitVector};
use crate::error::{Error, Result};
use crate::retrieval::ClassAverages;
use crate::rng::SeedTree;
use crate::sphere::{random_frame, uniform_sphere, CapSampler};
use crate::store::write_store;

/// Rejections allowed when placing one distractor center.
pub const MAX_REJECTIONS: usize = 10_000;

/// How the text embeddings relate to the image prototypes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    /// `T = S̄`.
    Mirror,
    /// `t_c = normalize(s̄_c + scale·u)` with `u` a uniform unit tangent at `s̄_c`.
    Perturbed { scale: f64 },
    /// For the first `ceil(fraction·C)` classes, `t_c` is tilted from `s̄_c`
    /// toward a retrieval cluster of another class until that cluster is the
    /// nearest one; the remaining classes mirror `S̄`.
    Adversarial { tilt: f64, fraction: f64 },
}

impl TauMode {
    pub fn adversarial(tilt: f64) -> Self {
        TauMode::Adversarial { tilt, fraction: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TauMode::Mirror => "mirror",
            TauMode::Perturbed { .. } => "perturbed",
            TauMode::Adversarial { .. } => "adversarial",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub classes: usize,
    pub dim: usize,
    /// Chordal cap radius of classes and clusters.
    pub kappa: f64,
    /// Outlier mass of the target distribution.
    pub rho_c: f64,
    /// Target inter-class separation.
    pub nu: f64,
    pub tau_mode: TauMode,
    pub clusters_per_class: usize,
    pub db_per_cluster: usize,
    pub master_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            kappa: 0.1,
            rho_c: 0.0,
            nu: 0.6,
            tau_mode: TauMode::Mirror,
            clusters_per_class: 2,
            db_per_cluster: 32,
            master_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < 2 {
            return Err(Error::DimensionTooSmall(self.dim));
        }
        if !(self.kappa >= 0.0 && 4.0 * self.kappa < 2.0) {
            return bad(format!("kappa = {} must satisfy 0 <= 4 kappa < 2", self.kappa));
        }
        if !(0.0..1.0).contains(&self.rho_c) {
            return bad(format!("rho_c = {} outside [0, 1)", self.rho_c));
        }
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            return bad(format!("nu = {} outside (0, 2]", self.nu));
        }
        if self.clusters_per_class == 0 || self.db_per_cluster == 0 {
            return bad("clusters_per_class and db_per_cluster must be positive".into());
        }
        match self.tau_mode {
            TauMode::Perturbed { scale } if !(scale >= 0.0 && scale.is_finite()) => {
                return bad(format!("perturbation scale {scale}"));
            }
            TauMode::Adversarial { tilt, fraction }
                if !((0.0..=1.0).contains(&tilt) && fraction > 0.0 && fraction <= 1.0) =>
            {
                return bad(format!("adversarial tilt {tilt} / fraction {fraction}"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One retrieval cluster: a cap of radius `kappa` around `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub center: UnitVector,
    pub class: ClassId,
    pub kappa: f64,
}

#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    prototypes: ClassAverages,
    text: ClassAverages,
    one_shot: ClassAverages,
    clusters: Vec<Cluster>,
    database: EmbeddingStore,
    nu: f64,
    tau: f64,
}

impl World {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn kappa(&self) -> f64 {
        self.config.kappa
    }

    pub fn rho_c(&self) -> f64 {
        self.config.rho_c
    }

    /// Class prototypes `S̄`.
    pub fn prototypes(&self) -> &ClassAverages {
        &self.prototypes
    }

    /// Text matrix `T`.
    pub fn text(&self) -> &ClassAverages {
        &self.text
    }

    /// One-shot support `S`.
    pub fn one_shot(&self) -> &ClassAverages {
        &self.one_shot
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Database items, labeled with the class of their cluster and grouped by
    /// cluster (see [`World::cluster_items`]).
    pub fn database(&self) -> &EmbeddingStore {
        &self.database
    }

    pub fn cluster_items(&self, cluster: usize) -> Range<usize> {
        let m = self.config.db_per_cluster;
        cluster * m..(cluster + 1) * m
    }

    pub fn cluster_of_item(&self, item: usize) -> usize {
        item / self.config.db_per_cluster
    }

    /// Measured separation `1 − max_{i≠j} s̄ᵢᵀs̄ⱼ`.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Measured modality gap `max_{i≠j} (t_j − t_i)ᵀs̄_i`.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Cluster whose center has the largest cosine with `query`; ties go to
    /// the lowest cluster id.
    pub fn nearest_cluster(&self, query: &UnitVector) -> Result<usize> {
        nearest_center(&self.clusters, query)
    }

    /// Whether every class's text embedding is nearest to a different
    /// cluster than its one-shot sample.
    pub fn text_clusters_differ(&self) -> Result<bool> {
        for c in 0..self.classes() {
            let id = ClassId::from_index(c);
            if self.nearest_cluster(self.text.column(id))? == self.nearest_cluster(self.one_shot.column(id))? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn nearest_center(clusters: &[Cluster], query: &UnitVector) -> Result<usize> {
    let first = clusters.first().ok_or_else(|| Error::InvalidParameter("world has no clusters".into()))?;
    if first.center.dim() != query.dim() {
        return Err(Error::DimensionMismatch { expected: first.center.dim(), found: query.dim() });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in clusters.iter().enumerate() {
        let s = dot(&c.center, query);
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best.0)
}

/// `1 − max_{i≠j} s̄ᵢᵀs̄ⱼ`.
pub fn separation(prototypes: &ClassAverages) -> f64 {
    let cols = prototypes.columns();
    let mut max = f64::NEG_INFINITY;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            max = max.max(dot(&cols[i], &cols[j]));
        }
    }
    1.0 - max
}

/// `max_{i≠j} (t_j − t_i)ᵀs̄_i`.
pub fn modality_gap(text: &ClassAverages, prototypes: &ClassAverages) -> f64 {
    let (t, s) = (text.columns(), prototypes.columns());
    let mut max = f64::NEG_INFINITY;
    for i in 0..s.len() {
        let own = dot(&t[i], &s[i]);
        for j in 0..s.len() {
            if i != j {
                max = max.max(dot(&t[j], &s[i]) - own);
            }
        }
    }
    max
}

/// Largest separation reachable by `classes` unit vectors: the regular simplex.
pub fn max_separation(classes: usize) -> f64 {
    1.0 + 1.0 / (classes as f64 - 1.0)
}

/// Prototypes with pairwise inner products exactly `1 − nu`.
///
/// The vertices of a regular simplex (pairwise `−1/(C−1)`) are written in a
/// random orthonormal frame and blended with a shared axis orthogonal to the
/// simplex: `s_i = sinθ·w_i + cosθ·u`, giving pairwise inner product
/// `cos²θ − sin²θ/(C−1)`, solved for `cos²θ` in closed form.
pub fn make_prototypes<R: Rng + ?Sized>(classes: usize, dim: usize, nu: f64, rng: &mut R) -> Result<ClassAverages> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {classes}")));
    }
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    if classes > dim + 1 {
        return Err(Error::TooManyClasses { classes, dim });
    }
    let max = max_separation(classes);
    if !(nu > 0.0) || nu > max + 1e-12 {
        return Err(Error::UnreachableSeparation { nu, classes, max });
    }
    let c = classes as f64;
    let cos2 = (((c - 1.0) * (1.0 - nu) + 1.0) / c).clamp(0.0, 1.0);
    let needs_axis = cos2 > 1e-15;
    if needs_axis && classes > dim {
        // only the bare simplex fits in `classes - 1` dimensions
        return Err(Error::TooManyClasses { classes, dim });
    }
    let (cos, sin) = (cos2.sqrt(), (1.0 - cos2).sqrt());

    // simplex vertices e_i − 1/C, unit length, in an orthonormal basis of 1^⊥
    let vertex = |i: usize| -> Vec<f64> {
        let scale = ((c - 1.0) / c).sqrt();
        (0..classes).map(|k| (if k == i { 1.0 } else { 0.0 } - 1.0 / c) / scale).collect()
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes - 1);
    for i in 0..classes - 1 {
        let mut b = vertex(i);
        for _ in 0..2 {
            for prev in &basis {
                let p = dot(&b, prev);
                b.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = crate::embedding::norm(&b);
        b.iter_mut().for_each(|x| *x /= n);
        basis.push(b);
    }
    let frame = random_frame(dim, classes - 1 + usize::from(needs_axis), rng)?;

    let mut cols = Vec::with_capacity(classes);
    for i in 0..classes {
        let v = vertex(i);
        let mut out = vec![0.0; dim];
        for (b, f) in basis.iter().zip(&frame) {
            let coord = dot(&v, b);
            out.iter_mut().zip(f).for_each(|(o, x)| *o += sin * coord * x);
        }
        if needs_axis {
            out.iter_mut().zip(&frame[classes - 1]).for_each(|(o, x)| *o += cos * x);
        }
        cols.push(normalize(&out)?);
    }
    ClassAverages::new(cols)
}

/// Draws one target-distribution point around `center`.
pub fn sample_class_point<R: Rng + ?Sized>(center: &UnitVector, kappa: f64, rho_c: f64, rng: &mut R) -> Result<UnitVector> {
    Ok(ClassPointSampler::new(center.dim(), kappa, rho_c)?.sample(center, rng))
}

/// Cap/outlier mixture sampler, reusable across many draws.
#[derive(Clone, Debug)]
pub struct ClassPointSampler {
    cap: CapSampler,
    rho_c: f64,
}

impl ClassPointSampler {
    pub fn new(dim: usize, kappa: f64, rho_c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_c) {
            return Err(Error::InvalidParameter(format!("rho_c = {rho_c} outside [0, 1]")));
        }
        Ok(Self { cap: CapSampler::new(dim, kappa)?, rho_c })
    }

    pub fn cap(&self) -> &CapSampler {
        &self.cap
    }

    /// With probability `rho_c` a uniform sphere point, otherwise a uniform
    /// cap point. The outlier coin is always drawn.
    pub fn sample<R: Rng + ?Sized>(&self, center: &UnitVector, rng: &mut R) -> UnitVector {
        let coin: f64 = rng.random();
        if coin < self.rho_c {
            uniform_sphere(center.dim(), rng)
        } else {
            self.cap.sample(center, rng)
        }
    }
}

/// Text matrix for a [`TauMode`], with the measured modality gap.
pub fn make_text_embeddings<R: Rng + ?Sized>(
    prototypes: &ClassAverages,
    mode: TauMode,
    clusters: &[Cluster],
    rng: &mut R,
) -> Result<(ClassAverages, f64)> {
    let classes = prototypes.classes();
    let text = match mode {
        TauMode::Mirror => prototypes.clone(),
        TauMode::Perturbed { scale } => {
            let mut cols = Vec::with_capacity(classes);
            for s in prototypes.columns() {
                let u = uniform_sphere(s.dim(), rng);
                let p = dot(&u, s);
                let mut tangent: Vec<f64> = u.iter().zip(s.iter()).map(|(x, c)| x - p * c).collect();
                let n = crate::embedding::norm(&tangent);
                tangent.iter_mut().for_each(|x| *x /= n);
                let t: Vec<f64> = s.iter().zip(&tangent).map(|(x, d)| x + scale * d).collect();
                cols.push(normalize(&t)?);
            }
            ClassAverages::new(cols)?
        }
        TauMode::Adversarial { tilt, fraction } => {
            let n_adv = ((fraction * classes as f64).ceil() as usize).clamp(1, classes);
            let mut cols = Vec::with_capacity(classes);
            for c in 0..classes {
                let s = &prototypes.columns()[c];
                if c >= n_adv {
                    cols.push(s.clone());
                    continue;
                }
                let target = adversarial_target(clusters, ClassId::from_index(c), classes)?;
                let d = &clusters[target].center;
                let mut lambda = tilt;
                loop {
                    let t: Vec<f64> = s.iter().zip(d.iter()).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                    let t = if lambda >= 1.0 { d.clone() } else { normalize(&t)? };
                    if nearest_center(clusters, &t)? == target {
                        cols.push(t);
                        break;
                    }
                    lambda = (lambda + 0.05).min(1.0);
                }
            }
            ClassAverages::new(cols)?
        }
    };
    let tau = modality_gap(&text, prototypes);
    Ok((text, tau))
}

/// The cluster class `c` is steered to: the first distractor of the next
/// class, or that class's prototype cluster when there are no distractors.
fn adversarial_target(clusters: &[Cluster], class: ClassId, classes: usize) -> Result<usize> {
    let next = ClassId::from_index((class.index() + 1) % classes);
    let owned: Vec<usize> = clusters.iter().enumerate().filter(|(_, cl)| cl.class == next).map(|(j, _)| j).collect();
    owned
        .get(1)
        .or_else(|| owned.first())
        .copied()
        .ok_or_else(|| Error::InvalidParameter(format!("class {next} owns no cluster")))
}

/// Builds a world from its configuration. Every random component draws from
/// its own substream of `config.master_seed`.
pub fn make_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seeds = SeedTree::new(config.master_seed);
    let (classes, dim, kappa) = (config.classes, config.dim, config.kappa);

    let prototypes = make_prototypes(classes, dim, config.nu, &mut seeds.stream("prototypes", &[]))?;

    let mut clusters: Vec<Cluster> = prototypes
        .columns()
        .iter()
        .enumerate()
        .map(|(c, s)| Cluster { center: s.clone(), class: ClassId::from_index(c), kappa })
        .collect();
    let limit = 1.0 - config.nu;
    for c in 0..classes {
        for j in 1..config.clusters_per_class {
            let mut rng = seeds.stream("distractor", &[c as u64, j as u64]);
            let mut placed = None;
            for _ in 0..MAX_REJECTIONS {
                let cand = uniform_sphere(dim, &mut rng);
                if clusters.iter().all(|cl| dot(&cl.center, &cand) <= limit) {
                    placed = Some(cand);
                    break;
                }
            }
            let center = placed.ok_or(Error::RejectionLimit(MAX_REJECTIONS))?;
            clusters.push(Cluster { center, class: ClassId::from_index(c), kappa });
        }
    }
    // prototype clusters first, then distractors class by class
    clusters.sort_by_key(|cl| cl.class);

    let cap = CapSampler::new(dim, kappa)?;
    let m = config.db_per_cluster;
    let items: Vec<Vec<UnitVector>> = clusters
        .par_iter()
        .enumerate()
        .map(|(j, cl)| {
            let mut rng = seeds.stream("database", &[j as u64]);
            (0..m).map(|_| cap.sample(&cl.center, &mut rng)).collect()
        })
        .collect();
    let labels = clusters.iter().flat_map(|cl| std::iter::repeat_n(cl.class, m)).collect();
    let database = EmbeddingStore::new(dim, items.into_iter().flatten().collect(), Some(labels))?;

    let one_shot = ClassAverages::new(
        prototypes
            .columns()
            .iter()
            .enumerate()
            .map(|(c, s)| cap.sample(s, &mut seeds.stream("one_shot", &[c as u64])))
            .collect(),
    )?;

    let (text, tau) = make_text_embeddings(&prototypes, config.tau_mode, &clusters, &mut seeds.stream("text", &[]))?;
    let nu = separation(&prototypes);
    Ok(World { config: config.clone(), prototypes, text, one_shot, clusters, database, nu, tau })
}

/// `n` labeled target samples; labels uniform over the classes. Sample `i`
/// draws from substream `i` of `seed`, so the set is independent of thread
/// count.
pub fn sample_target_set(world: &World, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::EmptySampleSet);
    }
    let sampler = ClassPointSampler::new(world.dim(), world.kappa(), world.rho_c())?;
    let seeds = SeedTree::new(seed);
    let classes = world.classes();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream("target", &[i as u64]);
            let y = ClassId::from_index(rng.random_range(0..classes));
            LabeledSample::new(sampler.sample(world.prototypes().column(y), &mut rng), y)
        })
        .collect())
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    classes: usize,
    dim: usize,
    kappa: f64,
    kappa_cosine: f64,
    rho_c: f64,
    nu_target: f64,
    nu_measured: f64,
    tau_measured: f64,
    tau_mode: &'static str,
    clusters_per_class: usize,
    db_per_cluster: usize,
    master_seed: u64,
    files: [&'a str; 5],
    clusters: Vec<ManifestCluster>,
}

#[derive(Serialize)]
struct ManifestCluster {
    id: usize,
    class: usize,
    kappa: f64,
    first_item: usize,
    items: usize,
}

/// Writes `prototypes.raeb`, `text.raeb`, `one_shot.raeb`, `clusters.raeb`,
/// `database.raeb` and a TOML `manifest.txt` into `dir`.
pub fn write_world(dir: impl AsRef<Path>, world: &World) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_store(dir.join("prototypes.raeb"), &world.prototypes.to_store())?;
    write_store(dir.join("text.raeb"), &world.text.to_store())?;
    write_store(dir.join("one_shot.raeb"), &world.one_shot.to_store())?;
    let centers = EmbeddingStore::new(
        world.dim(),
        world.clusters.iter().map(|c| c.center.clone()).collect(),
        Some(world.clusters.iter().map(|c| c.class).collect()),
    )?;
    write_store(dir.join("clusters.raeb"), &centers)?;
    write_store(dir.join("database.raeb"), &world.database)?;
    let cfg = &world.config;
    let manifest = Manifest {
        format: "ragadapt-world-1",
        classes: cfg.classes,
        dim: cfg.dim,
        kappa: cfg.kappa,
        kappa_cosine: 1.0 - cfg.kappa * cfg.kappa / 2.0,
        rho_c: cfg.rho_c,
        nu_target: cfg.nu,
        nu_measured: world.nu,
        tau_measured: world.tau,
        tau_mode: cfg.tau_mode.name(),
        clusters_per_class: cfg.clusters_per_class,
        db_per_cluster: cfg.db_per_cluster,
        master_seed: cfg.master_seed,
        files: ["prototypes.raeb", "text.raeb", "one_shot.raeb", "clusters.raeb", "database.raeb"],
        clusters: world
            .clusters
            .iter()
            .enumerate()
            .map(|(id, c)| ManifestCluster {
                id,
                class: c.class.get(),
                kappa: c.kappa,
                first_item: world.cluster_items(id).start,
                items: cfg.db_per_cluster,
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}
