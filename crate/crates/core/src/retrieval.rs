//! Exact top-K retrieval, K-shot cache construction and class averages.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize, ClassId, EmbeddingStore, UnitVector};
use crate::error::{Error, Result};
use crate::sphere::CapSampler;
use crate::store::{decode_store, encode_store, FILE_NORM_TOLERANCE};
use crate::world::World;

/// A `d × C` matrix of unit columns, one per class.
///
/// Holds the class-average retrieval features as well as the prototype,
/// one-shot and text matrices, which share the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAverages {
    dim: usize,
    columns: Vec<UnitVector>,
}

impl ClassAverages {
    pub fn new(columns: Vec<UnitVector>) -> Result<Self> {
        let dim = columns.first().map(|c| c.dim()).ok_or_else(|| Error::ShapeMismatch("no classes".into()))?;
        if let Some(bad) = columns.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.dim() });
        }
        Ok(Self { dim, columns })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[UnitVector] {
        &self.columns
    }

    pub fn column(&self, class: ClassId) -> &UnitVector {
        &self.columns[class.index()]
    }

    pub fn to_matrix(&self) -> ClassMatrix {
        ClassMatrix { dim: self.dim, columns: self.columns.iter().map(|c| c.to_vec()).collect() }
    }

    pub fn to_store(&self) -> EmbeddingStore {
        EmbeddingStore::new(self.dim, self.columns.clone(), None).expect("columns validated on construction")
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        Self::new(store.vectors().to_vec())
    }
}

/// A general `d × C` matrix of class weight vectors (`Q` in `Qᵀz`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatrix {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl ClassMatrix {
    pub fn new(dim: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::ShapeMismatch("no classes".into()));
        }
        if let Some(bad) = columns.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.len() });
        }
        Ok(Self { dim, columns })
    }

    /// `Σ wᵢ Mᵢ` over class matrices of identical shape.
    pub fn blend(parts: &[(f64, &ClassAverages)]) -> Result<Self> {
        let (_, first) = parts.first().ok_or_else(|| Error::ShapeMismatch("empty blend".into()))?;
        let (dim, classes) = (first.dim(), first.classes());
        let mut columns = vec![vec![0.0; dim]; classes];
        for (w, m) in parts {
            if m.dim() != dim || m.classes() != classes {
                return Err(Error::ShapeMismatch(format!(
                    "blend of {}x{} with {}x{}",
                    dim,
                    classes,
                    m.dim(),
                    m.classes()
                )));
            }
            for (acc, col) in columns.iter_mut().zip(m.columns()) {
                acc.iter_mut().zip(col.iter()).for_each(|(a, x)| *a += w * x);
            }
        }
        Ok(Self { dim, columns })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `Qᵀz`.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: z.len() });
        }
        Ok(self.columns.iter().map(|c| dot(c, z)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "T2I")]
    T2I,
    #[serde(rename = "I2I")]
    I2I,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::T2I => "T2I",
            RetrievalMode::I2I => "I2I",
        })
    }
}

/// Per-class retrieval queries: one text embedding per class (T2I) or one or
/// more seed images per class (I2I).
#[derive(Clone, Debug)]
pub struct QuerySet {
    mode: RetrievalMode,
    queries: Vec<Vec<UnitVector>>,
}

impl QuerySet {
    pub fn text(text: &ClassAverages) -> Self {
        Self { mode: RetrievalMode::T2I, queries: text.columns().iter().map(|t| vec![t.clone()]).collect() }
    }

    pub fn images(seeds: Vec<Vec<UnitVector>>) -> Result<Self> {
        Self::new(RetrievalMode::I2I, seeds)
    }

    pub fn new(mode: RetrievalMode, queries: Vec<Vec<UnitVector>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::ShapeMismatch("query set has no classes".into()));
        }
        for (c, q) in queries.iter().enumerate() {
            if q.is_empty() {
                return Err(Error::EmptyQueryClass(c + 1));
            }
            if mode == RetrievalMode::T2I && q.len() != 1 {
                return Err(Error::ShapeMismatch(format!("T2I class {} has {} queries", c + 1, q.len())));
            }
        }
        Ok(Self { mode, queries })
    }

    pub fn mode(&self) -> RetrievalMode {
        self.mode
    }

    pub fn classes(&self) -> usize {
        self.queries.len()
    }

    pub fn class_queries(&self, class: ClassId) -> &[UnitVector] {
        &self.queries[class.index()]
    }
}

/// One retrieval hit: 0-based database index and its similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index))
}

/// The `k` best-scoring indices, by score descending then index ascending.
pub fn top_k_by_scores(scores: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidParameter("retrieval budget must be positive".into()));
    }
    if k > scores.len() {
        return Err(Error::BudgetExceedsDatabase { k, n: scores.len() });
    }
    let mut all: Vec<Neighbor> =
        scores.iter().enumerate().map(|(index, &similarity)| Neighbor { index, similarity }).collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank);
        all.truncate(k);
    }
    all.sort_unstable_by(rank);
    Ok(all)
}

/// Exact top-`k` cosine search over `db`.
pub fn top_k(db: &EmbeddingStore, q: &UnitVector, k: usize) -> Result<Vec<Neighbor>> {
    if q.dim() != db.dim() {
        return Err(Error::DimensionMismatch { expected: db.dim(), found: q.dim() });
    }
    let scores: Vec<f64> = db.vectors().iter().map(|v| dot(v, q).clamp(-1.0, 1.0)).collect();
    top_k_by_scores(&scores, k)
}

/// A K-shot feature cache: `C·K` columns in class-major order with the
/// implicit one-hot value matrix and sharpness `omega`.
///
/// Caches built from retrieval hold unit columns. Fine-tuned caches hold
/// free parameters and only guarantee finite entries; `is_normalized`
/// reports which invariant applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Cache {
    dim: usize,
    classes: usize,
    shots: usize,
    columns: Vec<Vec<f64>>,
    omega: f64,
    normalized: bool,
}

impl Cache {
    pub fn new(classes: usize, shots: usize, columns: Vec<UnitVector>, omega: f64) -> Result<Self> {
        let dim = columns.first().map(|c| c.dim()).unwrap_or(0);
        let cols = columns.into_iter().map(UnitVector::into_inner).collect();
        let cache = Self::from_raw(dim, classes, shots, cols, omega, true)?;
        for (j, c) in cache.columns.iter().enumerate() {
            let n = crate::embedding::norm(c);
            if (n - 1.0).abs() > FILE_NORM_TOLERANCE {
                return Err(Error::NormViolation { row: j, norm: n });
            }
        }
        Ok(cache)
    }

    /// A cache of free parameters (e.g. fine-tuned columns); only finiteness
    /// is checked and the cache reports `is_normalized() == false`.
    pub fn from_parameters(classes: usize, shots: usize, columns: Vec<Vec<f64>>, omega: f64) -> Result<Self> {
        let dim = columns.first().map(Vec::len).unwrap_or(0);
        Self::from_raw(dim, classes, shots, columns, omega, false)
    }

    pub(crate) fn from_raw(
        dim: usize,
        classes: usize,
        shots: usize,
        columns: Vec<Vec<f64>>,
        omega: f64,
        normalized: bool,
    ) -> Result<Self> {
        if classes == 0 || shots == 0 {
            return Err(Error::ShapeMismatch(format!("cache with {classes} classes and {shots} shots")));
        }
        if columns.len() != classes * shots {
            return Err(Error::ShapeMismatch(format!(
                "{} columns for {} classes x {} shots",
                columns.len(),
                classes,
                shots
            )));
        }
        if dim < 2 {
            return Err(Error::DimensionTooSmall(dim));
        }
        if let Some(bad) = columns.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.len() });
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParameter(format!("sharpness must be positive, got {omega}")));
        }
        if columns.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        Ok(Self { dim, classes, shots, columns, omega, normalized })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn with_omega(mut self, omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParameter(format!("sharpness must be positive, got {omega}")));
        }
        self.omega = omega;
        Ok(self)
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub(crate) fn columns_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.columns
    }

    pub(crate) fn mark_raw(&mut self) {
        self.normalized = false;
    }

    /// The `K` columns of `class`.
    pub fn class_columns(&self, class: ClassId) -> &[Vec<f64>] {
        let start = class.index() * self.shots;
        &self.columns[start..start + self.shots]
    }

    /// Class of 0-based column `j` (the row holding the 1 in column `j` of V).
    pub fn column_class(&self, j: usize) -> ClassId {
        ClassId::from_index(j / self.shots)
    }

    /// Materialized `C × CK` one-hot value matrix.
    pub fn value_matrix(&self) -> Vec<Vec<u8>> {
        materialize_v(self.classes, self.shots)
    }

    pub fn to_store(&self) -> Result<EmbeddingStore> {
        if !self.normalized {
            return Err(Error::InvalidParameter("fine-tuned cache columns are not unit vectors".into()));
        }
        let vectors = self.columns.iter().map(|c| UnitVector::new_unchecked(c.clone())).collect();
        let labels = (0..self.columns.len()).map(|j| self.column_class(j)).collect();
        EmbeddingStore::new(self.dim, vectors, Some(labels))
    }
}

/// `V[i][j] = 1{i = ⌈(j+1)/K⌉ − 1}` for 0-based `i, j`.
pub fn materialize_v(classes: usize, shots: usize) -> Vec<Vec<u8>> {
    (0..classes).map(|i| (0..classes * shots).map(|j| u8::from(j / shots == i)).collect()).collect()
}

/// Builds a K-shot cache by retrieving `k` items per class.
///
/// T2I scores each item by its cosine with the class text embedding. I2I
/// scores each item by its maximum cosine over the class's seed images, so an
/// item is counted once at its best score. The same item may appear under
/// several classes.
pub fn build_cache(db: &EmbeddingStore, queries: &QuerySet, k: usize, omega: f64) -> Result<Cache> {
    if k > db.len() {
        return Err(Error::BudgetExceedsDatabase { k, n: db.len() });
    }
    let mut columns = Vec::with_capacity(queries.classes() * k);
    for c in 0..queries.classes() {
        let qs = queries.class_queries(ClassId::from_index(c));
        if let Some(bad) = qs.iter().find(|q| q.dim() != db.dim()) {
            return Err(Error::DimensionMismatch { expected: db.dim(), found: bad.dim() });
        }
        let scores: Vec<f64> = db
            .vectors()
            .iter()
            .map(|v| qs.iter().map(|q| dot(v, q).clamp(-1.0, 1.0)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for hit in top_k_by_scores(&scores, k)? {
            columns.push(db.vectors()[hit.index].clone());
        }
    }
    Cache::new(queries.classes(), k, columns, omega)
}

/// Per-class normalized mean of the cache columns.
pub fn class_averages(cache: &Cache) -> Result<ClassAverages> {
    let mut cols = Vec::with_capacity(cache.classes());
    for c in 0..cache.classes() {
        if cache.shots() == 1 && cache.is_normalized() {
            // re-normalizing a unit column can move its last bit
            cols.push(UnitVector::new_unchecked(cache.class_columns(ClassId::from_index(c))[0].clone()));
            continue;
        }
        let mut mean = vec![0.0; cache.dim()];
        for col in cache.class_columns(ClassId::from_index(c)) {
            mean.iter_mut().zip(col).for_each(|(m, x)| *m += x);
        }
        let k = cache.shots() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        cols.push(normalize(&mean)?);
    }
    ClassAverages::new(cols)
}

/// Draws `k` i.i.d. items from the retrieval cluster closest to `query`:
/// uniform on the cluster's cap, no outliers.
pub fn oracle_retrieve<R: Rng + ?Sized>(world: &World, query: &UnitVector, k: usize, rng: &mut R) -> Result<Vec<UnitVector>> {
    let cluster = &world.clusters()[world.nearest_cluster(query)?];
    let sampler = CapSampler::new(world.dim(), cluster.kappa)?;
    Ok((0..k).map(|_| sampler.sample(&cluster.center, rng)).collect())
}

/// Cache of `k` oracle-retrieved items per class, one query per class.
pub fn oracle_cache<R: Rng + ?Sized>(
    world: &World,
    queries: &[&UnitVector],
    k: usize,
    omega: f64,
    rng: &mut R,
) -> Result<Cache> {
    if k == 0 {
        return Err(Error::InvalidParameter("retrieval budget must be positive".into()));
    }
    let mut columns = Vec::with_capacity(queries.len() * k);
    for q in queries {
        columns.extend(oracle_retrieve(world, q, k, rng)?);
    }
    Cache::new(queries.len(), k, columns, omega)
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    dim: usize,
    classes: usize,
    shots: usize,
    omega: f64,
}

fn header_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".header");
    PathBuf::from(p)
}

/// Writes a cache as a labeled RAEB file plus a `<path>.header` TOML sidecar
/// carrying `dim`, `classes`, `shots` and `omega`.
pub fn write_cache(path: impl AsRef<Path>, cache: &Cache) -> Result<()> {
    let path = path.as_ref();
    let store = cache.to_store()?;
    let header = CacheHeader {
        format: "raeb-cache-1".into(),
        dim: cache.dim,
        classes: cache.classes,
        shots: cache.shots,
        omega: cache.omega,
    };
    let text = toml::to_string(&header).map_err(|e| Error::BadHeader(e.to_string()))?;
    fs::write(path, encode_store(&store)?).map_err(|e| Error::io(path, e))?;
    let hp = header_path(path);
    fs::write(&hp, text).map_err(|e| Error::io(hp, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Cache> {
    let path = path.as_ref();
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: CacheHeader = toml::from_str(&text).map_err(|e| Error::BadHeader(e.to_string()))?;
    if header.format != "raeb-cache-1" {
        return Err(Error::BadHeader(format!("unknown format {:?}", header.format)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode_store(&bytes, Some(header.classes))?;
    if store.dim() != header.dim || store.len() != header.classes * header.shots {
        return Err(Error::BadHeader("header does not match store shape".into()));
    }
    let expected: Vec<ClassId> = (0..store.len()).map(|j| ClassId::from_index(j / header.shots)).collect();
    if store.labels() != Some(expected.as_slice()) {
        return Err(Error::BadHeader("store labels are not class-major".into()));
    }
    Cache::new(header.classes, header.shots, store.vectors().to_vec(), header.omega)
}

/// Cosine similarity of a query to every cache column, column order.
pub fn cache_similarities(cache: &Cache, z: &UnitVector) -> Result<Vec<f64>> {
    if z.dim() != cache.dim() {
        return Err(Error::DimensionMismatch { expected: cache.dim(), found: z.dim() });
    }
    Ok(cache.columns().iter().map(|c| dot(c, z).clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;
    use crate::rng::SeedTree;
    use crate::sphere::uniform_sphere;
    use proptest::prelude::*;

    fn uv(v: &[f64]) -> UnitVector {
        normalize(v).unwrap()
    }

    fn db(vs: &[&[f64]]) -> EmbeddingStore {
        let dim = vs[0].len();
        EmbeddingStore::new(dim, vs.iter().map(|v| uv(v)).collect(), None).unwrap()
    }

    #[test]
    fn top_k_hand_example() {
        let store = db(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let hits = top_k(&store, &uv(&[0.0, 1.0]), 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(hits[0].similarity, 1.0);
        assert!((hits[1].similarity - 0.8).abs() < 1e-15);

        let all = top_k(&store, &uv(&[0.0, 1.0]), 3).unwrap();
        assert_eq!(all.iter().map(|h| h.index).collect::<Vec<_>>(), vec![1, 2, 0]);

        assert!(matches!(top_k(&store, &uv(&[0.0, 1.0]), 4), Err(Error::BudgetExceedsDatabase { k: 4, n: 3 })));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let store = db(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let hits = top_k(&store, &uv(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn build_cache_exact_match_and_mode_equivalence() {
        let store = db(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.5, 0.5, 0.0]]);
        let text = ClassAverages::new(vec![uv(&[0.0, 1.0, 0.0]), uv(&[0.9, 0.1, 0.0])]).unwrap();
        let t2i = build_cache(&store, &QuerySet::text(&text), 1, 1.0).unwrap();
        assert_eq!(t2i.class_columns(ClassId::from_index(0))[0], vec![0.0, 1.0, 0.0]);
        let seeds = text.columns().iter().map(|t| vec![t.clone()]).collect();
        let i2i = build_cache(&store, &QuerySet::images(seeds).unwrap(), 2, 1.0).unwrap();
        let t2i2 = build_cache(&store, &QuerySet::text(&text), 2, 1.0).unwrap();
        assert_eq!(i2i.columns(), t2i2.columns());
    }

    #[test]
    fn build_cache_matches_brute_force() {
        // C = 2, K = 2 over 6 vectors, I2I with two seeds for class 1
        let mut rng = SeedTree::new(11).stream("bf", &[]);
        let vs: Vec<UnitVector> = (0..6).map(|_| uniform_sphere(4, &mut rng)).collect();
        let store = EmbeddingStore::new(4, vs.clone(), None).unwrap();
        let seeds = vec![
            vec![uniform_sphere(4, &mut rng), uniform_sphere(4, &mut rng)],
            vec![uniform_sphere(4, &mut rng)],
        ];
        let qs = QuerySet::images(seeds.clone()).unwrap();
        let cache = build_cache(&store, &qs, 2, 1.0).unwrap();
        for (c, class_seeds) in seeds.iter().enumerate() {
            // enumerate every 2-subset and keep the one with the best (sorted) score pair
            let score = |i: usize| class_seeds.iter().map(|s| cosine(&vs[i], s).unwrap()).fold(f64::MIN, f64::max);
            let mut best: Option<(f64, f64, usize, usize)> = None;
            for i in 0..6 {
                for j in 0..6 {
                    if i == j {
                        continue;
                    }
                    let (a, b) = (score(i), score(j));
                    let ordered = a > b || (a == b && i < j);
                    if !ordered {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((ba, bb, _, _)) => a > ba || (a == ba && b > bb),
                    };
                    if better {
                        best = Some((a, b, i, j));
                    }
                }
            }
            let (_, _, i, j) = best.unwrap();
            let got = cache.class_columns(ClassId::from_index(c));
            assert_eq!(got[0], vs[i].to_vec());
            assert_eq!(got[1], vs[j].to_vec());
        }
    }

    #[test]
    fn empty_query_class_rejected() {
        assert!(matches!(QuerySet::images(vec![vec![uv(&[1.0, 0.0])], vec![]]), Err(Error::EmptyQueryClass(2))));
    }

    #[test]
    fn class_average_examples() {
        let cache = Cache::new(1, 2, vec![uv(&[1.0, 0.0]), uv(&[0.0, 1.0])], 1.0).unwrap();
        let avg = class_averages(&cache).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((avg.columns()[0][0] - h).abs() < 1e-8 && (avg.columns()[0][1] - h).abs() < 1e-8);

        let one = Cache::new(2, 1, vec![uv(&[0.3, 0.4]), uv(&[-1.0, 0.2])], 1.0).unwrap();
        let avg = class_averages(&one).unwrap();
        assert_eq!(avg.columns()[0].to_vec(), one.columns()[0]);
        assert_eq!(avg.columns()[1].to_vec(), one.columns()[1]);

        let cancel = Cache::new(1, 2, vec![uv(&[1.0, 0.0]), uv(&[-1.0, 0.0])], 1.0).unwrap();
        assert!(matches!(class_averages(&cancel), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn value_matrix_matches_displayed_example() {
        let v = materialize_v(3, 2);
        assert_eq!(v, vec![vec![1, 1, 0, 0, 0, 0], vec![0, 0, 1, 1, 0, 0], vec![0, 0, 0, 0, 1, 1]]);
    }

    #[test]
    fn value_matrix_reproduces_class_means() {
        let mut rng = SeedTree::new(2).stream("v", &[]);
        let (c, k, d) = (3, 4, 5);
        let cols: Vec<UnitVector> = (0..c * k).map(|_| uniform_sphere(d, &mut rng)).collect();
        let cache = Cache::new(c, k, cols, 1.0).unwrap();
        let v = cache.value_matrix();
        for row in &v {
            assert_eq!(row.iter().map(|&x| x as usize).sum::<usize>(), k);
        }
        for j in 0..c * k {
            assert_eq!((0..c).map(|i| v[i][j] as usize).sum::<usize>(), 1);
        }
        let avg = class_averages(&cache).unwrap();
        for i in 0..c {
            // K̃ = K Vᵀ / K, column i
            let mut tilde = vec![0.0; d];
            for (j, col) in cache.columns().iter().enumerate() {
                tilde.iter_mut().zip(col).for_each(|(t, x)| *t += v[i][j] as f64 * x / k as f64);
            }
            let n = crate::embedding::norm(&tilde);
            for (a, b) in tilde.iter().zip(avg.columns()[i].iter()) {
                assert!((a / n - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cache_file_round_trip() {
        let mut rng = SeedTree::new(9).stream("io", &[]);
        let cols: Vec<UnitVector> = (0..6).map(|_| uniform_sphere(3, &mut rng)).collect();
        let cache = Cache::new(3, 2, cols, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.raeb");
        write_cache(&p, &cache).unwrap();
        let back = read_cache(&p).unwrap();
        assert_eq!((back.classes(), back.shots(), back.omega()), (3, 2, 2.5));
        for (a, b) in cache.columns().iter().zip(back.columns()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_exhaustive_sort(seed in any::<u64>(), n in 1usize..64, kf in 0.0f64..1.0) {
            let mut rng = SeedTree::new(seed).stream("prop", &[]);
            let mut vs: Vec<UnitVector> = (0..n).map(|_| uniform_sphere(3, &mut rng)).collect();
            // inject duplicates
            if n > 3 { vs[n - 1] = vs[0].clone(); }
            let store = EmbeddingStore::new(3, vs.clone(), None).unwrap();
            let q = uniform_sphere(3, &mut rng);
            let k = 1 + ((n - 1) as f64 * kf) as usize;
            let hits = top_k(&store, &q, k).unwrap();
            let mut reference: Vec<(f64, usize)> = vs.iter().enumerate().map(|(i, v)| (cosine(v, &q).unwrap(), i)).collect();
            reference.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            prop_assert_eq!(hits.len(), k);
            for (h, r) in hits.iter().zip(&reference) {
                prop_assert_eq!(h.index, r.1);
            }
            for w in hits.windows(2) {
                prop_assert!(w[0].similarity >= w[1].similarity);
            }
        }

        #[test]
        fn class_average_of_identical_columns(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = SeedTree::new(seed).stream("same", &[]);
            let v = uniform_sphere(5, &mut rng);
            let cache = Cache::new(1, k, vec![v.clone(); k], 1.0).unwrap();
            let avg = class_averages(&cache).unwrap();
            for (a, b) in avg.columns()[0].iter().zip(v.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
