//! Synthetic retrieval worlds and teacher embedding sources.
//!
//! A world is a clustered population on the unit sphere: cluster centers are
//! drawn uniformly, members are centers plus isotropic Gaussian jitter
//! re-normalized to the sphere, and the student sees a noisy, re-sized copy
//! of each teacher embedding as its raw input. Cluster identity doubles as
//! retrieval ground truth, which makes every metric exactly checkable.
//!
//! An optional neighbor cap rejection-resamples members until no sample has
//! more than `cap` neighbors above a fixed similarity, the sparse-positive
//! regime where label propagation through virtual samples has the most to
//! offer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingMatrix, Role};
use crate::error::{Error, Result};

/// Similarity above which two samples count as neighbors for the neighbor
/// cap. Matches the default labelling threshold so a capped world is sparse
/// exactly where labelling looks.
pub const NEIGHBOR_CAP_TAU: f64 = 0.75;

/// Attempts to re-draw one member before the cap is declared infeasible.
const MAX_MEMBER_ATTEMPTS: usize = 10_000;

/// Parameters of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Number of cluster centers.
    pub clusters: usize,
    /// Members drawn around each center.
    pub per_cluster: usize,
    /// Teacher embedding dimensionality.
    pub teacher_dim: usize,
    /// Raw student input dimensionality; teacher embeddings are truncated or
    /// zero-padded to this size before noise-free storage.
    pub student_input_dim: usize,
    /// Cluster concentration: member jitter has standard deviation
    /// `1 / kappa` per coordinate before re-normalization.
    pub kappa: f64,
    /// Standard deviation of the noise added to teacher coordinates to form
    /// raw student inputs.
    pub sigma: f64,
    /// Maximum neighbors above [`NEIGHBOR_CAP_TAU`] any sample may have.
    pub nn_cap: Option<usize>,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.clusters == 0 {
            problems.push("clusters must be at least 1".to_string());
        }
        if self.per_cluster == 0 {
            problems.push("per_cluster must be at least 1".to_string());
        }
        if self.teacher_dim == 0 {
            problems.push("teacher_dim must be at least 1".to_string());
        }
        if self.student_input_dim == 0 {
            problems.push("student_input_dim must be at least 1".to_string());
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            problems.push(format!(
                "kappa must be positive and finite, got {}",
                self.kappa
            ));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            problems.push(format!(
                "sigma must be non-negative and finite, got {}",
                self.sigma
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidWorldSpec(problems.join("\n")))
        }
    }
}

/// One sampled population: teacher embeddings, raw student inputs, cluster
/// identity per sample.
#[derive(Debug, Clone)]
pub struct World {
    pub teacher: EmbeddingMatrix,
    pub student_raw: DMatrix<f64>,
    pub cluster_ids: Vec<usize>,
}

impl World {
    pub fn len(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_ids.is_empty()
    }
}

/// Query difficulty tercile, ordered easiest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Easy,
    Medium,
    Hard,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Easy => "easy",
            Split::Medium => "medium",
            Split::Hard => "hard",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "easy" => Ok(Split::Easy),
            "medium" => Ok(Split::Medium),
            "hard" => Ok(Split::Hard),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A full experiment's data: a training population plus disjoint query,
/// database, and whitening populations drawn around the same centers.
#[derive(Debug, Clone)]
pub struct WorldBundle {
    pub train: World,
    pub queries: World,
    pub database: World,
    pub whitening: World,
    /// Per-query relevant database indices (same cluster).
    pub ground_truth: Vec<Vec<usize>>,
    /// Per-query difficulty by similarity to the query's own center.
    pub splits: Vec<Split>,
    pub centers: DMatrix<f64>,
}

/// Sizes of the evaluation populations accompanying a training world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalCounts {
    pub queries_per_cluster: usize,
    pub db_per_cluster: usize,
    pub whiten_per_cluster: usize,
}

impl Default for EvalCounts {
    fn default() -> Self {
        Self {
            queries_per_cluster: 5,
            db_per_cluster: 20,
            whiten_per_cluster: 10,
        }
    }
}

fn unit_gaussian_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    loop {
        let v = DVector::from_fn(dim, |_, _| normal.sample(rng));
        if let Ok(unit) = crate::embed::l2_normalize(&v) {
            return unit;
        }
    }
}

fn draw_member<R: Rng + ?Sized>(center: &DVector<f64>, kappa: f64, rng: &mut R) -> DVector<f64> {
    let jitter = Normal::new(0.0, 1.0 / kappa).expect("positive std");
    loop {
        let v = center.map(|c| c + jitter.sample(rng));
        if let Ok(unit) = crate::embed::l2_normalize(&v) {
            return unit;
        }
    }
}

/// Samples `per_center` members around every center, optionally enforcing
/// the neighbor cap across the whole population.
fn draw_population<R: Rng + ?Sized>(
    centers: &DMatrix<f64>,
    per_center: usize,
    kappa: f64,
    nn_cap: Option<usize>,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let dim = centers.nrows();
    let total = centers.ncols() * per_center;
    let mut members: Vec<DVector<f64>> = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    // Number of accepted neighbors above the cap threshold, per member.
    let mut degrees: Vec<usize> = Vec::with_capacity(total);

    for cluster in 0..centers.ncols() {
        let center = centers.column(cluster).clone_owned();
        for _ in 0..per_center {
            let mut attempts = 0;
            let member = loop {
                let candidate = draw_member(&center, kappa, rng);
                match nn_cap {
                    None => break candidate,
                    Some(cap) => {
                        if accepts_candidate(&candidate, &members, &degrees, cap) {
                            break candidate;
                        }
                        attempts += 1;
                        if attempts >= MAX_MEMBER_ATTEMPTS {
                            return Err(Error::InfeasibleSpec(format!(
                                "could not place a member of cluster {cluster} with at most \
                                 {cap} neighbors above {NEIGHBOR_CAP_TAU} after \
                                 {MAX_MEMBER_ATTEMPTS} attempts; lower kappa, shrink clusters, \
                                 or raise the cap"
                            )));
                        }
                    }
                }
            };
            if nn_cap.is_some() {
                let mut own = 0;
                for (other, degree) in members.iter().zip(degrees.iter_mut()) {
                    if member.dot(other) > NEIGHBOR_CAP_TAU {
                        *degree += 1;
                        own += 1;
                    }
                }
                degrees.push(own);
            }
            members.push(member);
            ids.push(cluster);
        }
    }

    let mut data = DMatrix::zeros(dim, total);
    for (i, member) in members.iter().enumerate() {
        data.set_column(i, member);
    }
    Ok((data, ids))
}

/// True when adding `candidate` keeps every degree, including its own,
/// within the cap.
fn accepts_candidate(
    candidate: &DVector<f64>,
    members: &[DVector<f64>],
    degrees: &[usize],
    cap: usize,
) -> bool {
    let mut own = 0;
    for (other, &degree) in members.iter().zip(degrees) {
        if candidate.dot(other) > NEIGHBOR_CAP_TAU {
            if degree + 1 > cap {
                return false;
            }
            own += 1;
            if own > cap {
                return false;
            }
        }
    }
    true
}

/// Teacher coordinates plus Gaussian noise, truncated or zero-padded to the
/// student input size.
fn student_inputs<R: Rng + ?Sized>(
    teacher: &DMatrix<f64>,
    input_dim: usize,
    sigma: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let copy_rows = teacher.nrows().min(input_dim);
    let mut raw = DMatrix::zeros(input_dim, teacher.ncols());
    raw.rows_mut(0, copy_rows)
        .copy_from(&teacher.rows(0, copy_rows));
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("positive std");
        for mut column in raw.columns_mut(0, teacher.ncols()).column_iter_mut() {
            for row in 0..copy_rows {
                column[row] += noise.sample(rng);
            }
        }
    }
    raw
}

fn assemble_world<R: Rng + ?Sized>(
    centers: &DMatrix<f64>,
    per_center: usize,
    spec: &WorldSpec,
    nn_cap: Option<usize>,
    rng: &mut R,
) -> Result<World> {
    let (teacher_data, cluster_ids) =
        draw_population(centers, per_center, spec.kappa, nn_cap, rng)?;
    let student_raw = student_inputs(&teacher_data, spec.student_input_dim, spec.sigma, rng);
    let teacher = EmbeddingMatrix::from_unit_columns(teacher_data, Role::Teacher)?;
    Ok(World {
        teacher,
        student_raw,
        cluster_ids,
    })
}

/// Generates the training population of `spec`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let centers = draw_centers(spec, &mut rng);
    assemble_world(&centers, spec.per_cluster, spec, spec.nn_cap, &mut rng)
}

fn draw_centers<R: Rng + ?Sized>(spec: &WorldSpec, rng: &mut R) -> DMatrix<f64> {
    let mut centers = DMatrix::zeros(spec.teacher_dim, spec.clusters);
    for c in 0..spec.clusters {
        let center = unit_gaussian_vector(spec.teacher_dim, rng);
        centers.set_column(c, &center);
    }
    centers
}

/// Generates training, query, database, and whitening populations around
/// one set of centers, together with ground truth and difficulty splits.
///
/// The neighbor cap, when present, constrains the training population only.
pub fn generate_world_bundle(spec: &WorldSpec, counts: &EvalCounts) -> Result<WorldBundle> {
    spec.validate()?;
    if counts.queries_per_cluster == 0 || counts.db_per_cluster == 0 {
        return Err(Error::InvalidWorldSpec(
            "queries_per_cluster and db_per_cluster must be at least 1".to_string(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let centers = draw_centers(spec, &mut rng);
    let train = assemble_world(&centers, spec.per_cluster, spec, spec.nn_cap, &mut rng)?;
    let queries = assemble_world(&centers, counts.queries_per_cluster, spec, None, &mut rng)?;
    let database = assemble_world(&centers, counts.db_per_cluster, spec, None, &mut rng)?;
    let whitening = assemble_world(
        &centers,
        counts.whiten_per_cluster.max(1),
        spec,
        None,
        &mut rng,
    )?;
    let ground_truth = same_cluster_relevance(&queries.cluster_ids, &database.cluster_ids);
    let splits = difficulty_splits(&queries, &centers);
    Ok(WorldBundle {
        train,
        queries,
        database,
        whitening,
        ground_truth,
        splits,
        centers,
    })
}

/// Relevant database indices per query: exactly the database samples of the
/// query's cluster.
pub fn same_cluster_relevance(query_ids: &[usize], db_ids: &[usize]) -> Vec<Vec<usize>> {
    query_ids
        .iter()
        .map(|&q| {
            db_ids
                .iter()
                .enumerate()
                .filter(|&(_, &d)| d == q)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Terciles of query difficulty by similarity to the query's own center:
/// the closest third is easy, the farthest hard. Ties break by index.
pub fn difficulty_splits(queries: &World, centers: &DMatrix<f64>) -> Vec<Split> {
    let n = queries.len();
    let mut order: Vec<usize> = (0..n).collect();
    let sims: Vec<f64> = (0..n)
        .map(|i| {
            let center = centers.column(queries.cluster_ids[i]);
            queries.teacher.data().column(i).dot(&center)
        })
        .collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let easy_count = n.div_ceil(3);
    let medium_count = (n - easy_count).div_ceil(2);
    let mut splits = vec![Split::Hard; n];
    for (rank, &q) in order.iter().enumerate() {
        splits[q] = if rank < easy_count {
            Split::Easy
        } else if rank < easy_count + medium_count {
            Split::Medium
        } else {
            Split::Hard
        };
    }
    splits
}

/// Anything that can hand out teacher embeddings by sample index.
///
/// `fetch` takes `&mut self` so implementations can count or cache.
pub trait TeacherSource {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn fetch(&mut self, index: usize) -> Result<DVector<f64>>;
}

/// Teacher embeddings served from a matrix already in memory.
#[derive(Debug, Clone)]
pub struct MatrixTeacher {
    embeddings: EmbeddingMatrix,
}

impl MatrixTeacher {
    pub fn new(embeddings: EmbeddingMatrix) -> Self {
        Self { embeddings }
    }
}

impl TeacherSource for MatrixTeacher {
    fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    fn len(&self) -> usize {
        self.embeddings.len()
    }

    fn fetch(&mut self, index: usize) -> Result<DVector<f64>> {
        Ok(self.embeddings.column(index)?.clone_owned())
    }
}

/// Wrapper that counts how often the inner teacher is actually consulted.
///
/// Repeat requests are served from a cache, so `unique_queries` is the
/// extraction budget a run really spent.
pub struct CountingTeacher<S: TeacherSource> {
    inner: S,
    cache: Vec<Option<DVector<f64>>>,
    unique: usize,
    total: usize,
}

impl<S: TeacherSource> CountingTeacher<S> {
    pub fn new(inner: S) -> Self {
        let len = inner.len();
        Self {
            inner,
            cache: vec![None; len],
            unique: 0,
            total: 0,
        }
    }

    /// Distinct samples fetched from the wrapped teacher.
    pub fn unique_queries(&self) -> usize {
        self.unique
    }

    /// All fetch calls, including cache hits.
    pub fn total_requests(&self) -> usize {
        self.total
    }
}

impl<S: TeacherSource> TeacherSource for CountingTeacher<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn fetch(&mut self, index: usize) -> Result<DVector<f64>> {
        if index >= self.cache.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.cache.len(),
            });
        }
        self.total += 1;
        if let Some(cached) = &self.cache[index] {
            return Ok(cached.clone());
        }
        let fetched = self.inner.fetch(index)?;
        self.cache[index] = Some(fetched.clone());
        self.unique += 1;
        Ok(fetched)
    }
}
