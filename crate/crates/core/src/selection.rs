//! Few-shot demo selection: embed, cluster, pick the most similar demo per
//! cluster, then order the picks.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;
use thiserror::Error;

use crate::corpus::{is_excluded, Demo, DemoPool};
use crate::query::Query;

pub const DEFAULT_EMBEDDING_DIM: usize = 512;
const KMEANS_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("embedding input is empty")]
    EmptyInput,
    #[error("embedding backend error: {0}")]
    Backend(String),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cosine of a zero vector")]
    ZeroNorm,
    #[error("demo pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SelectionError> {
    if u.dim() != v.dim() {
        return Err(SelectionError::Dimension(u.dim(), v.dim()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(SelectionError::ZeroNorm);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, SelectionError>;
}

/// Offline embedder: token frequencies hashed into a fixed number of
/// buckets, L2-normalised.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
}

impl Default for LocalHashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"))
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(word) % self.dim as u64) as usize
    }
}

impl Embedder for LocalHashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, SelectionError> {
        let mut values = vec![0.0; self.dim];
        let mut any = false;
        for m in token_regex().find_iter(text) {
            values[self.bucket(&m.as_str().to_lowercase())] += 1.0;
            any = true;
        }
        if !any {
            return Err(SelectionError::EmptyInput);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(EmbeddingVector { values })
    }
}

/// Embedder behind an HTTP endpoint: POST `{"input": text}` returns
/// `{"vector": [..]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    vector: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, SelectionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SelectionError::Backend(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, SelectionError> {
        if text.trim().is_empty() {
            return Err(SelectionError::EmptyInput);
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&RemoteRequest { input: text })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| SelectionError::Backend(e.to_string()))?;
        let body: RemoteResponse = resp
            .json()
            .map_err(|e| SelectionError::Backend(e.to_string()))?;
        if body.vector.is_empty() {
            return Err(SelectionError::Backend("empty vector".into()));
        }
        Ok(EmbeddingVector::new(body.vector))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means (k-means++ seeding, Euclidean distance). Returns the
/// cluster index of every point. The effective k is clamped to the number
/// of distinct points.
pub fn cluster(points: &[EmbeddingVector], k: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut distinct: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if !distinct.iter().any(|&j| points[j].values == p.values) {
            distinct.push(i);
        }
    }
    let k = k.max(1).min(distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[distinct[rng.gen_range(0..distinct.len())]].values.clone());
    while centers.len() < k {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|&i| {
                centers
                    .iter()
                    .map(|c| sq_dist(&points[i].values, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = *distinct.last().expect("nonempty");
        for (&i, &w) in distinct.iter().zip(&weights) {
            if w > 0.0 && target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        // Floating point leftovers can land on an existing center.
        if weights[distinct.iter().position(|&i| i == chosen).unwrap()] == 0.0 {
            let (pos, _) = weights
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (p, &w)| if w > best.1 { (p, w) } else { best });
            chosen = distinct[pos];
        }
        centers.push(points[chosen].values.clone());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    };

    let dim = points[0].dim();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&p.values, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&p.values) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster with the point farthest from its center.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a].values, &centers[assignment[a]]);
                        let db = sq_dist(&points[b].values, &centers[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("nonempty");
                centers[c] = points[far].values.clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&p.values, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random,
    Ascending,
    Descending,
    TotallyRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedDemos {
    pub demos: Vec<Demo>,
    pub similarities: Vec<f64>,
    pub strategy: SelectionStrategy,
}

impl SelectedDemos {
    pub fn empty(strategy: SelectionStrategy) -> Self {
        Self {
            demos: Vec::new(),
            similarities: Vec::new(),
            strategy,
        }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

/// Mixes the run seed with a per-query key and a purpose tag.
pub fn derive_seed(seed: u64, key: &str, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.update([0]);
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Picks up to `k` candidates for `query`.
///
/// Returned indices refer to `candidates`. `key` individualises the random
/// streams per query so a single run seed covers a whole batch.
pub fn select_indices(
    query: &EmbeddingVector,
    candidates: &[EmbeddingVector],
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
    key: &str,
) -> Result<Vec<(usize, f64)>, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let sims: Vec<f64> = candidates
        .iter()
        .map(|c| cosine(query, c))
        .collect::<Result<_, _>>()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, key, "order"));

    if strategy == SelectionStrategy::TotallyRandom {
        let n = k.min(candidates.len());
        let picked = rand::seq::index::sample(&mut order_rng, candidates.len(), n);
        return Ok(picked.into_iter().map(|i| (i, sims[i])).collect());
    }

    let mut picked: Vec<usize> = if candidates.len() <= k {
        (0..candidates.len()).collect()
    } else {
        let assignment = cluster(candidates, k, derive_seed(seed, key, "cluster"));
        let n_clusters = assignment.iter().max().map_or(0, |m| m + 1);
        (0..n_clusters)
            .filter_map(|c| {
                (0..candidates.len())
                    .filter(|&i| assignment[i] == c)
                    .max_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(b.cmp(&a)))
            })
            .collect()
    };
    picked.sort_unstable();

    match strategy {
        SelectionStrategy::Random => picked.shuffle(&mut order_rng),
        SelectionStrategy::Ascending => ascending(&mut picked, &sims),
        SelectionStrategy::Descending => {
            ascending(&mut picked, &sims);
            picked.reverse();
        }
        SelectionStrategy::TotallyRandom => unreachable!(),
    }
    Ok(picked.into_iter().map(|i| (i, sims[i])).collect())
}

fn ascending(picked: &mut [usize], sims: &[f64]) {
    picked.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
}

/// A pool with its demo embeddings computed once.
pub struct EmbeddedPool {
    pub pool: DemoPool,
    vectors: Vec<EmbeddingVector>,
}

impl EmbeddedPool {
    pub fn new(pool: DemoPool, embedder: &dyn Embedder) -> Result<Self, SelectionError> {
        let vectors = pool
            .entries
            .iter()
            .map(|d| embedder.embed(&d.embedding_text()))
            .collect::<Result<_, _>>()?;
        Ok(Self { pool, vectors })
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    /// Applies the exclusion rule for `query`, then selects.
    pub fn select_for(
        &self,
        query: &Query,
        query_embedding: &EmbeddingVector,
        k: usize,
        strategy: SelectionStrategy,
        seed: u64,
    ) -> Result<SelectedDemos, SelectionError> {
        let kept: Vec<usize> = (0..self.pool.len())
            .filter(|&i| !is_excluded(&self.pool.entries[i], query))
            .collect();
        let candidates: Vec<EmbeddingVector> =
            kept.iter().map(|&i| self.vectors[i].clone()).collect();
        let picked = select_indices(query_embedding, &candidates, k, strategy, seed, &query.id())?;
        let mut out = SelectedDemos::empty(strategy);
        for (i, sim) in picked {
            out.demos.push(self.pool.entries[kept[i]].clone());
            out.similarities.push(sim);
        }
        Ok(out)
    }
}
