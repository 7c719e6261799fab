//! Query embeddings, similarity gating against the query database, and
//! agglomerative clustering used to pick representative queries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::CategoryLabels;
use crate::datapoint::{read_jsonl, words_of, JsonlError};
use crate::provider::ProviderError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("datapoint id `{0}` already in the query database")]
    DuplicateId(String),
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length. An all-zero input stays zero.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Embedding(values);
        }
        Embedding(values.into_iter().map(|v| v / norm).collect())
    }

    /// Wraps values without normalizing them.
    pub fn raw(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    }
}

pub trait EmbeddingProvider {
    fn dimension(&self) -> usize;
    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &mut P {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        (**self).embed(texts)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-words embedder: each lower-cased word adds one count
/// to bucket `fnv1a(word) % dim`.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedBowEmbedder { dim }
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; self.dim];
        let words = words_of(text);
        if words.is_empty() {
            v[(fnv1a(b"") % self.dim as u64) as usize] = 1.0;
        }
        for w in words {
            v[(fnv1a(w.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Embedding::normalized(v)
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder::new(256)
    }
}

impl EmbeddingProvider for HashedBowEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// One line of the embedding cache / export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub text: String,
    pub vector: Embedding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<CategoryLabels>,
}

/// Serves vectors from an embedding cache, keyed by text.
#[derive(Debug, Clone)]
pub struct CachedEmbedder {
    dim: usize,
    by_text: HashMap<String, Embedding>,
}

impl CachedEmbedder {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, EmbeddingError> {
        let dim = records.first().map(|r| r.vector.dim()).unwrap_or(0);
        let mut by_text = HashMap::new();
        for r in records {
            if r.vector.dim() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: r.vector.dim(),
                });
            }
            by_text.insert(r.text, Embedding::normalized(r.vector.0));
        }
        Ok(CachedEmbedder { dim, by_text })
    }

    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let records: Vec<EmbeddingRecord> =
            read_jsonl(file).map_err(|e: JsonlError| Box::new(e))?;
        Ok(CachedEmbedder::new(records)?)
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.by_text.get(t).cloned().ok_or_else(|| {
                    ProviderError::BadResponse(format!("no cached embedding for `{t}`"))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub id: String,
    pub text: String,
    pub embedding: Embedding,
}

/// The growing set of accepted queries with their embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryDatabase {
    entries: Vec<DbEntry>,
    index: HashMap<String, usize>,
    representatives: Vec<String>,
}

impl QueryDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&DbEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.embedding.dim())
    }

    pub fn representatives(&self) -> &[String] {
        &self.representatives
    }

    pub fn set_representatives(&mut self, ids: Vec<String>) {
        debug_assert!(ids.iter().all(|id| self.index.contains_key(id)));
        self.representatives = ids;
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        text: impl Into<String>,
        embedding: Embedding,
    ) -> Result<(), EmbeddingError> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        if let Some(d) = self.dim() {
            if embedding.dim() != d {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: d,
                    got: embedding.dim(),
                });
            }
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push(DbEntry {
            id,
            text: text.into(),
            embedding,
        });
        Ok(())
    }

    /// Highest cosine similarity of `query` against any entry; -1 when empty.
    pub fn nearest_similarity(&self, query: &Embedding) -> Result<f64, EmbeddingError> {
        if let Some(d) = self.dim() {
            if query.dim() != d {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: d,
                    got: query.dim(),
                });
            }
        }
        Ok(self
            .entries
            .iter()
            .map(|e| cosine(query, &e.embedding))
            .fold(-1.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_query_max_sim: Vec<f64>,
    pub batch_percent_similar: f64,
    pub threshold_tau: f64,
    pub batch_threshold_x: f64,
}

impl SimilarityReport {
    /// Indices of batch queries whose nearest database entry exceeds tau.
    pub fn similar_indices(&self) -> Vec<usize> {
        self.per_query_max_sim
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > self.threshold_tau)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn exceeds_batch_threshold(&self) -> bool {
        self.batch_percent_similar > self.batch_threshold_x
    }
}

pub fn max_similarity(
    batch: &[Embedding],
    db: &QueryDatabase,
    tau: f64,
    batch_threshold_x: f64,
) -> Result<SimilarityReport, EmbeddingError> {
    let per_query_max_sim = batch
        .iter()
        .map(|e| db.nearest_similarity(e))
        .collect::<Result<Vec<_>, _>>()?;
    let over = per_query_max_sim.iter().filter(|s| **s > tau).count();
    let batch_percent_similar = if batch.is_empty() {
        0.0
    } else {
        100.0 * over as f64 / batch.len() as f64
    };
    Ok(SimilarityReport {
        per_query_max_sim,
        batch_percent_similar,
        threshold_tau: tau,
        batch_threshold_x,
    })
}

// ---------------------------------------------------------------------------
// Average-linkage agglomerative clustering
// ---------------------------------------------------------------------------

/// Condensed symmetric distance matrix over `n` points.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn new(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                data.push(f(i, j));
            }
        }
        Condensed { n, data }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

/// One merge of the dendrogram: the two clusters joined (as sorted point
/// indices) and the average-linkage distance between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStep {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    n: usize,
    /// (point a, point b, distance), sorted by distance.
    merges: Vec<(usize, usize, f64)>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

/// Average-linkage clustering over a distance function using the
/// nearest-neighbour chain algorithm (O(n^2) time and memory).
pub fn average_linkage(n: usize, distance: impl FnMut(usize, usize) -> f64) -> Dendrogram {
    let mut d = Condensed::new(n, distance);
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut chain: Vec<usize> = Vec::new();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for _ in 1..n {
        if chain.is_empty() {
            chain.push(
                active
                    .iter()
                    .position(|a| *a)
                    .expect("an active cluster remains"),
            );
        }
        let (a, b) = loop {
            let a = *chain.last().expect("chain not empty");
            let prev = (chain.len() >= 2).then(|| chain[chain.len() - 2]);
            let (mut best, mut best_d) = match prev {
                Some(p) => (p, d.get(a, p)),
                None => (usize::MAX, f64::INFINITY),
            };
            for x in (0..n).filter(|&x| active[x] && x != a) {
                let dx = d.get(a, x);
                if dx < best_d {
                    best = x;
                    best_d = dx;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                break (a, best);
            }
            chain.push(best);
        };

        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        merges.push((keep, drop, d.get(a, b)));
        let (sk, sd) = (size[keep] as f64, size[drop] as f64);
        for x in (0..n).filter(|&x| active[x] && x != keep && x != drop) {
            let v = (sk * d.get(keep, x) + sd * d.get(drop, x)) / (sk + sd);
            d.set(keep, x, v);
        }
        active[drop] = false;
        size[keep] += size[drop];
    }

    merges.sort_by(|x, y| x.2.total_cmp(&y.2));
    Dendrogram { n, merges }
}

impl Dendrogram {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Merges in increasing distance order, with cluster memberships.
    pub fn steps(&self) -> Vec<MergeStep> {
        let mut uf = UnionFind::new(self.n);
        let mut members: Vec<Vec<usize>> = (0..self.n).map(|i| vec![i]).collect();
        let mut out = Vec::with_capacity(self.merges.len());
        for &(a, b, distance) in &self.merges {
            let (ra, rb) = (uf.find(a), uf.find(b));
            let mut left = std::mem::take(&mut members[ra]);
            let mut right = std::mem::take(&mut members[rb]);
            left.sort_unstable();
            right.sort_unstable();
            if left > right {
                std::mem::swap(&mut left, &mut right);
            }
            let root = uf.union(ra, rb);
            let mut joined = left.clone();
            joined.extend(&right);
            joined.sort_unstable();
            members[root] = joined;
            out.push(MergeStep {
                left,
                right,
                distance,
            });
        }
        out
    }

    /// Flat clustering with `min(k, n)` clusters, each a sorted list of point
    /// indices; clusters ordered by their smallest member.
    pub fn cut(&self, k: usize) -> Vec<Vec<usize>> {
        let k = k.clamp(1, self.n.max(1));
        let mut uf = UnionFind::new(self.n);
        for &(a, b, _) in self.merges.iter().take(self.n.saturating_sub(k)) {
            uf.union(a, b);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            let r = uf.find(i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }
}

/// Cosine distance `1 - cos`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    1.0 - cosine(a, b)
}

/// Clusters the database into `min(k, |db|)` groups (average linkage, cosine
/// distance) and returns, per group, the entry closest to the group's mean
/// embedding. Ties go to the lowest id; the result is sorted by id.
pub fn cluster_representatives(db: &QueryDatabase, k: usize) -> Vec<String> {
    let entries = db.entries();
    if entries.is_empty() || k == 0 {
        return Vec::new();
    }
    let dendrogram = average_linkage(entries.len(), |i, j| {
        cosine_distance(&entries[i].embedding, &entries[j].embedding)
    });
    let mut reps: Vec<String> = dendrogram
        .cut(k)
        .iter()
        .map(|cluster| nearest_to_mean(entries, cluster))
        .collect();
    reps.sort();
    reps
}

fn nearest_to_mean(entries: &[DbEntry], cluster: &[usize]) -> String {
    let dim = entries[cluster[0]].embedding.dim();
    let mut mean = vec![0.0; dim];
    for &i in cluster {
        for (m, v) in mean.iter_mut().zip(entries[i].embedding.as_slice()) {
            *m += v;
        }
    }
    let mean = Embedding::raw(mean.into_iter().map(|m| m / cluster.len() as f64).collect());
    // For unit vectors, the Euclidean-nearest point to the mean is the one
    // with the largest dot product against it.
    let mut best: Option<(&str, f64)> = None;
    for &i in cluster {
        let e = &entries[i];
        let score = e.embedding.dot(&mean);
        best = match best {
            None => Some((&e.id, score)),
            Some((id, s))
                if score > s + 1e-12 || ((score - s).abs() <= 1e-12 && e.id.as_str() < id) =>
            {
                Some((&e.id, score))
            }
            keep => keep,
        };
    }
    best.expect("cluster is nonempty").0.to_string()
}
