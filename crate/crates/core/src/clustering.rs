//! First-neighbour (FINCH) hierarchical clustering, a minimum-size guard for
//! the selected level, and spherical k-means for diagnostics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::write_matrix;
use crate::numerics::normalize_rows;

const BLOCK: usize = 512;
const KMEANS_MAX_ITERS: usize = 100;

/// A flat clustering: cluster ids are `0..clusters`, each used at least
/// once, and each centroid is the normalized mean of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<usize>,
    pub clusters: usize,
    pub centroids: Array2<f64>,
}

impl Partition {
    /// Builds a partition from arbitrary labels. Ids are renumbered by first
    /// appearance so equal groupings give equal partitions.
    pub fn from_labels(vectors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Partition> {
        if labels.len() != vectors.nrows() {
            return Err(ClweError::Shape {
                expected: format!("{} labels", vectors.nrows()),
                actual: format!("{} labels", labels.len()),
            });
        }
        let mut remap = HashMap::new();
        let assignments: Vec<usize> = labels
            .iter()
            .map(|&l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        let clusters = remap.len();
        Ok(Partition {
            centroids: centroids(vectors, &assignments, clusters),
            assignments,
            clusters,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Word indices of each cluster, in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    /// Writes `token<TAB>cluster_id` lines and the centroid matrix.
    pub fn save(&self, assignments_path: &Path, centroids_path: &Path, space: &EmbeddingSpace) -> Result<()> {
        save_assignments(assignments_path, space, &self.assignments)?;
        write_matrix(centroids_path, self.centroids.view(), true)
    }

    /// Reads assignments written by [`Partition::save`]; centroids are
    /// recomputed from `space`.
    pub fn load(assignments_path: &Path, space: &EmbeddingSpace) -> Result<Partition> {
        let labels = load_assignments(assignments_path, space)?;
        let clusters = labels.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; clusters];
        for &l in &labels {
            used[l] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(ClweError::parse(assignments_path, 0, "cluster ids are not contiguous"));
        }
        Ok(Partition {
            centroids: centroids(space.vectors(), &labels, clusters),
            assignments: labels,
            clusters,
        })
    }
}

pub(crate) fn save_assignments(path: &Path, space: &EmbeddingSpace, labels: &[usize]) -> Result<()> {
    let text: String = space
        .words()
        .iter()
        .zip(labels)
        .map(|(w, l)| format!("{w}\t{l}\n"))
        .collect();
    fs::write(path, text).map_err(|e| ClweError::io(path, e))
}

/// Reads `token<TAB>id` lines; every word of `space` must appear exactly
/// once.
pub(crate) fn load_assignments(path: &Path, space: &EmbeddingSpace) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| ClweError::io(path, e))?;
    let mut labels = vec![usize::MAX; space.len()];
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (tok, id) = line
            .split_once('\t')
            .ok_or_else(|| ClweError::parse(path, i + 1, "expected token<TAB>id"))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| ClweError::parse(path, i + 1, format!("invalid id {id:?}")))?;
        let w = space
            .index_of(tok)
            .ok_or_else(|| ClweError::parse(path, i + 1, format!("unknown token {tok:?}")))?;
        labels[w] = id;
    }
    if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(ClweError::parse(
            path,
            0,
            format!("no assignment for token {:?}", space.word(missing)),
        ));
    }
    Ok(labels)
}

/// Normalized mean of each cluster's rows.
pub(crate) fn centroids(vectors: ArrayView2<'_, f64>, assignments: &[usize], clusters: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((clusters, vectors.ncols()));
    for (row, &a) in vectors.rows().into_iter().zip(assignments) {
        let mut dst = sums.row_mut(a);
        dst += &row;
    }
    normalize_rows(sums.view())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHierarchy {
    /// Finest level first; cluster counts strictly decrease.
    pub levels: Vec<Partition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelPolicy {
    Last,
    SecondToLast,
    Index(usize),
}

impl FromStr for LevelPolicy {
    type Err = ClweError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LevelPolicy::Last),
            "second_to_last" => Ok(LevelPolicy::SecondToLast),
            other => other
                .parse()
                .map(LevelPolicy::Index)
                .map_err(|_| ClweError::Config(format!("unknown level policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for LevelPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LevelPolicy::Last => write!(f, "last"),
            LevelPolicy::SecondToLast => write!(f, "second_to_last"),
            LevelPolicy::Index(i) => write!(f, "{i}"),
        }
    }
}

/// Index of each row's most cosine-similar other row (lowest index on ties).
pub fn first_neighbors(vectors: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(ClweError::TooFewSamples { needed: 2, got: n });
    }
    let unit = normalize_rows(vectors);
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    Ok(starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + BLOCK).min(n);
            let sims = unit.slice(s![start..end, ..]).dot(&unit.t());
            sims.rows()
                .into_iter()
                .enumerate()
                .map(|(offset, row)| {
                    let i = start + offset;
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for (j, &c) in row.iter().enumerate() {
                        if j != i && (best.0 == usize::MAX || c > best.1) {
                            best = (j, c);
                        }
                    }
                    best.0
                })
                .collect::<Vec<_>>()
        })
        .collect())
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
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

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots are deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the first-neighbour adjacency: `i` and `j` are
/// linked when one is the other's first neighbour or they share one.
pub fn finch_partition(vectors: ArrayView2<'_, f64>) -> Result<Partition> {
    let kappa = first_neighbors(vectors)?;
    let n = kappa.len();
    // Linking every i to kappa[i] also joins i and j whenever
    // kappa[i] == kappa[j].
    let mut sets = DisjointSets::new(n);
    for (i, &k) in kappa.iter().enumerate() {
        sets.union(i, k);
    }
    let roots: Vec<usize> = (0..n).map(|i| sets.find(i)).collect();
    Partition::from_labels(vectors, &roots)
}

/// Recursive FINCH: each level clusters the previous level's centroids. The
/// level that would merge everything into one cluster is not kept, unless
/// the very first level already has a single cluster.
pub fn finch_hierarchy(vectors: ArrayView2<'_, f64>) -> Result<ClusterHierarchy> {
    let first = finch_partition(vectors)?;
    let mut levels = vec![first];
    loop {
        let current = levels.last().expect("non-empty");
        if current.clusters < 2 {
            break;
        }
        let upper = finch_partition(current.centroids.view())?;
        if upper.clusters == 1 || upper.clusters >= current.clusters {
            break;
        }
        let labels: Vec<usize> = current
            .assignments
            .iter()
            .map(|&a| upper.assignments[a])
            .collect();
        levels.push(Partition::from_labels(vectors, &labels)?);
    }
    Ok(ClusterHierarchy { levels })
}

pub fn select_level(h: &ClusterHierarchy, policy: LevelPolicy) -> Result<Partition> {
    let n = h.levels.len();
    if n == 0 {
        return Err(ClweError::Config("empty hierarchy".into()));
    }
    let idx = match policy {
        LevelPolicy::Last => n - 1,
        LevelPolicy::SecondToLast => n.saturating_sub(2),
        LevelPolicy::Index(i) if i < n => i,
        LevelPolicy::Index(i) => {
            return Err(ClweError::Config(format!(
                "level {i} out of range for a {n}-level hierarchy"
            )))
        }
    };
    Ok(h.levels[idx].clone())
}

/// Minimum cluster size enforced after level selection.
pub fn min_subspace_size(dim: usize) -> usize {
    (2 * dim).max(32)
}

/// Repeatedly merge the smallest cluster below `min_size` into the cluster
/// whose centroid is most similar, until every cluster is large enough or
/// only one remains.
pub fn merge_small_clusters(partition: &Partition, vectors: ArrayView2<'_, f64>, min_size: usize) -> Result<Partition> {
    let mut p = partition.clone();
    loop {
        if p.clusters < 2 {
            return Ok(p);
        }
        let sizes = p.sizes();
        let Some(small) = (0..p.clusters)
            .filter(|&c| sizes[c] < min_size)
            .min_by_key(|&c| (sizes[c], c))
        else {
            return Ok(p);
        };
        let into = nearest_centroid(&p.centroids, small);
        let labels: Vec<usize> = p
            .assignments
            .iter()
            .map(|&a| if a == small { into } else { a })
            .collect();
        p = Partition::from_labels(vectors, &labels)?;
    }
}

/// The other cluster whose centroid has the highest cosine with cluster `c`.
pub(crate) fn nearest_centroid(centroids: &Array2<f64>, c: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for j in 0..centroids.nrows() {
        if j == c {
            continue;
        }
        let s = centroids.row(c).dot(&centroids.row(j));
        if best.0 == usize::MAX || s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

/// Spherical k-means (cosine assignment, normalized-mean centroids) from
/// seeded farthest-point initialization.
pub fn kmeans(vectors: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Partition> {
    let n = vectors.nrows();
    if k == 0 || k > n {
        return Err(ClweError::Config(format!("k={k} outside 1..={n}")));
    }
    let unit = normalize_rows(vectors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let sq_dist = |a: usize, b: usize| {
        let d = &unit.row(a) - &unit.row(b);
        d.dot(&d)
    };
    let mut min_dist: Vec<f64> = (0..n).map(|i| sq_dist(i, chosen[0])).collect();
    while chosen.len() < k {
        let mut far = (0, f64::NEG_INFINITY);
        for (i, &d) in min_dist.iter().enumerate() {
            if d > far.1 {
                far = (i, d);
            }
        }
        chosen.push(far.0);
        for (i, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(i, far.0));
        }
    }
    let mut cents = unit.select(ndarray::Axis(0), &chosen);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let sims = unit.dot(&cents.t());
        let next: Vec<usize> = sims
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, &s) in row.iter().enumerate() {
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0
            })
            .collect();
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
        cents = centroids(unit.view(), &assign, k);
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                // reseed on the point worst served by its centroid
                let far = (0..n)
                    .min_by(|&a, &b| {
                        let sa = unit.row(a).dot(&cents.row(assign[a]));
                        let sb = unit.row(b).dot(&cents.row(assign[b]));
                        sa.partial_cmp(&sb).expect("finite")
                    })
                    .expect("n >= 1");
                sizes[assign[far]] -= 1;
                assign[far] = c;
                sizes[c] = 1;
                cents.row_mut(c).assign(&unit.row(far));
            }
        }
    }
    Partition::from_labels(unit.view(), &assign)
}
