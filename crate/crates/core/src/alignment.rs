//! Assigning target words to the source clusters through the transposed
//! single map.

use std::path::Path;

use crate::clustering::{load_assignments, nearest_centroid, save_assignments, Partition};
use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::LinearMap;
use crate::numerics::normalize_rows;
use crate::retrieval::{effective_k, retrieve, Scoring};

/// Aligned source/target subspaces sharing the source partition's ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePairing {
    pub source_partition: Partition,
    pub target_assignments: Vec<usize>,
    /// `(source size, target size)` per subspace id.
    pub pair_sizes: Vec<(usize, usize)>,
}

impl SubspacePairing {
    pub fn new(source_partition: Partition, target_assignments: Vec<usize>) -> Self {
        let mut pair_sizes: Vec<(usize, usize)> = source_partition.sizes().into_iter().map(|s| (s, 0)).collect();
        for &a in &target_assignments {
            pair_sizes[a].1 += 1;
        }
        SubspacePairing {
            source_partition,
            target_assignments,
            pair_sizes,
        }
    }

    pub fn subspaces(&self) -> usize {
        self.source_partition.clusters
    }

    pub fn source_members(&self) -> Vec<Vec<usize>> {
        self.source_partition.members()
    }

    pub fn target_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.subspaces()];
        for (i, &a) in self.target_assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    /// Writes the two `token<TAB>id` files.
    pub fn save(&self, source_path: &Path, target_path: &Path, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<()> {
        save_assignments(source_path, source, &self.source_partition.assignments)?;
        save_assignments(target_path, target, &self.target_assignments)
    }

    pub fn load(source_path: &Path, target_path: &Path, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<Self> {
        let partition = Partition::load(source_path, source)?;
        let target_assignments = load_assignments(target_path, target)?;
        if let Some(&bad) = target_assignments.iter().find(|&&a| a >= partition.clusters) {
            return Err(ClweError::parse(target_path, 0, format!("subspace id {bad} not in source partition")));
        }
        Ok(Self::new(partition, target_assignments))
    }
}

/// CSLS translation of every target word into the source space via `Wᵀ`.
fn back_translate(single_map: &LinearMap, source: &EmbeddingSpace, target: &EmbeddingSpace, k: usize) -> Result<Vec<usize>> {
    if single_map.dim() != target.dim() || source.dim() != target.dim() {
        return Err(ClweError::Shape {
            expected: format!("dimension {}", single_map.dim()),
            actual: format!("source {} / target {}", source.dim(), target.dim()),
        });
    }
    if !single_map.orthogonal_hint && single_map.orthogonality_error() >= 0.1 {
        return Err(ClweError::Config(format!(
            "single map is not near-orthogonal (||WWᵀ-I|| = {:.4})",
            single_map.orthogonality_error()
        )));
    }
    let queries = normalize_rows(single_map.transpose().apply(target.vectors()).view());
    let candidates = normalize_rows(source.vectors());
    let k = effective_k(k, target.len(), source.len());
    Ok(retrieve(queries.view(), candidates.view(), Scoring::Csls { k }, None)
        .into_iter()
        .map(|h| h.expect("no dropout").index)
        .collect())
}

/// Gives each target word the cluster id of its back-translation.
///
/// Fails with [`ClweError::EmptyTargetSubspace`] when some source cluster
/// receives no target word.
pub fn partition_target(
    single_map: &LinearMap,
    source_partition: &Partition,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    k: usize,
) -> Result<SubspacePairing> {
    let back = back_translate(single_map, source, target, k)?;
    let labels: Vec<usize> = back.iter().map(|&s| source_partition.assignments[s]).collect();
    let pairing = SubspacePairing::new(source_partition.clone(), labels);
    let empty: Vec<usize> = pairing
        .pair_sizes
        .iter()
        .enumerate()
        .filter(|(_, &(_, t))| t == 0)
        .map(|(i, _)| i)
        .collect();
    if empty.is_empty() {
        Ok(pairing)
    } else {
        Err(ClweError::EmptyTargetSubspace(empty))
    }
}

/// [`partition_target`], merging source clusters that receive no target
/// word into the cluster with the most similar centroid.
pub fn align_subspaces(
    single_map: &LinearMap,
    source_partition: &Partition,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    k: usize,
) -> Result<SubspacePairing> {
    let back = back_translate(single_map, source, target, k)?;
    let mut partition = source_partition.clone();
    loop {
        let labels: Vec<usize> = back.iter().map(|&s| partition.assignments[s]).collect();
        let pairing = SubspacePairing::new(partition.clone(), labels);
        let empty = pairing.pair_sizes.iter().position(|&(_, t)| t == 0);
        match empty {
            None => return Ok(pairing),
            Some(c) => {
                let into = nearest_centroid(&partition.centroids, c);
                log::warn!("subspace {c} received no target words; merged into {into}");
                let merged: Vec<usize> = partition
                    .assignments
                    .iter()
                    .map(|&a| if a == c { into } else { a })
                    .collect();
                partition = Partition::from_labels(source.vectors(), &merged)?;
            }
        }
    }
}
