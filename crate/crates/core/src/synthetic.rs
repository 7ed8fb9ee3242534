//! Ground-truth piecewise-rotation instances used as desk-scale oracles.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::evaluation::GoldDictionary;
use crate::mapping::{write_matrix, AssignedMaps};
use crate::numerics::{frobenius_distance, from_nalgebra};

/// Minimum pairwise Frobenius distance between the per-cluster rotations.
const MIN_ROTATION_GAP: f64 = 1.0;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn orthogonal_from(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Haar measure: fix column signs by the diagonal of R.
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    from_nalgebra(&q)
}

/// A seeded random rotation (orthogonal, determinant +1).
pub fn random_orthogonal(d: usize, seed: u64) -> Result<Array2<f64>> {
    if d < 2 {
        return Err(ClweError::Config(format!("dimension {d} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(orthogonal_from(&mut rng, d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub gold: GoldDictionary,
    pub true_maps: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub noise_sigma: f64,
}

impl SyntheticInstance {
    /// The generating piecewise map, keyed by word index.
    pub fn true_mapping(&self) -> AssignedMaps {
        AssignedMaps {
            assignments: self.labels.clone(),
            maps: self.true_maps.clone(),
        }
    }

    /// Writes `source.vec`, `target.vec`, `gold.txt`, `labels.tsv` and one
    /// `true_map_<c>.txt` per cluster.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ClweError::io(dir, e))?;
        self.source.save(dir.join("source.vec"))?;
        self.target.save(dir.join("target.vec"))?;
        self.gold.save(&dir.join("gold.txt"))?;
        let labels: String = self
            .source
            .words()
            .iter()
            .zip(&self.labels)
            .map(|(w, l)| format!("{w}\t{l}\n"))
            .collect();
        let p = dir.join("labels.tsv");
        fs::write(&p, labels).map_err(|e| ClweError::io(&p, e))?;
        for (c, q) in self.true_maps.iter().enumerate() {
            write_matrix(&dir.join(format!("true_map_{c}.txt")), q.view(), false)?;
        }
        Ok(())
    }
}

/// Clustered source points and a target built by rotating each cluster with
/// its own orthogonal map, plus optional Gaussian noise.
pub fn generate_instance(p: &SyntheticParams) -> Result<SyntheticInstance> {
    if p.clusters == 0 || p.per_cluster == 0 {
        return Err(ClweError::Config("clusters and per_cluster must be positive".into()));
    }
    if p.dim < 2 {
        return Err(ClweError::Config(format!("dimension {} < 2", p.dim)));
    }
    if !(p.separation > 0.0) || !(p.noise_sigma >= 0.0) {
        return Err(ClweError::Config("separation must be positive, noise non-negative".into()));
    }
    let d = p.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let centers: Vec<Array1<f64>> = (0..p.clusters)
        .map(|_| {
            let v = Array1::from_shape_simple_fn(d, || gaussian(&mut rng));
            let n = v.dot(&v).sqrt();
            v * (p.separation / n)
        })
        .collect();

    let mut maps: Vec<Array2<f64>> = Vec::with_capacity(p.clusters);
    while maps.len() < p.clusters {
        let q = orthogonal_from(&mut rng, d);
        if maps
            .iter()
            .all(|m| frobenius_distance(m.view(), q.view()) >= MIN_ROTATION_GAP)
        {
            maps.push(q);
        }
    }

    let mut labels: Vec<usize> = (0..p.clusters)
        .flat_map(|c| std::iter::repeat_n(c, p.per_cluster))
        .collect();
    labels.shuffle(&mut rng);

    let n = labels.len();
    let mut src = Array2::zeros((n, d));
    let mut tgt = Array2::zeros((n, d));
    for (i, &c) in labels.iter().enumerate() {
        let mut v = &centers[c] + &Array1::from_shape_simple_fn(d, || gaussian(&mut rng));
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let mut t = maps[c].dot(&v);
        if p.noise_sigma > 0.0 {
            t += &Array1::from_shape_simple_fn(d, || p.noise_sigma * gaussian(&mut rng));
        }
        let tn = t.dot(&t).sqrt();
        t /= tn;
        src.row_mut(i).assign(&v);
        tgt.row_mut(i).assign(&t);
    }
    let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let gold = GoldDictionary::from_pairs(words.iter().map(|w| (w.clone(), w.clone())));
    Ok(SyntheticInstance {
        source: EmbeddingSpace::new(words.clone(), src)?,
        target: EmbeddingSpace::new(words, tgt)?,
        gold,
        true_maps: maps,
        labels,
        noise_sigma: p.noise_sigma,
    })
}
