//! Translation retrieval (nearest neighbour and CSLS), the unsupervised
//! model-selection criterion, and bidirectional seed-dictionary induction.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::Mapping;
use crate::numerics::normalize_rows;

pub const DEFAULT_CSLS_K: usize = 10;
/// Number of source words the selection criterion and dictionary induction
/// consider by default.
pub const DEFAULT_INDUCTION_VOCAB: usize = 10_000;

const BLOCK: usize = 512;

/// Random removal of similarity-matrix entries used by stochastic dictionary
/// induction. Whether entry `(query, candidate)` survives is a pure function
/// of the seed and the two indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreDropout {
    pub keep_prob: f64,
    pub seed: u64,
}

impl ScoreDropout {
    fn keeps(&self, query: usize, candidate: usize) -> bool {
        if self.keep_prob >= 1.0 {
            return true;
        }
        let mut z = self
            .seed
            .wrapping_add((query as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add((candidate as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        // splitmix64 finalizer
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64) < self.keep_prob
    }
}

/// Retrieval result for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Cosine,
    Csls { k: usize },
}

/// Mean of the `k` largest values, summed in descending order.
pub(crate) fn top_k_mean(values: &mut [f64], k: usize) -> f64 {
    let k = k.min(values.len());
    if k == 0 {
        return 0.0;
    }
    let desc = |a: &f64, b: &f64| b.partial_cmp(a).unwrap_or(Ordering::Equal);
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, desc);
    }
    let top = &mut values[..k];
    top.sort_unstable_by(desc);
    top.iter().sum::<f64>() / k as f64
}

/// Mean cosine of each row of `a` to its `k` nearest rows of `b`. Both
/// inputs must already be unit-norm.
fn neighbourhood_means(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, k: usize) -> Vec<f64> {
    let starts: Vec<usize> = (0..a.nrows()).step_by(BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + BLOCK).min(a.nrows());
            let sims = a.slice(s![start..end, ..]).dot(&b.t());
            sims.rows()
                .into_iter()
                .map(|row| top_k_mean(&mut row.to_vec(), k))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Top-1 retrieval of unit-norm `queries` among unit-norm `candidates`.
///
/// `query_ids` and `candidate_ids` give the identifiers the dropout mask is
/// keyed on. Ties go to the lowest candidate position. A query whose every
/// score was dropped gets `None`.
pub(crate) fn retrieve(
    queries: ArrayView2<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    scoring: Scoring,
    dropout: Option<(&ScoreDropout, &[usize], &[usize])>,
) -> Vec<Option<Hit>> {
    let (rt, rs) = match scoring {
        Scoring::Cosine => (None, None),
        Scoring::Csls { k } => (
            Some(neighbourhood_means(queries, candidates, k)),
            Some(neighbourhood_means(candidates, queries, k)),
        ),
    };
    let starts: Vec<usize> = (0..queries.nrows()).step_by(BLOCK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + BLOCK).min(queries.nrows());
            let sims = queries.slice(s![start..end, ..]).dot(&candidates.t());
            let mut out = Vec::with_capacity(end - start);
            for (offset, row) in sims.rows().into_iter().enumerate() {
                let q = start + offset;
                let mut best: Option<(usize, f64)> = None;
                for (j, &cos) in row.iter().enumerate() {
                    if let Some((mask, qids, cids)) = dropout {
                        if !mask.keeps(qids[q], cids[j]) {
                            continue;
                        }
                    }
                    let score = match (&rt, &rs) {
                        (Some(rt), Some(rs)) => 2.0 * cos - rt[q] - rs[j],
                        _ => cos,
                    };
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((j, score));
                    }
                }
                out.push(best.map(|(j, _)| Hit {
                    index: j,
                    cosine: row[j],
                }));
            }
            out
        })
        .collect()
}

fn check_queries(queries: ArrayView2<'_, f64>, target: &EmbeddingSpace) -> Result<()> {
    if queries.ncols() != target.dim() {
        return Err(ClweError::Shape {
            expected: format!("query width {}", target.dim()),
            actual: format!("query width {}", queries.ncols()),
        });
    }
    if queries.nrows() == 0 {
        return Err(ClweError::Shape {
            expected: "at least one query".into(),
            actual: "0 queries".into(),
        });
    }
    Ok(())
}

/// Largest usable CSLS neighbourhood for `q` queries and `n` candidates.
pub(crate) fn effective_k(k: usize, q: usize, n: usize) -> usize {
    k.min(q).min(n).max(1)
}

/// CSLS top-1 target index per (already mapped) query row.
///
/// `k` must not exceed the number of target rows nor the number of
/// queries, since the target-side neighbourhood is taken over the query
/// set.
pub fn csls_translate(
    queries: ArrayView2<'_, f64>,
    target: &EmbeddingSpace,
    k: usize,
) -> Result<Vec<usize>> {
    check_queries(queries, target)?;
    if k == 0 || k > target.len() || k > queries.nrows() {
        return Err(ClweError::Config(format!(
            "CSLS k={k} outside 1..={}",
            target.len().min(queries.nrows())
        )));
    }
    let q = normalize_rows(queries);
    let t = normalize_rows(target.vectors());
    Ok(retrieve(q.view(), t.view(), Scoring::Csls { k }, None)
        .into_iter()
        .map(|h| h.expect("no dropout").index)
        .collect())
}

/// Cosine nearest neighbour per query row.
pub fn nn_translate(queries: ArrayView2<'_, f64>, target: &EmbeddingSpace) -> Result<Vec<usize>> {
    check_queries(queries, target)?;
    let q = normalize_rows(queries);
    let t = normalize_rows(target.vectors());
    Ok(retrieve(q.view(), t.view(), Scoring::Cosine, None)
        .into_iter()
        .map(|h| h.expect("no dropout").index)
        .collect())
}

/// Mean cosine between mapped source words and their CSLS translations,
/// over the given source words.
pub fn criterion_over(
    map: &dyn Mapping,
    source: &EmbeddingSpace,
    words: &[usize],
    target_vectors: ArrayView2<'_, f64>,
    k: usize,
) -> Result<f64> {
    if words.is_empty() {
        return Err(ClweError::Config("criterion needs at least one word".into()));
    }
    let mapped = normalize_rows(map.map_rows(source.rows(words).view(), words).view());
    if !mapped.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("non-finite mapped vectors".into()));
    }
    let k = effective_k(k, words.len(), target_vectors.nrows());
    let hits = retrieve(mapped.view(), target_vectors, Scoring::Csls { k }, None);
    let total: f64 = hits.iter().map(|h| h.expect("no dropout").cosine).sum();
    Ok(total / words.len() as f64)
}

/// Unsupervised model-selection criterion: mean cosine between the mapped
/// top `vocab_limit` source words and their CSLS translations.
pub fn selection_criterion(
    map: &dyn Mapping,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    vocab_limit: usize,
    k: usize,
) -> Result<f64> {
    if vocab_limit == 0 {
        return Err(ClweError::Config("vocab_limit must be positive".into()));
    }
    let words: Vec<usize> = (0..vocab_limit.min(source.len())).collect();
    let t = normalize_rows(target.vectors());
    criterion_over(map, source, &words, t.view(), k)
}

/// Translation pairs `(source index, target index)`, at most one per source
/// word, sorted by source index.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedDictionary {
    pub pairs: Vec<(usize, usize)>,
    pub source_space_id: String,
    pub target_space_id: String,
}

impl SeedDictionary {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<()> {
        let pairs: Vec<(String, String)> = self
            .pairs
            .iter()
            .map(|&(s, t)| (source.word(s).to_string(), target.word(t).to_string()))
            .collect();
        write_pairs(path.as_ref(), &pairs)
    }

    /// Load a dictionary of token pairs, resolving tokens against the two
    /// spaces. Pairs with unknown tokens and repeated source words are
    /// skipped.
    pub fn load(path: impl AsRef<Path>, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for (s, t) in read_pairs(path.as_ref())? {
            if let (Some(i), Some(j)) = (source.index_of(&s), target.index_of(&t)) {
                if seen.insert(i) {
                    pairs.push((i, j));
                }
            }
        }
        pairs.sort_unstable();
        Ok(SeedDictionary {
            pairs,
            source_space_id: "source".into(),
            target_space_id: "target".into(),
        })
    }
}

/// Write `source<TAB>target` lines.
pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let file = File::create(path).map_err(|e| ClweError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (s, t) in pairs {
        writeln!(w, "{s}\t{t}").map_err(|e| ClweError::io(path, e))?;
    }
    w.flush().map_err(|e| ClweError::io(path, e))
}

/// Read a dictionary with one pair per line, separated by a tab or a single
/// space. Blank lines are ignored.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| ClweError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClweError::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .or_else(|| line.split_once(' '))
            .ok_or_else(|| ClweError::parse(path, i + 1, "expected two tokens"))?;
        if s.is_empty() || t.is_empty() || t.contains(['\t', ' ']) {
            return Err(ClweError::parse(path, i + 1, format!("malformed pair {line:?}")));
        }
        out.push((s.to_string(), t.to_string()));
    }
    Ok(out)
}

/// A seed dictionary plus the mean cosine of its pairs under the forward
/// map.
#[derive(Debug, Clone)]
pub(crate) struct Induced {
    pub dictionary: SeedDictionary,
    pub mean_cosine: f64,
}

pub(crate) fn induce(
    forward: &dyn Mapping,
    backward: &dyn Mapping,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    vocab_limit: usize,
    k: usize,
    dropout: Option<ScoreDropout>,
) -> Result<Induced> {
    if vocab_limit == 0 {
        return Err(ClweError::Config("vocab_limit must be positive".into()));
    }
    if source.dim() != target.dim() {
        return Err(ClweError::Shape {
            expected: format!("dimension {}", source.dim()),
            actual: format!("dimension {}", target.dim()),
        });
    }
    let src_words: Vec<usize> = (0..vocab_limit.min(source.len())).collect();
    let fwd_queries = normalize_rows(forward.map_rows(source.rows(&src_words).view(), &src_words).view());
    let target_unit = normalize_rows(target.vectors());
    let all_targets: Vec<usize> = (0..target.len()).collect();
    let fwd_mask = dropout.map(|d| ScoreDropout {
        seed: d.seed ^ 0x5eed_f0da,
        ..d
    });
    let fwd = retrieve(
        fwd_queries.view(),
        target_unit.view(),
        Scoring::Csls {
            k: effective_k(k, src_words.len(), target.len()),
        },
        fwd_mask.as_ref().map(|m| (m, src_words.as_slice(), all_targets.as_slice())),
    );

    let retrieved: Vec<usize> = fwd
        .iter()
        .flatten()
        .map(|h| h.index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if retrieved.is_empty() {
        return Err(ClweError::EmptyDictionary("no forward translations".into()));
    }
    let bwd_queries = normalize_rows(backward.map_rows(target.rows(&retrieved).view(), &retrieved).view());
    let source_unit = normalize_rows(source.vectors());
    let all_sources: Vec<usize> = (0..source.len()).collect();
    let bwd_mask = dropout.map(|d| ScoreDropout {
        seed: d.seed ^ 0xb0c4_da7a,
        ..d
    });
    let bwd = retrieve(
        bwd_queries.view(),
        source_unit.view(),
        Scoring::Csls {
            k: effective_k(k, retrieved.len(), source.len()),
        },
        bwd_mask.as_ref().map(|m| (m, retrieved.as_slice(), all_sources.as_slice())),
    );

    let mut pairs = Vec::new();
    let mut cos_sum = 0.0;
    for (&s, hit) in src_words.iter().zip(&fwd) {
        let Some(hit) = hit else { continue };
        let pos = retrieved.binary_search(&hit.index).expect("retrieved target");
        if bwd[pos].map(|b| b.index) == Some(s) {
            pairs.push((s, hit.index));
            cos_sum += hit.cosine;
        }
    }
    if pairs.is_empty() {
        return Err(ClweError::EmptyDictionary(format!(
            "no mutual translations among {} source words",
            src_words.len()
        )));
    }
    let mean_cosine = cos_sum / pairs.len() as f64;
    Ok(Induced {
        dictionary: SeedDictionary {
            pairs,
            source_space_id: "source".into(),
            target_space_id: "target".into(),
        },
        mean_cosine,
    })
}

/// Mutual-translation dictionary: the top `vocab_limit` source words are
/// translated with `forward`, the translations are translated back with
/// `backward`, and a pair survives only if it returns to its source word.
///
/// The backward retrieval searches the whole source vocabulary and takes
/// its CSLS target-side neighbourhood over the distinct forward
/// translations.
pub fn induce_seed_dictionary(
    forward: &dyn Mapping,
    backward: &dyn Mapping,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    vocab_limit: usize,
    k: usize,
) -> Result<SeedDictionary> {
    induce(forward, backward, source, target, vocab_limit, k, None).map(|i| i.dictionary)
}

/// Unit-norm copy of a space's vectors.
pub fn unit_vectors(space: &EmbeddingSpace) -> Array2<f64> {
    normalize_rows(space.vectors())
}
