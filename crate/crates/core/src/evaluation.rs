//! Bilingual lexicon induction accuracy (P@1 with CSLS retrieval) and the
//! per-subspace accuracy breakdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::Mapping;
use crate::numerics::normalize_rows;
use crate::retrieval::{effective_k, read_pairs, retrieve, write_pairs, Scoring};

/// Default number of most frequent source words the per-subspace breakdown
/// looks at.
pub const DEFAULT_SUBSPACE_EVAL_VOCAB: usize = 50_000;

/// Gold translations: each source token maps to a set of acceptable target
/// tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldDictionary {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl GoldDictionary {
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        let mut entries: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (s, t) in pairs {
            entries.entry(s).or_default().insert(t);
        }
        GoldDictionary { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_pairs(read_pairs(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(String, String)> = self
            .entries
            .iter()
            .flat_map(|(s, ts)| ts.iter().map(move |t| (s.clone(), t.clone())))
            .collect();
        write_pairs(path, &pairs)
    }

    /// Number of distinct source tokens.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self, source: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAccuracy {
    pub cluster_id: usize,
    /// Source words of the cluster inside the evaluated vocabulary.
    pub size: usize,
    pub evaluated: usize,
    pub correct: usize,
    /// `None` when no word of the cluster could be evaluated.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BliReport {
    pub p_at_1: f64,
    pub correct: usize,
    pub evaluated: usize,
    pub skipped_oov: usize,
    pub per_subspace: Option<Vec<SubspaceAccuracy>>,
}

impl BliReport {
    /// Evaluable-count weighted mean of the per-subspace accuracies.
    pub fn recombined_p_at_1(&self) -> Option<f64> {
        let rows = self.per_subspace.as_ref()?;
        let total: usize = rows.iter().map(|r| r.evaluated).sum();
        if total == 0 {
            return None;
        }
        Some(
            rows.iter()
                .filter_map(|r| r.accuracy.map(|a| a * r.evaluated as f64 / total as f64))
                .sum(),
        )
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| ClweError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ClweError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Tab-separated per-subspace table (header plus one row per cluster).
    pub fn subspace_table(&self) -> String {
        let mut out = String::from("cluster_id\tsize\tevaluated\tcorrect\taccuracy\n");
        for r in self.per_subspace.iter().flatten() {
            let acc = r.accuracy.map_or("NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.cluster_id, r.size, r.evaluated, r.correct, acc);
        }
        out
    }
}

/// Population standard deviation of the defined per-subspace accuracies.
pub fn accuracy_std(rows: &[SubspaceAccuracy]) -> f64 {
    let acc: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
    if acc.is_empty() {
        return 0.0;
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    (acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / acc.len() as f64).sqrt()
}

fn evaluate(
    map: &dyn Mapping,
    gold: &GoldDictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    k: usize,
    groups: Option<(&Partition, usize)>,
) -> Result<BliReport> {
    if gold.is_empty() {
        return Err(ClweError::EmptyEvaluation);
    }
    let limit = groups.map_or(source.len(), |(_, l)| l.min(source.len()));
    // Evaluable words in source-index order, independent of dictionary order.
    let mut items: Vec<(usize, BTreeSet<usize>)> = gold
        .entries
        .iter()
        .filter_map(|(s, ts)| {
            let i = source.index_of(s).filter(|&i| i < limit)?;
            let t: BTreeSet<usize> = ts.iter().filter_map(|t| target.index_of(t)).collect();
            (!t.is_empty()).then_some((i, t))
        })
        .collect();
    items.sort_unstable_by_key(|(i, _)| *i);
    if items.is_empty() {
        return Err(ClweError::EmptyEvaluation);
    }
    let words: Vec<usize> = items.iter().map(|(i, _)| *i).collect();
    let queries = normalize_rows(map.map_rows(source.rows(&words).view(), &words).view());
    let targets = normalize_rows(target.vectors());
    let k = effective_k(k, words.len(), target.len());
    let hits = retrieve(queries.view(), targets.view(), Scoring::Csls { k }, None);
    let hit_ok: Vec<bool> = hits
        .iter()
        .zip(&items)
        .map(|(h, (_, gold_t))| gold_t.contains(&h.expect("no dropout").index))
        .collect();
    let correct = hit_ok.iter().filter(|&&ok| ok).count();
    let evaluated = words.len();

    let per_subspace = groups.map(|(partition, _)| {
        let mut rows: Vec<SubspaceAccuracy> = (0..partition.clusters)
            .map(|c| SubspaceAccuracy {
                cluster_id: c,
                size: 0,
                evaluated: 0,
                correct: 0,
                accuracy: None,
            })
            .collect();
        for &a in &partition.assignments[..limit] {
            rows[a].size += 1;
        }
        for (&w, &ok) in words.iter().zip(&hit_ok) {
            let r = &mut rows[partition.assignments[w]];
            r.evaluated += 1;
            r.correct += ok as usize;
        }
        for r in &mut rows {
            if r.evaluated > 0 {
                r.accuracy = Some(r.correct as f64 / r.evaluated as f64);
            }
        }
        rows
    });
    Ok(BliReport {
        p_at_1: correct as f64 / evaluated as f64,
        correct,
        evaluated,
        skipped_oov: gold.len() - evaluated,
        per_subspace,
    })
}

/// P@1 over the gold source words present in both vocabularies, retrieving
/// with CSLS. Words without a usable gold translation count as skipped.
pub fn evaluate_bli(
    map: &dyn Mapping,
    gold: &GoldDictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    k: usize,
) -> Result<BliReport> {
    evaluate(map, gold, source, target, k, None)
}

/// Like [`evaluate_bli`], restricted to the `vocab_limit` most frequent
/// source words and broken down by the clusters of `partition`.
pub fn evaluate_bli_by_subspace(
    map: &dyn Mapping,
    gold: &GoldDictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    k: usize,
    partition: &Partition,
    vocab_limit: usize,
) -> Result<BliReport> {
    if partition.len() != source.len() {
        return Err(ClweError::Shape {
            expected: format!("partition over {} words", source.len()),
            actual: format!("{} assignments", partition.len()),
        });
    }
    evaluate(map, gold, source, target, k, Some((partition, vocab_limit)))
}

/// Per-cluster P@1 among the `vocab_limit` most frequent source words.
pub fn per_subspace_accuracy(
    map: &dyn Mapping,
    partition: &Partition,
    gold: &GoldDictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    vocab_limit: usize,
    k: usize,
) -> Result<Vec<SubspaceAccuracy>> {
    let report = evaluate_bli_by_subspace(map, gold, source, target, k, partition, vocab_limit)?;
    Ok(report.per_subspace.expect("grouped evaluation"))
}
