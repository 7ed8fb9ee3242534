//! Procrustes refinement driven by stochastically induced seed
//! dictionaries, applied to one map, globally on top of a piecewise map, or
//! locally per subspace pair.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::LinearMap;
use crate::multi_gan::PiecewiseMap;
use crate::numerics::{mix_seed, svd};
use crate::retrieval::{induce, ScoreDropout, SeedDictionary, DEFAULT_CSLS_K, DEFAULT_INDUCTION_VOCAB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Initial keep probability of each similarity score.
    pub p0: f64,
    /// Factor applied to the keep probability when the objective stalls.
    pub p_growth: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub vocab_limit: usize,
    pub csls_k: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            p0: 0.1,
            p_growth: 2.0,
            threshold: 1e-6,
            max_iters: 50,
            vocab_limit: DEFAULT_INDUCTION_VOCAB,
            csls_k: DEFAULT_CSLS_K,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(ClweError::Config(format!("p0 must be in (0, 1], got {}", self.p0)));
        }
        if !(self.p_growth > 1.0) {
            return Err(ClweError::Config(format!("p_growth must exceed 1, got {}", self.p_growth)));
        }
        if !(self.threshold >= 0.0) {
            return Err(ClweError::Config("threshold must be non-negative".into()));
        }
        if self.max_iters == 0 || self.vocab_limit == 0 || self.csls_k == 0 {
            return Err(ClweError::Config("max_iters, vocab_limit and csls_k must be positive".into()));
        }
        Ok(())
    }
}

/// Orthogonal `W` minimizing `sum ||W x - y||^2` over the dictionary pairs.
pub fn procrustes(dict: &SeedDictionary, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<LinearMap> {
    if dict.pairs.is_empty() {
        return Err(ClweError::EmptyDictionary("procrustes needs at least one pair".into()));
    }
    let (src, tgt): (Vec<usize>, Vec<usize>) = dict.pairs.iter().copied().unzip();
    let x = source.rows(&src);
    let y = target.rows(&tgt);
    if x.ncols() != y.ncols() {
        return Err(ClweError::Shape {
            expected: format!("dimension {}", x.ncols()),
            actual: format!("dimension {}", y.ncols()),
        });
    }
    let m = y.t().dot(&x);
    let (u, _, vt) = svd(m.view())?;
    LinearMap::new(u.dot(&vt), true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub iteration: usize,
    pub keep_prob: f64,
    pub objective: f64,
    pub best_objective: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub map: LinearMap,
    pub objective: f64,
    pub log: Vec<RefineStep>,
}

/// Writes one `iteration<TAB>p<TAB>objective<TAB>best<TAB>pairs` line per
/// step.
pub fn write_refine_log(path: &Path, log: &[RefineStep]) -> Result<()> {
    let mut text = String::from("iteration\tp\tobjective\tbest\tpairs\n");
    for s in log {
        text.push_str(&format!(
            "{}\t{:?}\t{:?}\t{:?}\t{}\n",
            s.iteration, s.keep_prob, s.objective, s.best_objective, s.pairs
        ));
    }
    fs::write(path, text).map_err(|e| ClweError::io(path, e))
}

/// Alternates dictionary induction (each CSLS score kept with probability
/// `p`) and Procrustes.
///
/// The objective of a map is the mean cosine of the pairs it induces with
/// every score kept, so objectives stay comparable while `p` changes. When
/// an iteration fails to beat the best objective by `threshold`, `p` grows
/// and the search resumes from the best map; a stall at `p = 1` ends the
/// loop. Returns the map with the best objective.
pub fn stochastic_refine(
    initial: &LinearMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    let mut w = initial.clone();
    let mut p = cfg.p0;
    let mut best: Option<(f64, LinearMap)> = None;
    let mut log = Vec::new();
    for iteration in 1..=cfg.max_iters {
        let named = |e: ClweError| match e {
            ClweError::EmptyDictionary(msg) => ClweError::EmptyDictionary(format!("refinement iteration {iteration}: {msg}")),
            other => other,
        };
        let clean = induce(&w, &w.transpose(), source, target, cfg.vocab_limit, cfg.csls_k, None).map_err(named)?;
        let objective = clean.mean_cosine;
        let improvement = best.as_ref().map_or(f64::INFINITY, |(b, _)| objective - b);
        if improvement > 0.0 {
            best = Some((objective, w.clone()));
        }
        let (best_objective, best_map) = best.as_ref().expect("first iteration sets best");
        log.push(RefineStep {
            iteration,
            keep_prob: p,
            objective,
            best_objective: *best_objective,
            pairs: clean.dictionary.len(),
        });
        let mut dictionary = Some(clean.dictionary);
        if improvement < cfg.threshold {
            if p >= 1.0 {
                break;
            }
            p = (p * cfg.p_growth).min(1.0);
            if w != *best_map {
                w = best_map.clone();
                dictionary = None;
            }
        }
        let dictionary = if p < 1.0 {
            let dropout = ScoreDropout {
                keep_prob: p,
                seed: mix_seed(cfg.seed, iteration as u64),
            };
            induce(&w, &w.transpose(), source, target, cfg.vocab_limit, cfg.csls_k, Some(dropout))
                .map_err(named)?
                .dictionary
        } else {
            match dictionary {
                Some(d) => d,
                None => induce(&w, &w.transpose(), source, target, cfg.vocab_limit, cfg.csls_k, None)
                    .map_err(named)?
                    .dictionary,
            }
        };
        w = procrustes(&dictionary, source, target)?;
    }
    let (objective, map) = best.expect("at least one iteration");
    Ok(RefineOutcome { map, objective, log })
}

/// Refinement applied to a piecewise map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    None,
    Global,
    Local,
    /// Treat the single map alone.
    Single,
}

impl FromStr for RefineMode {
    type Err = ClweError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefineMode::None),
            "global" => Ok(RefineMode::Global),
            "local" => Ok(RefineMode::Local),
            "single" => Ok(RefineMode::Single),
            other => Err(ClweError::Config(format!("unknown refinement mode {other:?}"))),
        }
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineMode::None => "none",
            RefineMode::Global => "global",
            RefineMode::Local => "local",
            RefineMode::Single => "single",
        })
    }
}

/// Refines one shared map `W_g` between the piecewise-mapped source and the
/// target, then composes it onto every subspace map.
pub fn global_refine(
    pm: &PiecewiseMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &RefineConfig,
) -> Result<(PiecewiseMap, RefineOutcome)> {
    let mapped = pm.transform_source(source)?;
    let outcome = stochastic_refine(&LinearMap::identity(source.dim()), &mapped, target, cfg)?;
    let wg = &outcome.map.w;
    let mut out = pm.clone();
    for m in &mut out.maps {
        let w = wg.dot(&m.w);
        let hint = m.orthogonal_hint;
        *m = LinearMap { w, orthogonal_hint: hint };
        m.orthogonal_hint = m.orthogonality_error() < 1e-3;
    }
    Ok((out, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLog {
    pub subspace: usize,
    /// `false` when the subspace kept its incoming map.
    pub refined: bool,
    pub note: Option<String>,
    pub steps: Vec<RefineStep>,
}

/// Seed of subspace `id`'s local refinement.
pub fn local_seed(seed: u64, id: usize) -> u64 {
    mix_seed(seed, 0x10ca_1000 + id as u64)
}

/// Refines each subspace map against its own subspace pair. Induction only
/// retrieves within the pair. A subspace whose refinement cannot run keeps
/// its map.
pub fn local_refine(
    pm: &PiecewiseMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &RefineConfig,
) -> Result<(PiecewiseMap, Vec<LocalLog>)> {
    cfg.validate()?;
    let source_members = pm.pairing.source_members();
    let target_members = pm.pairing.target_members();
    let results: Vec<(LinearMap, LocalLog)> = (0..pm.maps.len())
        .into_par_iter()
        .map(|i| {
            let kept = |note: String| {
                log::warn!("local refinement of subspace {i} skipped: {note}");
                (
                    pm.maps[i].clone(),
                    LocalLog {
                        subspace: i,
                        refined: false,
                        note: Some(note),
                        steps: Vec::new(),
                    },
                )
            };
            let (s, t) = (&source_members[i], &target_members[i]);
            if s.len() < 2 || t.len() < 2 {
                return kept(format!("degenerate pair ({} source, {} target words)", s.len(), t.len()));
            }
            let local_cfg = RefineConfig {
                seed: local_seed(cfg.seed, i),
                ..cfg.clone()
            };
            let run = source
                .subset(s)
                .and_then(|sub_s| target.subset(t).map(|sub_t| (sub_s, sub_t)))
                .and_then(|(sub_s, sub_t)| stochastic_refine(&pm.maps[i], &sub_s, &sub_t, &local_cfg));
            match run {
                Ok(outcome) => (
                    outcome.map,
                    LocalLog {
                        subspace: i,
                        refined: true,
                        note: None,
                        steps: outcome.log,
                    },
                ),
                Err(e) => kept(e.to_string()),
            }
        })
        .collect();
    let mut out = pm.clone();
    let mut logs = Vec::with_capacity(results.len());
    for (i, (map, log)) in results.into_iter().enumerate() {
        out.maps[i] = map;
        logs.push(log);
    }
    Ok((out, logs))
}

/// `sum ||W x - y||^2` over the dictionary pairs.
pub fn procrustes_objective(w: &Array2<f64>, dict: &SeedDictionary, source: &EmbeddingSpace, target: &EmbeddingSpace) -> f64 {
    dict.pairs
        .iter()
        .map(|&(s, t)| {
            let r = w.dot(&source.vector(s)) - target.vector(t);
            r.dot(&r)
        })
        .sum()
}
