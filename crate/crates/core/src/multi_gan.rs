//! Multi-discriminator adversarial training: one generator per subspace,
//! each trained against a whole-language discriminator and a subspace
//! discriminator, mixed by a per-subspace global-confidence weight derived
//! from eigenvalue divergence.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::SubspacePairing;
use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::gan::{discriminator_update, epoch_snapshot, finish_map, generator_terms, orthogonalize, sample_rows, EpochLog, GanConfig, Schedule};
use crate::mapping::{AssignedMaps, LinearMap, Mapping};
use crate::numerics::{covariance_eigenvalues, mix_seed, normalize_rows, MlpDiscriminator};
use crate::retrieval::criterion_over;

/// Global confidence used when the whole spaces have (numerically) equal
/// spectra and the ratio is undefined.
pub const FALLBACK_LAMBDA: f64 = 0.5;

/// Sum of squared differences of log covariance eigenvalues.
pub fn evd(v1: ArrayView2<'_, f64>, v2: ArrayView2<'_, f64>) -> Result<f64> {
    let e1 = covariance_eigenvalues(v1)?;
    let e2 = covariance_eigenvalues(v2)?;
    Ok(spectral_divergence(&e1, &e2))
}

fn spectral_divergence(e1: &Array1<f64>, e2: &Array1<f64>) -> f64 {
    e1.iter()
        .zip(e2.iter())
        .map(|(a, b)| {
            let d = a.ln() - b.ln();
            d * d
        })
        .sum()
}

/// Subspace divergence over whole-space divergence, clamped to `[0, 1]`.
pub fn lambda_from_divergences(subspace: f64, whole: f64) -> f64 {
    if !(whole >= 1e-9) || !subspace.is_finite() {
        return FALLBACK_LAMBDA;
    }
    (subspace / whole).clamp(0.0, 1.0)
}

/// Global confidence for one subspace pair.
pub fn dynamic_lambda(
    sub_s: ArrayView2<'_, f64>,
    sub_t: ArrayView2<'_, f64>,
    whole_s: ArrayView2<'_, f64>,
    whole_t: ArrayView2<'_, f64>,
) -> f64 {
    let whole = evd(whole_s, whole_t).unwrap_or(0.0);
    match evd(sub_s, sub_t) {
        Ok(sub) => lambda_from_divergences(sub, whole),
        Err(_) => FALLBACK_LAMBDA,
    }
}

/// One training batch for subspace `i`: whole-language samples `v'` and
/// subspace samples `v^i`.
#[derive(Debug, Clone)]
pub struct SubspaceBatches {
    pub whole_source: Array2<f64>,
    pub whole_target: Array2<f64>,
    pub sub_source: Array2<f64>,
    pub sub_target: Array2<f64>,
}

impl SubspaceBatches {
    /// Samples with replacement: `v'` from the `dis_freq_vocab` most frequent
    /// words, `v^i` from the members of the subspace pair.
    pub fn sample<R: Rng + ?Sized>(
        source: &EmbeddingSpace,
        target: &EmbeddingSpace,
        source_members: &[usize],
        target_members: &[usize],
        cfg: &GanConfig,
        rng: &mut R,
    ) -> Self {
        let b = cfg.batch_size;
        let ws = sample_rows(cfg.dis_freq_vocab.min(source.len()), b, rng);
        let wt = sample_rows(cfg.dis_freq_vocab.min(target.len()), b, rng);
        let ss: Vec<usize> = sample_rows(source_members.len(), b, rng)
            .into_iter()
            .map(|i| source_members[i])
            .collect();
        let st: Vec<usize> = sample_rows(target_members.len(), b, rng)
            .into_iter()
            .map(|i| target_members[i])
            .collect();
        SubspaceBatches {
            whole_source: source.rows(&ws),
            whole_target: target.rows(&wt),
            sub_source: source.rows(&ss),
            sub_target: target.rows(&st),
        }
    }
}

/// One SGD step for each discriminator of subspace `i`: the language
/// discriminator on `(v'_t, G^i v'_s)` and the subspace discriminator on
/// `(v^i_t, G^i v^i_s)`. Returns both pre-update losses.
pub fn subspace_dis_steps<R: Rng + ?Sized>(
    language: &mut MlpDiscriminator,
    subspace: &mut MlpDiscriminator,
    generator: &LinearMap,
    batches: &SubspaceBatches,
    cfg: &GanConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let fake_l = generator.apply(batches.whole_source.view());
    let loss_l = discriminator_update(language, batches.whole_target.view(), fake_l.view(), cfg.smoothing, cfg.lr_discriminator, rng)?;
    let fake_s = generator.apply(batches.sub_source.view());
    let loss_s = discriminator_update(subspace, batches.sub_target.view(), fake_s.view(), cfg.smoothing, cfg.lr_discriminator, rng)?;
    Ok((loss_l, loss_s))
}

/// Value and `W` gradient of the subspace generator loss
/// `λ (fool_l + real_l) + (1 - λ) (fool_s + real_s)` under explicit dropout
/// masks (`None` disables dropout).
pub struct MixedTerms {
    pub loss: f64,
    pub grad: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn mixed_generator_terms(
    w: &Array2<f64>,
    language: &MlpDiscriminator,
    subspace: &MlpDiscriminator,
    lambda: f64,
    batches: &SubspaceBatches,
    masks: [Option<&Array2<f64>>; 4],
) -> Result<MixedTerms> {
    let l = generator_terms(w, language, batches.sub_source.view(), batches.whole_target.view(), masks[0], masks[1])?;
    let s = generator_terms(w, subspace, batches.sub_source.view(), batches.sub_target.view(), masks[2], masks[3])?;
    let loss = lambda * (l.fool + l.real) + (1.0 - lambda) * (s.fool + s.real);
    let grad = l.grad * lambda + s.grad * (1.0 - lambda);
    Ok(MixedTerms { loss, grad })
}

/// One SGD step of the subspace generator followed by orthogonalization.
pub fn subspace_gen_step<R: Rng + ?Sized>(
    generator: &LinearMap,
    language: &MlpDiscriminator,
    subspace: &MlpDiscriminator,
    lambda: f64,
    batches: &SubspaceBatches,
    cfg: &GanConfig,
    rng: &mut R,
) -> Result<(LinearMap, f64)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ClweError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let b = batches.sub_source.nrows();
    let m0 = language.dropout_mask(b, true, rng);
    let m1 = language.dropout_mask(batches.whole_target.nrows(), true, rng);
    let m2 = subspace.dropout_mask(b, true, rng);
    let m3 = subspace.dropout_mask(batches.sub_target.nrows(), true, rng);
    let terms = mixed_generator_terms(
        &generator.w,
        language,
        subspace,
        lambda,
        batches,
        [m0.as_ref(), m1.as_ref(), m2.as_ref(), m3.as_ref()],
    )?;
    if !terms.loss.is_finite() || !terms.grad.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("non-finite subspace generator gradient".into()));
    }
    let mut w = generator.w.clone();
    w.scaled_add(-cfg.lr_generator, &terms.grad);
    let next = orthogonalize(
        &LinearMap {
            w,
            orthogonal_hint: generator.orthogonal_hint,
        },
        cfg.beta,
    );
    if !next.w.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("subspace generator diverged".into()));
    }
    Ok((next, terms.loss))
}

/// Source partition plus one linear map per subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseMap {
    pub pairing: SubspacePairing,
    pub maps: Vec<LinearMap>,
    pub lambdas: Vec<f64>,
    /// Subspace-restricted selection criterion of each map.
    pub criteria: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PiecewiseManifest {
    subspaces: usize,
    lambdas: Vec<f64>,
    criteria: Vec<f64>,
    orthogonal_hints: Vec<bool>,
    pair_sizes: Vec<(usize, usize)>,
}

impl PiecewiseMap {
    /// Every subspace mapped by the same matrix.
    pub fn uniform(pairing: SubspacePairing, map: &LinearMap) -> Self {
        let n = pairing.subspaces();
        PiecewiseMap {
            pairing,
            maps: vec![map.clone(); n],
            lambdas: vec![FALLBACK_LAMBDA; n],
            criteria: vec![f64::NAN; n],
        }
    }

    pub fn forward(&self) -> AssignedMaps {
        AssignedMaps {
            assignments: self.pairing.source_partition.assignments.clone(),
            maps: self.maps.iter().map(|m| m.w.clone()).collect(),
        }
    }

    /// Target-to-source map: per-subspace transposes keyed by the target
    /// word's subspace.
    pub fn backward(&self) -> AssignedMaps {
        AssignedMaps {
            assignments: self.pairing.target_assignments.clone(),
            maps: self.maps.iter().map(|m| m.w.t().to_owned()).collect(),
        }
    }

    /// Every source word mapped by its subspace's matrix.
    pub fn transform_source(&self, source: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        let words: Vec<usize> = (0..source.len()).collect();
        let mapped = self.forward().map_rows(source.vectors(), &words);
        EmbeddingSpace::new(source.words().to_vec(), mapped)
    }

    /// Writes `piecewise.json`, `map_<i>.txt` per subspace and the two
    /// pairing files into `dir`.
    pub fn save(&self, dir: &Path, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ClweError::io(dir, e))?;
        let manifest = PiecewiseManifest {
            subspaces: self.maps.len(),
            lambdas: self.lambdas.clone(),
            criteria: self.criteria.clone(),
            orthogonal_hints: self.maps.iter().map(|m| m.orthogonal_hint).collect(),
            pair_sizes: self.pairing.pair_sizes.clone(),
        };
        let p = dir.join("piecewise.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| ClweError::io(&p, e))?;
        for (i, m) in self.maps.iter().enumerate() {
            m.save(dir.join(format!("map_{i}.txt")))?;
        }
        self.pairing.save(
            &dir.join("source_subspaces.tsv"),
            &dir.join("target_subspaces.tsv"),
            source,
            target,
        )
    }

    pub fn load(dir: &Path, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<Self> {
        let p = dir.join("piecewise.json");
        let text = fs::read_to_string(&p).map_err(|e| ClweError::io(&p, e))?;
        let manifest: PiecewiseManifest = serde_json::from_str(&text)?;
        let pairing = SubspacePairing::load(
            &dir.join("source_subspaces.tsv"),
            &dir.join("target_subspaces.tsv"),
            source,
            target,
        )?;
        if pairing.subspaces() != manifest.subspaces {
            return Err(ClweError::parse(&p, 0, "subspace count disagrees with pairing files"));
        }
        let maps = (0..manifest.subspaces)
            .map(|i| LinearMap::load(dir.join(format!("map_{i}.txt")), manifest.orthogonal_hints[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PiecewiseMap {
            pairing,
            maps,
            lambdas: manifest.lambdas,
            criteria: manifest.criteria,
        })
    }
}

impl Mapping for PiecewiseMap {
    fn map_rows(&self, vectors: ArrayView2<'_, f64>, words: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros(vectors.raw_dim());
        for ((mut dst, src), &w) in out.rows_mut().into_iter().zip(vectors.rows()).zip(words) {
            let m = &self.maps[self.pairing.source_partition.assignments[w]];
            dst.assign(&m.w.dot(&src));
        }
        out
    }
}

/// Training summary for one subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceLog {
    pub subspace: usize,
    pub lambda: f64,
    pub initial_criterion: f64,
    pub best_criterion: f64,
    pub fell_back: bool,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct MultiGanOutcome {
    pub map: PiecewiseMap,
    pub logs: Vec<SubspaceLog>,
}

/// Seed of subspace `id`'s generator, discriminators and sampling.
pub fn subspace_seed(seed: u64, id: usize) -> u64 {
    mix_seed(seed, 0x5ab5_0000 + id as u64)
}

struct SubspaceContext<'a> {
    source: &'a EmbeddingSpace,
    target: &'a EmbeddingSpace,
    target_unit: &'a Array2<f64>,
    whole_divergence: f64,
    cfg: &'a GanConfig,
}

fn train_subspace(
    ctx: &SubspaceContext<'_>,
    id: usize,
    init: &LinearMap,
    source_members: &[usize],
    target_members: &[usize],
) -> Result<(LinearMap, f64, SubspaceLog)> {
    let cfg = ctx.cfg;
    let sub_s = ctx.source.rows(source_members);
    let sub_t = ctx.target.rows(target_members);
    let lambda = match evd(sub_s.view(), sub_t.view()) {
        Ok(sub) => lambda_from_divergences(sub, ctx.whole_divergence),
        Err(_) => FALLBACK_LAMBDA,
    };
    let crit_words: Vec<usize> = source_members.iter().copied().take(cfg.criterion_vocab).collect();
    let criterion = |m: &LinearMap| criterion_over(m, ctx.source, &crit_words, ctx.target_unit.view(), cfg.csls_k);
    let initial = criterion(init)?;

    let mut rng = ChaCha8Rng::seed_from_u64(subspace_seed(cfg.seed, id));
    let d = ctx.source.dim();
    let mut language = cfg.new_discriminator(d, &mut rng)?;
    let mut subspace = cfg.new_discriminator(d, &mut rng)?;
    let mut generator = init.clone();
    let mut schedule = Schedule::new(cfg);
    schedule.best = Some((initial, init.w.clone()));
    let mut current = cfg.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        current.lr_generator = schedule.lr_generator;
        current.lr_discriminator = schedule.lr_discriminator;
        let (mut dis_sum, mut gen_sum) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            for _ in 0..cfg.dis_steps_per_gen_step {
                let batches = SubspaceBatches::sample(ctx.source, ctx.target, source_members, target_members, &current, &mut rng);
                let (a, b) = subspace_dis_steps(&mut language, &mut subspace, &generator, &batches, &current, &mut rng)?;
                dis_sum += lambda * a + (1.0 - lambda) * b;
            }
            let batches = SubspaceBatches::sample(ctx.source, ctx.target, source_members, target_members, &current, &mut rng);
            let (next, loss) = subspace_gen_step(&generator, &language, &subspace, lambda, &batches, &current, &mut rng)?;
            generator = next;
            gen_sum += loss;
        }
        let snapshot = epoch_snapshot(&generator.w)?;
        let crit = criterion(&snapshot)?;
        let steps = cfg.steps_per_epoch as f64;
        history.push(EpochLog {
            epoch,
            dis_loss: dis_sum / (steps * cfg.dis_steps_per_gen_step as f64),
            gen_loss: gen_sum / steps,
            criterion: crit,
            drift: generator.orthogonality_error(),
            lr_generator: current.lr_generator,
            lr_discriminator: current.lr_discriminator,
        });
        schedule.observe(crit, &snapshot.w);
    }
    let (best, w) = schedule.best.expect("initial snapshot");
    let map = if w == init.w { init.clone() } else { finish_map(w) };
    Ok((
        map,
        lambda,
        SubspaceLog {
            subspace: id,
            lambda,
            initial_criterion: initial,
            best_criterion: best,
            fell_back: false,
            history,
        },
    ))
}

/// Train one generator per subspace, each initialized with `single_map`.
///
/// Each subspace keeps the epoch snapshot (the initial map included) with
/// the best criterion over its own source words. A subspace whose training
/// fails numerically keeps `single_map`.
pub fn train_multi_gan(
    single_map: &LinearMap,
    pairing: &SubspacePairing,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &GanConfig,
) -> Result<MultiGanOutcome> {
    cfg.validate()?;
    let whole_divergence = evd(source.vectors(), target.vectors())?;
    let target_unit = normalize_rows(target.vectors());
    let ctx = SubspaceContext {
        source,
        target,
        target_unit: &target_unit,
        whole_divergence,
        cfg,
    };
    let source_members = pairing.source_members();
    let target_members = pairing.target_members();
    if let Some(empty) = (0..pairing.subspaces()).find(|&i| source_members[i].is_empty() || target_members[i].is_empty()) {
        return Err(ClweError::EmptyTargetSubspace(vec![empty]));
    }
    let results: Vec<Result<(LinearMap, f64, SubspaceLog)>> = (0..pairing.subspaces())
        .into_par_iter()
        .map(|i| train_subspace(&ctx, i, single_map, &source_members[i], &target_members[i]))
        .collect();

    let mut maps = Vec::with_capacity(results.len());
    let mut lambdas = Vec::with_capacity(results.len());
    let mut criteria = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((map, lambda, log)) => {
                maps.push(map);
                lambdas.push(lambda);
                criteria.push(log.best_criterion);
                logs.push(log);
            }
            Err(ClweError::Numeric(msg)) => {
                log::warn!("subspace {i} training failed ({msg}); keeping the single map");
                let words: Vec<usize> = source_members[i].iter().copied().take(cfg.criterion_vocab).collect();
                let crit = criterion_over(single_map, source, &words, target_unit.view(), cfg.csls_k)?;
                maps.push(single_map.clone());
                lambdas.push(FALLBACK_LAMBDA);
                criteria.push(crit);
                logs.push(SubspaceLog {
                    subspace: i,
                    lambda: FALLBACK_LAMBDA,
                    initial_criterion: crit,
                    best_criterion: crit,
                    fell_back: true,
                    history: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MultiGanOutcome {
        map: PiecewiseMap {
            pairing: pairing.clone(),
            maps,
            lambdas,
            criteria,
        },
        logs,
    })
}
