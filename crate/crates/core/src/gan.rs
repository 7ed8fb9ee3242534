//! Adversarial training of a single linear map.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{ClweError, Result};
use crate::mapping::LinearMap;
use crate::numerics::{
    bce_with_logit, mlp_sgd_step, nearest_orthogonal, MlpDiscriminator, DEFAULT_HIDDEN, DEFAULT_INPUT_DROPOUT,
    DEFAULT_LEAKY_SLOPE,
};
use crate::retrieval::{selection_criterion, DEFAULT_CSLS_K, DEFAULT_INDUCTION_VOCAB};

/// Hyperparameters shared by the single- and multi-discriminator trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_decay: f64,
    pub beta: f64,
    pub smoothing: f64,
    pub dis_freq_vocab: usize,
    pub dis_steps_per_gen_step: usize,
    pub dis_hidden: usize,
    pub dis_input_dropout: f64,
    pub dis_leaky_slope: f64,
    pub criterion_vocab: usize,
    pub csls_k: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            epochs: 5,
            steps_per_epoch: 31_250,
            batch_size: 32,
            lr_generator: 0.1,
            lr_discriminator: 0.1,
            lr_decay: 0.98,
            beta: 0.001,
            smoothing: 0.1,
            dis_freq_vocab: 75_000,
            dis_steps_per_gen_step: 1,
            dis_hidden: DEFAULT_HIDDEN,
            dis_input_dropout: DEFAULT_INPUT_DROPOUT,
            dis_leaky_slope: DEFAULT_LEAKY_SLOPE,
            criterion_vocab: DEFAULT_INDUCTION_VOCAB,
            csls_k: DEFAULT_CSLS_K,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("dis_freq_vocab", self.dis_freq_vocab),
            ("dis_steps_per_gen_step", self.dis_steps_per_gen_step),
            ("dis_hidden", self.dis_hidden),
            ("criterion_vocab", self.criterion_vocab),
            ("csls_k", self.csls_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ClweError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_generator >= 0.0 && self.lr_discriminator >= 0.0) {
            return Err(ClweError::Config("learning rates must be non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ClweError::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if !(self.beta >= 0.0) {
            return Err(ClweError::Config("beta must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return Err(ClweError::Config(format!("smoothing {} outside [0, 0.5)", self.smoothing)));
        }
        if !(0.0..1.0).contains(&self.dis_input_dropout) {
            return Err(ClweError::Config("dis_input_dropout outside [0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn new_discriminator<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<MlpDiscriminator> {
        MlpDiscriminator::new(dim, self.dis_hidden, self.dis_input_dropout, self.dis_leaky_slope, rng)
    }
}

/// `W <- (1 + beta) W - beta (W Wᵀ) W`, pulling `W` towards the orthogonal
/// manifold.
pub fn orthogonalize(map: &LinearMap, beta: f64) -> LinearMap {
    let w = &map.w;
    let wwt_w = w.dot(&w.t()).dot(w);
    let next = w * (1.0 + beta) - wwt_w * beta;
    LinearMap {
        w: next,
        orthogonal_hint: map.orthogonal_hint,
    }
}

/// Uniform sample of `batch` row indices among the first `limit` rows.
pub(crate) fn sample_rows<R: Rng + ?Sized>(limit: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..limit)).collect()
}

/// Stack `real` over `fake` with smoothed labels `1 - s` and `s`.
pub(crate) fn discriminator_batch(
    real: ArrayView2<'_, f64>,
    fake: ArrayView2<'_, f64>,
    smoothing: f64,
) -> (Array2<f64>, Array1<f64>) {
    let x = ndarray::concatenate(ndarray::Axis(0), &[real, fake]).expect("same width");
    let mut y = Array1::from_elem(real.nrows() + fake.nrows(), smoothing);
    y.slice_mut(ndarray::s![..real.nrows()]).fill(1.0 - smoothing);
    (x, y)
}

/// One discriminator update on `-log D(v_t) - log(1 - D(W v_s))`.
///
/// Both batches are drawn uniformly from the `dis_freq_vocab` most frequent
/// words. Returns the loss before the update (the sum of the two batch-mean
/// terms).
pub fn discriminator_step<R: Rng + ?Sized>(
    dis: &mut MlpDiscriminator,
    map: &LinearMap,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &GanConfig,
    rng: &mut R,
) -> Result<f64> {
    let src_idx = sample_rows(cfg.dis_freq_vocab.min(source.len()), cfg.batch_size, rng);
    let tgt_idx = sample_rows(cfg.dis_freq_vocab.min(target.len()), cfg.batch_size, rng);
    let fake = map.apply(source.rows(&src_idx).view());
    let real = target.rows(&tgt_idx);
    discriminator_update(dis, real.view(), fake.view(), cfg.smoothing, cfg.lr_discriminator, rng)
}

pub(crate) fn discriminator_update<R: Rng + ?Sized>(
    dis: &mut MlpDiscriminator,
    real: ArrayView2<'_, f64>,
    fake: ArrayView2<'_, f64>,
    smoothing: f64,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let (x, y) = discriminator_batch(real, fake, smoothing);
    let mean = mlp_sgd_step(dis, x.view(), &y, lr, rng)?;
    // mean over 2b samples -> sum of the two per-batch means
    let loss = 2.0 * mean;
    if !loss.is_finite() {
        return Err(ClweError::Numeric("non-finite discriminator loss".into()));
    }
    Ok(loss)
}

/// Generator loss terms and the gradient of the first with respect to `W`.
pub struct GeneratorTerms {
    /// batch mean of `-log D(W v_s)`
    pub fool: f64,
    /// batch mean of `-log(1 - D(v_t))`
    pub real: f64,
    pub grad: Array2<f64>,
}

/// Evaluates the generator objective against one discriminator. `fake_mask`
/// and `real_mask` are the dropout masks applied to the discriminator input.
pub fn generator_terms(
    w: &Array2<f64>,
    dis: &MlpDiscriminator,
    src: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
    fake_mask: Option<&Array2<f64>>,
    real_mask: Option<&Array2<f64>>,
) -> Result<GeneratorTerms> {
    let fake = src.dot(&w.t());
    let ones = Array1::ones(fake.nrows());
    let (fool, g) = dis.loss_and_gradients(fake.view(), &ones, fake_mask)?;
    // x_b = W v_b, so dL/dW = sum_b g_b v_bᵀ
    let grad = g.input.t().dot(&src);
    let real_logits = dis.logits(real, real_mask)?;
    let real_term = real_logits.iter().map(|&z| bce_with_logit(z, 0.0)).sum::<f64>() / real.nrows() as f64;
    Ok(GeneratorTerms {
        fool,
        real: real_term,
        grad,
    })
}

/// One generator update on `-log D(W v_s) - log(1 - D(v_t))`, followed by
/// orthogonalization. Only the first term depends on `W`; both are reported.
pub fn generator_step<R: Rng + ?Sized>(
    map: &LinearMap,
    dis: &MlpDiscriminator,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &GanConfig,
    rng: &mut R,
) -> Result<(LinearMap, f64)> {
    let src_idx = sample_rows(cfg.dis_freq_vocab.min(source.len()), cfg.batch_size, rng);
    let tgt_idx = sample_rows(cfg.dis_freq_vocab.min(target.len()), cfg.batch_size, rng);
    let src = source.rows(&src_idx);
    let real = target.rows(&tgt_idx);
    let fake_mask = dis.dropout_mask(src.nrows(), true, rng);
    let real_mask = dis.dropout_mask(real.nrows(), true, rng);
    let terms = generator_terms(&map.w, dis, src.view(), real.view(), fake_mask.as_ref(), real_mask.as_ref())?;
    let loss = terms.fool + terms.real;
    if !loss.is_finite() || !terms.grad.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("non-finite generator gradient".into()));
    }
    let mut w = map.w.clone();
    w.scaled_add(-cfg.lr_generator, &terms.grad);
    let stepped = LinearMap {
        w,
        orthogonal_hint: map.orthogonal_hint,
    };
    let next = orthogonalize(&stepped, cfg.beta);
    if !next.w.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("generator diverged".into()));
    }
    Ok((next, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub dis_loss: f64,
    pub gen_loss: f64,
    /// Criterion of the orthogonal projection of `W`.
    pub criterion: f64,
    /// `||WWᵀ - I||_F` of the trained `W` before projection.
    pub drift: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
}

#[derive(Debug, Clone)]
pub struct SingleGanOutcome {
    pub map: LinearMap,
    pub criterion: f64,
    pub history: Vec<EpochLog>,
}

/// Snapshot taken at the end of an epoch: the nearest orthogonal matrix to
/// the trained `W`, which keeps training on the raw iterate.
pub(crate) fn epoch_snapshot(w: &Array2<f64>) -> Result<LinearMap> {
    let q = nearest_orthogonal(w.view())?;
    if !q.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("non-finite epoch snapshot".into()));
    }
    Ok(LinearMap {
        w: q,
        orthogonal_hint: true,
    })
}

pub(crate) fn finish_map(w: Array2<f64>) -> LinearMap {
    let mut map = LinearMap {
        w,
        orthogonal_hint: false,
    };
    map.orthogonal_hint = map.orthogonality_error() < 1e-3;
    map
}

/// Tracks the best snapshot and the learning-rate schedule across epochs.
pub(crate) struct Schedule {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    decay: f64,
    previous: Option<f64>,
    pub best: Option<(f64, Array2<f64>)>,
}

impl Schedule {
    pub fn new(cfg: &GanConfig) -> Self {
        Schedule {
            lr_generator: cfg.lr_generator,
            lr_discriminator: cfg.lr_discriminator,
            decay: cfg.lr_decay,
            previous: None,
            best: None,
        }
    }

    pub fn observe(&mut self, criterion: f64, w: &Array2<f64>) {
        if self.best.as_ref().is_none_or(|(b, _)| criterion > *b) {
            self.best = Some((criterion, w.clone()));
        }
        self.lr_generator *= self.decay;
        self.lr_discriminator *= self.decay;
        if self.previous.is_some_and(|p| criterion < p) {
            self.lr_generator *= 0.5;
            self.lr_discriminator *= 0.5;
        }
        self.previous = Some(criterion);
    }
}

/// Train `W` (initialized to the identity) against one discriminator,
/// keeping the epoch snapshot with the best selection criterion. Snapshots
/// are orthogonal projections of the trained `W`.
pub fn train_single_gan(source: &EmbeddingSpace, target: &EmbeddingSpace, cfg: &GanConfig) -> Result<SingleGanOutcome> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(ClweError::Shape {
            expected: format!("dimension {}", source.dim()),
            actual: format!("dimension {}", target.dim()),
        });
    }
    let d = source.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dis = cfg.new_discriminator(d, &mut rng)?;
    let mut map = LinearMap::identity(d);
    let criterion = |m: &LinearMap| selection_criterion(m, source, target, cfg.criterion_vocab, cfg.csls_k);

    let mut schedule = Schedule::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        schedule.best = Some((criterion(&map)?, map.w.clone()));
    }
    let mut current = cfg.clone();
    for epoch in 0..cfg.epochs {
        current.lr_generator = schedule.lr_generator;
        current.lr_discriminator = schedule.lr_discriminator;
        let (mut dis_sum, mut gen_sum) = (0.0, 0.0);
        for _ in 0..cfg.steps_per_epoch {
            for _ in 0..cfg.dis_steps_per_gen_step {
                dis_sum += discriminator_step(&mut dis, &map, source, target, &current, &mut rng)?;
            }
            let (next, loss) = generator_step(&map, &dis, source, target, &current, &mut rng)?;
            map = next;
            gen_sum += loss;
        }
        let snapshot = epoch_snapshot(&map.w)?;
        let crit = criterion(&snapshot)?;
        let steps = cfg.steps_per_epoch as f64;
        history.push(EpochLog {
            epoch,
            dis_loss: dis_sum / (steps * cfg.dis_steps_per_gen_step as f64),
            gen_loss: gen_sum / steps,
            criterion: crit,
            drift: map.orthogonality_error(),
            lr_generator: current.lr_generator,
            lr_discriminator: current.lr_discriminator,
        });
        log::debug!("single gan epoch {epoch}: criterion {crit:.5}");
        schedule.observe(crit, &snapshot.w);
    }
    let (best, w) = schedule
        .best
        .ok_or_else(|| ClweError::Config("selection criterion was never computed".into()))?;
    Ok(SingleGanOutcome {
        map: finish_map(w),
        criterion: best,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub map: LinearMap,
    pub criterion: f64,
    pub chosen: usize,
    /// Criterion per restart; `None` where the run failed numerically.
    pub criteria: Vec<Option<f64>>,
}

/// Run `restarts` independent trainings with seeds `seed, seed+1, ...` and
/// keep the one with the highest selection criterion (lowest index on ties).
pub fn random_restart_train(
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    cfg: &GanConfig,
    restarts: usize,
) -> Result<RestartOutcome> {
    if restarts == 0 {
        return Err(ClweError::Config("restarts must be at least 1".into()));
    }
    cfg.validate()?;
    let runs: Vec<Result<SingleGanOutcome>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(r as u64);
            train_single_gan(source, target, &c)
        })
        .collect();
    let mut best: Option<(usize, SingleGanOutcome)> = None;
    let mut criteria = Vec::with_capacity(restarts);
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(out) => {
                criteria.push(Some(out.criterion));
                if best.as_ref().is_none_or(|(_, b)| out.criterion > b.criterion) {
                    best = Some((r, out));
                }
            }
            Err(ClweError::Numeric(msg)) => {
                log::warn!("restart {r} failed: {msg}");
                criteria.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let (chosen, out) = best.ok_or(ClweError::TrainingFailed { restarts })?;
    Ok(RestartOutcome {
        map: out.map,
        criterion: out.criterion,
        chosen,
        criteria,
    })
}
