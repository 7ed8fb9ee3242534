//! Shared numeric primitives: decompositions, row utilities and the
//! two-layer perceptron used as a discriminator.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{ClweError, Result};

/// Floor applied to covariance eigenvalues so their logarithms stay finite.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Format `x` with `sig` significant digits, in the style of C's `%g`.
pub fn format_float(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sig = sig.max(1);
    let exp = x.abs().log10().floor() as i32;
    // rounding may push the exponent up, e.g. 9.9999999996 -> 10.0000000
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    let exp = exp.max(e);
    if exp < -5 || exp >= sig as i32 {
        return format!("{}e{}", trim_zeros(mantissa), e);
    }
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Derive an independent seed from `seed` and `salt` (splitmix64 mixing).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn to_nalgebra(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn check_finite(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ClweError::Numeric(format!("non-finite entry in {what}")))
    }
}

/// Full singular value decomposition `m = U diag(S) Vt`.
///
/// `U` is `a x a`, `Vt` is `b x b`, `S` has `min(a, b)` entries sorted in
/// descending order.
pub fn svd(m: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    check_finite(m, "svd input")?;
    let (a, b) = m.dim();
    if a == 0 || b == 0 {
        return Err(ClweError::Shape {
            expected: "non-empty matrix".into(),
            actual: format!("{a}x{b}"),
        });
    }
    let dec = to_nalgebra(m).svd(true, true);
    let u = dec.u.as_ref().expect("requested U");
    let vt = dec.v_t.as_ref().expect("requested Vt");
    let r = dec.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| {
        dec.singular_values[j]
            .partial_cmp(&dec.singular_values[i])
            .expect("finite singular values")
    });
    let s = Array1::from_iter(order.iter().map(|&k| dec.singular_values[k].max(0.0)));
    let u_thin = Array2::from_shape_fn((a, r), |(i, j)| u[(i, order[j])]);
    let v_thin = Array2::from_shape_fn((b, r), |(i, j)| vt[(order[j], i)]);
    if !s.iter().all(|x| x.is_finite()) {
        return Err(ClweError::Numeric("svd did not converge".into()));
    }
    let u_full = complete_basis(u_thin);
    let vt_full = complete_basis(v_thin).reversed_axes();
    Ok((u_full, s, vt_full))
}

/// Extend orthonormal columns to a square orthogonal matrix.
fn complete_basis(cols: Array2<f64>) -> Array2<f64> {
    let (n, r) = cols.dim();
    if r == n {
        return cols;
    }
    let mut basis: Vec<Array1<f64>> = cols.columns().into_iter().map(|c| c.to_owned()).collect();
    let mut e = 0;
    while basis.len() < n && e < n {
        let mut v = Array1::zeros(n);
        v[e] = 1.0;
        e += 1;
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let p = b.dot(&v);
                v.scaled_add(-p, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut out = Array2::zeros((n, n));
    for (j, b) in basis.iter().enumerate() {
        out.column_mut(j).assign(b);
    }
    out
}

/// Covariance matrix of mean-centered rows, scaled by `1/(n-1)`.
pub fn covariance(vectors: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(ClweError::TooFewSamples { needed: 2, got: n });
    }
    let mean = vectors.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &vectors - &mean;
    Ok(centered.t().dot(&centered) / (n as f64 - 1.0))
}

/// Eigenvalues of the sample covariance, descending, floored at
/// [`EIGEN_FLOOR`].
pub fn covariance_eigenvalues(vectors: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let cov = covariance(vectors)?;
    check_finite(cov.view(), "covariance")?;
    let eig = to_nalgebra(cov.view()).symmetric_eigen();
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(EIGEN_FLOOR)).collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(Array1::from(values))
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// `||m mᵀ - I||_F` for a square matrix.
pub fn orthogonality_error(m: ArrayView2<'_, f64>) -> f64 {
    let g = m.dot(&m.t());
    let mut acc = 0.0;
    for ((i, j), &x) in g.indexed_iter() {
        let e = if i == j { x - 1.0 } else { x };
        acc += e * e;
    }
    acc.sqrt()
}

/// Closest orthogonal matrix in Frobenius norm: `U Vᵀ` from the SVD of `m`.
/// This is also the limit of repeated orthogonalization updates.
pub fn nearest_orthogonal(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (u, _, vt) = svd(m)?;
    Ok(u.dot(&vt))
}

pub fn frobenius_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit `z` against target `y`, computed without
/// forming the probability.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub const DEFAULT_HIDDEN: usize = 2048;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_INPUT_DROPOUT: f64 = 0.1;

/// Two-layer perceptron `sigmoid(w2 · leaky(w1 · x + b1) + b2)` with dropout
/// on the input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDiscriminator {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub input_dropout: f64,
    pub leaky_slope: f64,
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub input: Array2<f64>,
}

impl MlpGradients {
    fn is_finite(&self) -> bool {
        self.b2.is_finite()
            && self.w1.iter().all(|x| x.is_finite())
            && self.b1.iter().all(|x| x.is_finite())
            && self.w2.iter().all(|x| x.is_finite())
            && self.input.iter().all(|x| x.is_finite())
    }
}

struct ForwardCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    logits: Array1<f64>,
}

impl MlpDiscriminator {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        input_dropout: f64,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(ClweError::Config("discriminator sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&input_dropout) {
            return Err(ClweError::Config(format!(
                "input dropout {input_dropout} outside [0, 1)"
            )));
        }
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((hidden, dim), || rng.random_range(-a1..a1));
        let b1 = Array1::from_shape_simple_fn(hidden, || rng.random_range(-a1..a1));
        let w2 = Array1::from_shape_simple_fn(hidden, || rng.random_range(-a2..a2));
        let b2 = rng.random_range(-a2..a2);
        Ok(MlpDiscriminator {
            w1,
            b1,
            w2,
            b2,
            input_dropout,
            leaky_slope,
        })
    }

    /// All parameters zero: the network outputs 0.5 for every input.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpDiscriminator {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: 0.0,
            input_dropout: 0.0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    fn check_width(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(ClweError::Shape {
                expected: format!("batch width {}", self.input_dim()),
                actual: format!("batch width {}", batch.ncols()),
            });
        }
        Ok(())
    }

    /// Inverted-dropout mask for the input layer, or `None` when dropout is
    /// inactive.
    pub fn dropout_mask<R: Rng + ?Sized>(
        &self,
        rows: usize,
        train_mode: bool,
        rng: &mut R,
    ) -> Option<Array2<f64>> {
        if !train_mode || self.input_dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.input_dropout;
        let scale = 1.0 / keep;
        let p = self.input_dropout;
        Some(Array2::from_shape_simple_fn((rows, self.input_dim()), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                scale
            }
        }))
    }

    fn forward_cache(&self, batch: ArrayView2<'_, f64>, mask: Option<&Array2<f64>>) -> ForwardCache {
        let input = match mask {
            Some(m) => &batch * m,
            None => batch.to_owned(),
        };
        let pre = input.dot(&self.w1.t()) + &self.b1;
        let slope = self.leaky_slope;
        let hidden = pre.mapv(|x| if x > 0.0 { x } else { slope * x });
        let logits = hidden.dot(&self.w2) + self.b2;
        ForwardCache {
            input,
            pre,
            hidden,
            logits,
        }
    }

    /// Pre-sigmoid outputs under an explicit dropout mask.
    pub fn logits(&self, batch: ArrayView2<'_, f64>, mask: Option<&Array2<f64>>) -> Result<Array1<f64>> {
        self.check_width(batch)?;
        Ok(self.forward_cache(batch, mask).logits)
    }

    /// Mean binary cross-entropy and its gradients under an explicit dropout
    /// mask. `targets` are probabilities in `[0, 1]`.
    pub fn loss_and_gradients(
        &self,
        batch: ArrayView2<'_, f64>,
        targets: &Array1<f64>,
        mask: Option<&Array2<f64>>,
    ) -> Result<(f64, MlpGradients)> {
        self.check_width(batch)?;
        let b = batch.nrows();
        if targets.len() != b {
            return Err(ClweError::Shape {
                expected: format!("{b} targets"),
                actual: format!("{} targets", targets.len()),
            });
        }
        if b == 0 {
            return Err(ClweError::Shape {
                expected: "non-empty batch".into(),
                actual: "0 rows".into(),
            });
        }
        let cache = self.forward_cache(batch, mask);
        let inv_b = 1.0 / b as f64;
        let loss = cache
            .logits
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum::<f64>()
            * inv_b;

        let delta: Array1<f64> = cache
            .logits
            .iter()
            .zip(targets)
            .map(|(&z, &y)| (sigmoid(z) - y) * inv_b)
            .collect();
        let w2 = cache.hidden.t().dot(&delta);
        let b2 = delta.sum();
        let slope = self.leaky_slope;
        let mut dpre = Array2::zeros(cache.pre.raw_dim());
        Zip::from(&mut dpre)
            .and(&cache.pre)
            .and(delta.view().insert_axis(Axis(1)).broadcast(cache.pre.raw_dim()).unwrap())
            .and(self.w2.view().insert_axis(Axis(0)).broadcast(cache.pre.raw_dim()).unwrap())
            .for_each(|g, &p, &d, &w| *g = d * w * if p > 0.0 { 1.0 } else { slope });
        let w1 = dpre.t().dot(&cache.input);
        let b1 = dpre.sum_axis(Axis(0));
        let mut input = dpre.dot(&self.w1);
        if let Some(m) = mask {
            input *= m;
        }
        Ok((
            loss,
            MlpGradients {
                w1,
                b1,
                w2,
                b2,
                input,
            },
        ))
    }

    pub(crate) fn apply_gradients(&mut self, grads: &MlpGradients, lr: f64) {
        self.w1.scaled_add(-lr, &grads.w1);
        self.b1.scaled_add(-lr, &grads.b1);
        self.w2.scaled_add(-lr, &grads.w2);
        self.b2 -= lr * grads.b2;
    }
}

/// Probabilities for each row of `batch`; dropout is applied only in
/// training mode.
pub fn mlp_forward<R: Rng + ?Sized>(
    net: &MlpDiscriminator,
    batch: ArrayView2<'_, f64>,
    train_mode: bool,
    rng: &mut R,
) -> Result<Array1<f64>> {
    net.check_width(batch)?;
    let mask = net.dropout_mask(batch.nrows(), train_mode, rng);
    Ok(net.forward_cache(batch, mask.as_ref()).logits.mapv(sigmoid))
}

/// One SGD step on mean binary cross-entropy. Returns the loss before the
/// update.
pub fn mlp_sgd_step<R: Rng + ?Sized>(
    net: &mut MlpDiscriminator,
    batch: ArrayView2<'_, f64>,
    targets: &Array1<f64>,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(ClweError::Config(format!("invalid learning rate {lr}")));
    }
    net.check_width(batch)?;
    let mask = net.dropout_mask(batch.nrows(), true, rng);
    let (loss, grads) = net.loss_and_gradients(batch, targets, mask.as_ref())?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(ClweError::Numeric(
            "non-finite discriminator gradient (learning rate too large?)".into(),
        ));
    }
    net.apply_gradients(&grads, lr);
    Ok(loss)
}
