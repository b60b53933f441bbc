//! NUCLR: stochastic alternating updates of a similarity model `w` and the
//! popularity log-weights `ζ`, with moving-average denominators.
//!
//! Per step, on a minibatch `B` of size `B ≥ 2` drawn from an epoch permutation:
//!
//! 1. `φ̂_i = (n−1)/(B−1) Σ_{j∈B, j≠i} exp((E_ij − E_ii − ζ_j)/τ)` for `i ∈ B`;
//! 2. `u_i ← (1−γ) u_i + γ φ̂_i` (the first touch takes `φ̂_i` as is);
//! 3. `ζ_j ← ζ_j − η_ζ G(ζ_j)` for `j ∈ B`, unless `ζ` is frozen;
//! 4. `w ← w − η_w G(w)` using the pre-update `ζ` and `ξ`;
//! 5. `ξ ← max(ξ, ‖ζ‖_∞)`.
//!
//! With `ζ ≡ 0` and `ξ ≡ 0` the procedure is SogCLR.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SimilarityMatrix;
use crate::model::{Embedding, LinearCosine, Similarity, SimilarityModel};
use crate::popularity::phi_objective;
use crate::scalar::{mean, Scalar};
use crate::world::PairedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `η(t) = ½ η₀ (1 + cos(π t / T))` over the whole run.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine if total_steps == 0 => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Anchors contrast against targets only.
    Unidirectional,
    /// Both directions, each with its own `ζ`, `u` and `ξ`; losses are summed.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOptimizer {
    /// Heavy-ball momentum `v ← μv + g, w ← w − ηv`.
    Momentum,
    /// Adam with bias correction.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuclrConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lr_w: f64,
    pub lr_zeta: f64,
    pub momentum_w: f64,
    pub momentum_zeta: f64,
    pub zeta0: f64,
    /// `ζ` and `ξ` stay fixed during the first this-many epochs.
    pub freeze_epochs: usize,
    pub schedule: Schedule,
    pub mode: Mode,
    pub optimizer: WeightOptimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fix `ζ ≡ 0` and `ξ ≡ 0` throughout.
    pub sogclr: bool,
    /// Replace the positive pair's `exp(−ζ_i/τ)` by `exp(−ξ/τ)` in the
    /// model gradient.
    pub xi_trick: bool,
    /// Record full-batch `Φ`/`Ψ` each epoch (quadratic in `n`).
    pub full_metrics: bool,
}

impl Default for NuclrConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            batch_size: 64,
            epochs: 30,
            gamma: 0.8,
            lr_w: 0.5,
            lr_zeta: 1.0,
            momentum_w: 0.9,
            momentum_zeta: 0.9,
            zeta0: 0.0,
            freeze_epochs: 5,
            schedule: Schedule::Cosine,
            mode: Mode::Unidirectional,
            optimizer: WeightOptimizer::Momentum,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sogclr: false,
            xi_trick: true,
            full_metrics: true,
        }
    }
}

impl NuclrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        for (name, v) in [("lr_w", self.lr_w), ("lr_zeta", self.lr_zeta), ("adam_eps", self.adam_eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [
            ("momentum_w", self.momentum_w),
            ("momentum_zeta", self.momentum_zeta),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        if !self.zeta0.is_finite() {
            return bad("zeta0 must be finite");
        }
        Ok(())
    }

    fn tracks(&self) -> usize {
        match self.mode {
            Mode::Unidirectional => 1,
            Mode::Symmetric => 2,
        }
    }
}

/// Per-direction bookkeeping: `ζ`, moving averages `u`, and the running max `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track<T> {
    pub zeta: Vec<T>,
    pub u: Vec<T>,
    pub touched: Vec<bool>,
    pub xi: T,
    zeta_velocity: Vec<T>,
}

impl<T: Scalar> Track<T> {
    /// `ζ = ζ₀·1`, `u = 0`, `ξ = |ζ₀|` so that `ξ ≥ ‖ζ‖_∞` from the start.
    pub fn new(n: usize, zeta0: T) -> Self {
        Self {
            zeta: vec![zeta0; n],
            u: vec![T::zero(); n],
            touched: vec![false; n],
            xi: zeta0.abs(),
            zeta_velocity: vec![T::zero(); n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuclrState<T> {
    /// One track, or two in symmetric mode (the second has the roles of
    /// anchors and targets swapped).
    pub tracks: Vec<Track<T>>,
    pub step: usize,
    pub total_steps: usize,
    w_velocity: Vec<T>,
    adam_m: Vec<T>,
    adam_v: Vec<T>,
}

impl<T: Scalar> NuclrState<T> {
    pub fn new(n: usize, num_params: usize, config: &NuclrConfig) -> Self {
        let zeta0 = if config.sogclr { T::zero() } else { T::lit(config.zeta0) };
        Self {
            tracks: (0..config.tracks()).map(|_| Track::new(n, zeta0)).collect(),
            step: 0,
            total_steps: config.epochs * (n / config.batch_size.max(1)),
            w_velocity: vec![T::zero(); num_params],
            adam_m: vec![T::zero(); num_params],
            adam_v: vec![T::zero(); num_params],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Reverse,
}

/// Similarities of every (anchor, target) pair within a minibatch;
/// `sims[p·B + q] = E(x_{b_p}, y_{b_q})`.
#[derive(Debug, Clone)]
pub struct BatchBlock<'a, T> {
    pub indices: &'a [usize],
    pub sims: Vec<T>,
    embeddings: Option<(Vec<Embedding<T>>, Vec<Embedding<T>>)>,
}

impl<'a, T: Scalar> BatchBlock<'a, T> {
    pub fn new(model: &SimilarityModel<T>, sample: &PairedSample<T>, indices: &'a [usize]) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::BatchTooSmall(indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sample.len()) {
            return Err(Error::DimensionMismatch { expected: sample.len(), got: bad });
        }
        let b = indices.len();
        match model {
            SimilarityModel::LinearCosine(m) => {
                let ea = indices.iter().map(|&i| m.embed_anchor(&sample.anchors[i])).collect::<Result<Vec<_>>>()?;
                let eb = indices.iter().map(|&i| m.embed_target(&sample.targets[i])).collect::<Result<Vec<_>>>()?;
                let mut sims = Vec::with_capacity(b * b);
                for a in &ea {
                    sims.extend(eb.iter().map(|t| LinearCosine::score(a, t)));
                }
                Ok(Self { indices, sims, embeddings: Some((ea, eb)) })
            }
            SimilarityModel::GroundTruthBilinear => {
                let mut sims = Vec::with_capacity(b * b);
                for &i in indices {
                    for &j in indices {
                        sims.push(model.similarity(&sample.anchors[i], &sample.targets[j])?);
                    }
                }
                Ok(Self { indices, sims, embeddings: None })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn at(&self, dir: Direction, p: usize, q: usize) -> T {
        let b = self.len();
        match dir {
            Direction::Forward => self.sims[p * b + q],
            Direction::Reverse => self.sims[q * b + p],
        }
    }
}

/// `exp((S_pq − S_pp − ζ_{b_q})/τ)` for one direction, diagonal set to zero.
struct Exponents<T> {
    b: usize,
    e: Vec<T>,
    row_sums: Vec<T>,
    scale: T,
}

impl<T: Scalar> Exponents<T> {
    fn new(block: &BatchBlock<'_, T>, dir: Direction, zeta: &[T], n: usize, tau: T) -> Self {
        let b = block.len();
        let mut e = vec![T::zero(); b * b];
        let mut row_sums = vec![T::zero(); b];
        for p in 0..b {
            let diag = block.at(dir, p, p);
            let mut acc = T::zero();
            for q in 0..b {
                if q != p {
                    let v = ((block.at(dir, p, q) - diag - zeta[block.indices[q]]) / tau).exp();
                    e[p * b + q] = v;
                    acc += v;
                }
            }
            row_sums[p] = acc;
        }
        let scale = T::from_count(n - 1) / T::from_count(b - 1);
        Self { b, e, row_sums, scale }
    }

    fn phi_hat(&self) -> Vec<T> {
        self.row_sums.iter().map(|&s| self.scale * s).collect()
    }
}

/// The unbiased minibatch estimate `φ̂_i` of `φ_i = Σ_{j≠i} exp((E_ij − E_ii − ζ_j)/τ)`.
pub fn minibatch_phi<T: Scalar>(
    model: &SimilarityModel<T>,
    sample: &PairedSample<T>,
    zeta: &[T],
    i: usize,
    batch: &[usize],
    tau: T,
) -> Result<T> {
    let block = BatchBlock::new(model, sample, batch)?;
    check_zeta(zeta, sample.len())?;
    let p = position(batch, i)?;
    Ok(Exponents::new(&block, Direction::Forward, zeta, sample.len(), tau).phi_hat()[p])
}

fn position(batch: &[usize], i: usize) -> Result<usize> {
    batch
        .iter()
        .position(|&b| b == i)
        .ok_or_else(|| Error::InvalidConfig(format!("index {i} is not in the batch")))
}

fn check_zeta<T>(zeta: &[T], n: usize) -> Result<()> {
    if zeta.len() == n {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: n, got: zeta.len() })
    }
}

/// Moving-average update of `u` on the batch coordinates.
pub fn update_u<T: Scalar>(track: &mut Track<T>, batch: &[usize], estimates: &[T], gamma: T) {
    for (&i, &phi) in batch.iter().zip(estimates) {
        track.u[i] = if track.touched[i] { (T::one() - gamma) * track.u[i] + gamma * phi } else { phi };
        track.touched[i] = true;
    }
}

fn zeta_gradient<T: Scalar>(ex: &Exponents<T>, track: &Track<T>, indices: &[usize], n: usize, tau: T) -> Vec<T> {
    let b = ex.b;
    let inv_b = T::one() / T::from_count(b);
    let mut g = vec![T::one() / T::from_count(n); b];
    for p in 0..b {
        let i = indices[p];
        let eps = (-track.zeta[i] / tau).exp();
        let w = inv_b / (eps + track.u[i]);
        g[p] -= w * eps;
        for q in 0..b {
            if q != p {
                g[q] -= w * ex.scale * ex.e[p * b + q];
            }
        }
    }
    g
}

/// Adds the model-gradient coefficients of this direction to `coef`, laid out
/// like [`BatchBlock::sims`].
fn add_w_coefficients<T: Scalar>(
    ex: &Exponents<T>,
    track: &Track<T>,
    indices: &[usize],
    dir: Direction,
    tau: T,
    xi_trick: bool,
    coef: &mut [T],
) {
    let b = ex.b;
    let inv_b = T::one() / T::from_count(b);
    let eps_xi = (-track.xi / tau).exp();
    for p in 0..b {
        let i = indices[p];
        let eps = if xi_trick { eps_xi } else { (-track.zeta[i] / tau).exp() };
        let a = ex.scale * inv_b / (eps + track.u[i]);
        let idx = |q: usize| match dir {
            Direction::Forward => p * b + q,
            Direction::Reverse => q * b + p,
        };
        for q in 0..b {
            if q != p {
                coef[idx(q)] += a * ex.e[p * b + q];
            }
        }
        coef[idx(p)] -= a * ex.row_sums[p];
    }
}

fn backprop<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>, block: &BatchBlock<'_, T>, coef: &[T]) -> Result<Vec<T>> {
    let m = match model {
        SimilarityModel::LinearCosine(m) => m,
        SimilarityModel::GroundTruthBilinear => return Err(Error::NoParameters),
    };
    let (ea, eb) = block.embeddings.as_ref().ok_or(Error::NoParameters)?;
    let xs: Vec<&[T]> = block.indices.iter().map(|&i| sample.anchors[i].as_slice()).collect();
    let ys: Vec<&[T]> = block.indices.iter().map(|&i| sample.targets[i].as_slice()).collect();
    let mut out = vec![T::zero(); m.params().len()];
    m.accumulate_block_grad(&xs, ea, &ys, eb, coef, &mut out);
    Ok(out)
}

/// `G(ζ_j)` for `j` in the batch (aligned with `batch`), using `track.u` as
/// the already-updated moving averages.
pub fn grad_zeta<T: Scalar>(
    model: &SimilarityModel<T>,
    sample: &PairedSample<T>,
    track: &Track<T>,
    batch: &[usize],
    tau: T,
) -> Result<Vec<T>> {
    let block = BatchBlock::new(model, sample, batch)?;
    check_zeta(&track.zeta, sample.len())?;
    let ex = Exponents::new(&block, Direction::Forward, &track.zeta, sample.len(), tau);
    Ok(zeta_gradient(&ex, track, batch, sample.len(), tau))
}

/// `G(w)` for the forward direction, using `track.u` as the updated moving averages.
pub fn grad_w<T: Scalar>(
    model: &SimilarityModel<T>,
    sample: &PairedSample<T>,
    track: &Track<T>,
    batch: &[usize],
    tau: T,
    xi_trick: bool,
) -> Result<Vec<T>> {
    if model.num_params() == 0 {
        return Err(Error::NoParameters);
    }
    let block = BatchBlock::new(model, sample, batch)?;
    check_zeta(&track.zeta, sample.len())?;
    let ex = Exponents::new(&block, Direction::Forward, &track.zeta, sample.len(), tau);
    let mut coef = vec![T::zero(); batch.len() * batch.len()];
    add_w_coefficients(&ex, track, batch, Direction::Forward, tau, xi_trick, &mut coef);
    backprop(model, sample, &block, &coef)
}

/// One NUCLR iteration on `batch`; `epoch` decides whether `ζ` is frozen.
pub fn nuclr_step<T: Scalar>(
    state: &mut NuclrState<T>,
    model: &mut SimilarityModel<T>,
    sample: &PairedSample<T>,
    batch: &[usize],
    config: &NuclrConfig,
    epoch: usize,
) -> Result<()> {
    let n = sample.len();
    if model.num_params() == 0 {
        return Err(Error::NoParameters);
    }
    let tau = T::lit(config.tau);
    let gamma = T::lit(config.gamma);
    let update_zeta = !config.sogclr && epoch >= config.freeze_epochs;
    let lr_zeta = T::lit(config.schedule.rate(config.lr_zeta, state.step, state.total_steps));
    let lr_w = T::lit(config.schedule.rate(config.lr_w, state.step, state.total_steps));
    let mu_zeta = T::lit(config.momentum_zeta);

    let block = BatchBlock::new(model, sample, batch)?;
    let b = batch.len();
    let mut coef = vec![T::zero(); b * b];
    for (track, dir) in state.tracks.iter_mut().zip([Direction::Forward, Direction::Reverse]) {
        check_zeta(&track.zeta, n)?;
        let ex = Exponents::new(&block, dir, &track.zeta, n, tau);
        update_u(track, batch, &ex.phi_hat(), gamma);
        // Both gradients are evaluated at the pre-update ζ and ξ.
        let g_zeta = update_zeta.then(|| zeta_gradient(&ex, track, batch, n, tau));
        add_w_coefficients(&ex, track, batch, dir, tau, config.xi_trick, &mut coef);
        if let Some(g) = g_zeta {
            let mut batch_max = T::zero();
            for (&j, &gj) in batch.iter().zip(&g) {
                let v = mu_zeta * track.zeta_velocity[j] + gj;
                track.zeta_velocity[j] = v;
                track.zeta[j] -= lr_zeta * v;
                batch_max = batch_max.max(track.zeta[j].abs());
            }
            // Only batch coordinates moved and ξ ≥ ‖ζ‖_∞ held before, so this
            // equals max(ξ, ‖ζ‖_∞).
            track.xi = track.xi.max(batch_max);
        }
    }
    let grad = backprop(model, sample, &block, &coef)?;
    state.step += 1;
    apply_w_update(state, model, &grad, lr_w, config)
}

fn apply_w_update<T: Scalar>(
    state: &mut NuclrState<T>,
    model: &mut SimilarityModel<T>,
    grad: &[T],
    lr: T,
    config: &NuclrConfig,
) -> Result<()> {
    let params = model.as_linear_cosine_mut()?.params_mut();
    match config.optimizer {
        WeightOptimizer::Momentum => {
            let mu = T::lit(config.momentum_w);
            for ((w, v), &g) in params.iter_mut().zip(&mut state.w_velocity).zip(grad) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        WeightOptimizer::Adam => {
            let (b1, b2) = (T::lit(config.adam_beta1), T::lit(config.adam_beta2));
            let t = i32::try_from(state.step).unwrap_or(i32::MAX);
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let eps = T::lit(config.adam_eps);
            for (((w, m), v), &g) in params.iter_mut().zip(&mut state.adam_m).zip(&mut state.adam_v).zip(grad) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Full-batch similarity matrix `K_ij = E(x_i, y_j)`.
pub fn full_similarity<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>, tau: T) -> Result<SimilarityMatrix<T>> {
    SimilarityMatrix::from_similarity_model(model, &sample.anchors, &sample.targets, tau)
}

/// `Ψ(w) = (1/n) Σ_i τ log(exp(−ζ_i/τ) + φ_i(w, ζ))`, i.e. `Φ` without its `mean ζ` term.
pub fn psi_full<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>, zeta: &[T], tau: T) -> Result<T> {
    let k = full_similarity(model, sample, tau)?;
    Ok(phi_objective(zeta, &k)? - mean(zeta))
}

/// Analytic full-batch `∇_w Ψ`.
pub fn psi_gradient<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>, zeta: &[T], tau: T) -> Result<Vec<T>> {
    let m = model.as_linear_cosine()?;
    let n = sample.len();
    check_zeta(zeta, n)?;
    let ea = sample.anchors.iter().map(|x| m.embed_anchor(x)).collect::<Result<Vec<_>>>()?;
    let eb = sample.targets.iter().map(|y| m.embed_target(y)).collect::<Result<Vec<_>>>()?;
    let inv_n = T::one() / T::from_count(n);
    let mut coef = vec![T::zero(); n * n];
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = (LinearCosine::score(&ea[i], &eb[j]) - zeta[j]) / tau;
        }
        let row = &mut coef[i * n..(i + 1) * n];
        crate::scalar::softmax_into(&logits, row);
        row.iter_mut().for_each(|c| *c *= inv_n);
        row[i] -= inv_n;
    }
    let xs: Vec<&[T]> = sample.anchors.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[T]> = sample.targets.iter().map(Vec::as_slice).collect();
    let mut out = vec![T::zero(); m.params().len()];
    m.accumulate_block_grad(&xs, &ea, &ys, &eb, &coef, &mut out);
    Ok(out)
}

/// `argmax_k E(x, y_k)`, lowest index on ties.
pub fn zero_shot_classify<T: Scalar>(model: &SimilarityModel<T>, x: &[T], prototypes: &[Vec<T>]) -> Result<usize> {
    if prototypes.is_empty() {
        return Err(Error::EmptyPrototypes);
    }
    let mut best = (0, model.similarity(x, &prototypes[0])?);
    for (k, y) in prototypes.iter().enumerate().skip(1) {
        let s = model.similarity(x, y)?;
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

/// Fraction of anchors whose most similar target (over the whole sample) is their own.
pub fn recall_at_1<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>) -> Result<f64> {
    let k = full_similarity(model, sample, sample.tau)?;
    let n = sample.len();
    let hits = (0..n)
        .filter(|&i| {
            let row = k.row(i);
            let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Summed over directions in symmetric mode; NaN when not recorded.
    pub phi_full: f64,
    pub psi_full: f64,
    /// On the evaluation sample; NaN without one.
    pub recall_at_1: f64,
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub xi: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: SimilarityModel<T>,
    pub state: NuclrState<T>,
    pub metrics: Vec<EpochMetrics>,
}

fn epoch_metrics<T: Scalar>(
    epoch: usize,
    model: &SimilarityModel<T>,
    sample: &PairedSample<T>,
    eval: Option<&PairedSample<T>>,
    state: &NuclrState<T>,
    config: &NuclrConfig,
) -> Result<EpochMetrics> {
    let (mut phi, mut psi) = (f64::NAN, f64::NAN);
    if config.full_metrics {
        let k = full_similarity(model, sample, T::lit(config.tau))?;
        let kt = (state.tracks.len() > 1).then(|| k.transposed());
        let (mut p, mut s) = (0.0, 0.0);
        for (track, km) in state.tracks.iter().zip([Some(&k), kt.as_ref()]) {
            let km = km.expect("one matrix per track");
            let v = phi_objective(&track.zeta, km)?.as_f64();
            p += v;
            s += v - mean(&track.zeta).as_f64();
        }
        phi = p;
        psi = s;
    }
    let recall = match eval {
        Some(e) => recall_at_1(model, e)?,
        None => f64::NAN,
    };
    let zetas = state.tracks.iter().flat_map(|t| t.zeta.iter().map(|z| z.as_f64()));
    let (zmin, zmax) = zetas.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| (a.min(z), b.max(z)));
    let xi = state.tracks.iter().map(|t| t.xi.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    Ok(EpochMetrics { epoch, phi_full: phi, psi_full: psi, recall_at_1: recall, zeta_min: zmin, zeta_max: zmax, xi })
}

/// Runs `config.epochs` epochs of shuffled minibatches (a final short batch
/// is dropped) and records metrics after each epoch.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    sample: &PairedSample<T>,
    eval: Option<&PairedSample<T>>,
    mut model: SimilarityModel<T>,
    config: &NuclrConfig,
    rng: &mut R,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    let n = sample.len();
    if n < config.batch_size {
        return Err(Error::InvalidConfig(format!("batch size {} exceeds sample size {n}", config.batch_size)));
    }
    if model.num_params() == 0 {
        return Err(Error::NoParameters);
    }
    let mut state = NuclrState::new(n, model.num_params(), config);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks_exact(config.batch_size) {
            nuclr_step(&mut state, &mut model, sample, batch, config, epoch)?;
        }
        metrics.push(epoch_metrics(epoch, &model, sample, eval, &state, config)?);
    }
    Ok(TrainOutput { model, state, metrics })
}

/// Paired data sharing a latent direction: `z` uniform on the unit sphere in
/// ℝ⁴, `x = A z + σ ε`, `y = B z + σ ε'` with fixed random `A, B ∈ ℝ^{8×4}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBimodal {
    a: Vec<f64>,
    b: Vec<f64>,
    pub noise: f64,
}

impl ToyBimodal {
    pub const LATENT_DIM: usize = 4;
    pub const OBSERVED_DIM: usize = 8;

    /// Draws the two mixing matrices with i.i.d. `N(0, 1/4)` entries.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let len = Self::OBSERVED_DIM * Self::LATENT_DIM;
        let mut draw = || (0..len).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
        let a = draw();
        let b = draw();
        Self { a, b, noise: 0.05 }
    }

    fn project<R: Rng + ?Sized>(&self, m: &[f64], z: &[f64], rng: &mut R) -> Vec<f64> {
        (0..Self::OBSERVED_DIM)
            .map(|r| {
                let row = &m[r * Self::LATENT_DIM..(r + 1) * Self::LATENT_DIM];
                let clean: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                let e: f64 = StandardNormal.sample(rng);
                clean + self.noise * e
            })
            .collect()
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, n: usize, tau: T, rng: &mut R) -> Result<PairedSample<T>> {
        let mut anchors = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let z = loop {
                let v: Vec<f64> = (0..Self::LATENT_DIM).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect();
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|c| c / norm).collect::<Vec<_>>();
                }
            };
            anchors.push(self.project(&self.a, &z, rng).into_iter().map(T::lit).collect());
            targets.push(self.project(&self.b, &z, rng).into_iter().map(T::lit).collect());
        }
        PairedSample::new(anchors, targets, tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::popularity::phi_gradient;
    use crate::rng::seeded;

    const TAU: f64 = 0.2;

    fn toy(n: usize, seed: u64) -> (PairedSample<f64>, SimilarityModel<f64>) {
        let mut rng = seeded(seed);
        let t = ToyBimodal::new(&mut rng);
        let s = t.sample(n, TAU, &mut rng).unwrap();
        let m = SimilarityModel::LinearCosine(LinearCosine::init(3, 8, 8, &mut rng).unwrap());
        (s, m)
    }

    fn random_zeta(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()
    }

    fn exact_phi(k: &SimilarityMatrix<f64>, zeta: &[f64], i: usize) -> f64 {
        (0..k.rows()).filter(|&j| j != i).map(|j| ((k.get(i, j) - k.get(i, i) - zeta[j]) / TAU).exp()).sum()
    }

    fn subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
        (0u32..1 << n).filter(|m| m.count_ones() as usize == b).map(|m| (0..n).filter(|&i| m >> i & 1 == 1).collect()).collect()
    }

    #[test]
    fn full_batch_phi_is_exact() {
        let (s, m) = toy(6, 1);
        let z = random_zeta(6, 2);
        let k = full_similarity(&m, &s, TAU).unwrap();
        let all: Vec<usize> = (0..6).collect();
        for i in 0..6 {
            let est = minibatch_phi(&m, &s, &z, i, &all, TAU).unwrap();
            assert!((est - exact_phi(&k, &z, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_estimate_is_unbiased_over_all_batches() {
        for (n, b) in [(3, 2), (7, 3), (8, 4)] {
            let (s, m) = toy(n, 3);
            let z = random_zeta(n, 4);
            let k = full_similarity(&m, &s, TAU).unwrap();
            for i in 0..n {
                let batches: Vec<_> = subsets(n, b).into_iter().filter(|bt| bt.contains(&i)).collect();
                let mean: f64 = batches.iter().map(|bt| minibatch_phi(&m, &s, &z, i, bt, TAU).unwrap()).sum::<f64>()
                    / batches.len() as f64;
                let exact = exact_phi(&k, &z, i);
                assert!((mean - exact).abs() <= 1e-12 * exact, "n={n} b={b} i={i}: {mean} vs {exact}");
            }
        }
    }

    #[test]
    fn constant_similarity_gives_n_minus_one() {
        let s = PairedSample::new(vec![vec![0.5, 0.5]; 5], vec![vec![0.2, 0.9]; 5], TAU).unwrap();
        let m = SimilarityModel::GroundTruthBilinear;
        let est = minibatch_phi(&m, &s, &[0.0; 5], 1, &[1, 3], TAU).unwrap();
        assert!((est - 4.0).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (s, m) = toy(4, 1);
        assert!(matches!(minibatch_phi(&m, &s, &[0.0; 4], 0, &[0], TAU), Err(Error::BatchTooSmall(1))));
        let track = Track::new(4, 0.0);
        assert!(matches!(grad_w(&m, &s, &track, &[2], TAU, true), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn moving_average_examples() {
        let mut t = Track::new(3, 0.0_f64);
        update_u(&mut t, &[0], &[5.0], 0.8);
        assert_eq!(t.u[0], 5.0);
        t.u[1] = 1.0;
        t.touched[1] = true;
        update_u(&mut t, &[1], &[2.0], 0.8);
        assert!((t.u[1] - 1.8).abs() < 1e-15);
        update_u(&mut t, &[0], &[3.0], 1.0);
        assert_eq!(t.u, vec![3.0, t.u[1], 0.0]);
        assert!(!t.touched[2]);
    }

    fn exact_track(m: &SimilarityModel<f64>, s: &PairedSample<f64>, zeta: Vec<f64>, xi: f64) -> Track<f64> {
        let n = s.len();
        let all: Vec<usize> = (0..n).collect();
        let mut t = Track::new(n, 0.0);
        let k = full_similarity(m, s, TAU).unwrap();
        let phis: Vec<f64> = (0..n).map(|i| exact_phi(&k, &zeta, i)).collect();
        t.zeta = zeta;
        t.xi = xi;
        update_u(&mut t, &all, &phis, 1.0);
        t
    }

    #[test]
    fn full_batch_zeta_gradient_matches_objective_gradient() {
        let (s, m) = toy(9, 5);
        let z = random_zeta(9, 6);
        let t = exact_track(&m, &s, z.clone(), 1.0);
        let all: Vec<usize> = (0..9).collect();
        let g = grad_zeta(&m, &s, &t, &all, TAU).unwrap();
        let k = full_similarity(&m, &s, TAU).unwrap();
        for (a, b) in g.iter().zip(phi_gradient(&z, &k).unwrap()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_similarity_zeta_gradient_vanishes() {
        let s = PairedSample::new(vec![vec![0.3, 0.4]; 4], vec![vec![0.5, 0.1]; 4], TAU).unwrap();
        let m = SimilarityModel::GroundTruthBilinear;
        let t = exact_track(&m, &s, vec![0.0; 4], 0.0);
        let g = grad_zeta(&m, &s, &t, &[0, 1, 2, 3], TAU).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn full_batch_w_gradient_matches_finite_differences() {
        let (s, m) = toy(8, 7);
        let zero = vec![0.0; 8];
        let t = exact_track(&m, &s, zero.clone(), 0.0);
        let all: Vec<usize> = (0..8).collect();
        let g = grad_w(&m, &s, &t, &all, TAU, true).unwrap();
        let analytic = psi_gradient(&m, &s, &zero, TAU).unwrap();
        let scale = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for k in 0..g.len() {
            let mut mp = m.clone();
            mp.as_linear_cosine_mut().unwrap().params_mut()[k] += 1e-6;
            let fp = psi_full(&mp, &s, &zero, TAU).unwrap();
            mp.as_linear_cosine_mut().unwrap().params_mut()[k] -= 2e-6;
            let fm = psi_full(&mp, &s, &zero, TAU).unwrap();
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[k]).abs() / scale < 1e-6, "coordinate {k}: {fd} vs {}", g[k]);
            assert!((analytic[k] - g[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_free_model_has_no_w_gradient() {
        let s = PairedSample::new(vec![vec![0.3, 0.4]; 3], vec![vec![0.5, 0.1]; 3], TAU).unwrap();
        let t = Track::new(3, 0.0);
        let r = grad_w(&SimilarityModel::GroundTruthBilinear, &s, &t, &[0, 1], TAU, true);
        assert!(matches!(r, Err(Error::NoParameters)));
    }

    fn small_config() -> NuclrConfig {
        NuclrConfig { batch_size: 8, epochs: 4, freeze_epochs: 1, tau: TAU, ..NuclrConfig::default() }
    }

    #[test]
    fn freeze_epoch_keeps_zeta_and_xi() {
        let (s, mut m) = toy(32, 8);
        let cfg = NuclrConfig { zeta0: -0.05, ..small_config() };
        let mut st = NuclrState::new(32, m.num_params(), &cfg);
        let before = (st.tracks[0].zeta.clone(), st.tracks[0].xi, m.clone());
        let batch: Vec<usize> = (0..8).collect();
        nuclr_step(&mut st, &mut m, &s, &batch, &cfg, 0).unwrap();
        assert_eq!(st.tracks[0].zeta, before.0);
        assert_eq!(st.tracks[0].xi, before.1);
        assert_ne!(m, before.2);
        assert!(batch.iter().all(|&i| st.tracks[0].touched[i] && st.tracks[0].u[i] > 0.0));
        nuclr_step(&mut st, &mut m, &s, &batch, &cfg, 1).unwrap();
        assert_ne!(st.tracks[0].zeta, before.0);
    }

    #[test]
    fn xi_is_monotone_and_dominates_zeta() {
        let (s, mut m) = toy(64, 9);
        for mode in [Mode::Unidirectional, Mode::Symmetric] {
            let cfg = NuclrConfig { zeta0: -0.05, lr_zeta: 20.0, mode, ..small_config() };
            let mut st = NuclrState::new(64, m.num_params(), &cfg);
            let mut rng = seeded(3);
            let mut order: Vec<usize> = (0..64).collect();
            let mut prev = vec![0.05; st.tracks.len()];
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for b in order.chunks_exact(8) {
                    nuclr_step(&mut st, &mut m, &s, b, &cfg, epoch).unwrap();
                    for (t, p) in st.tracks.iter().zip(prev.iter_mut()) {
                        let inf = t.zeta.iter().fold(0.0_f64, |a, z| a.max(z.abs()));
                        assert!(t.xi >= *p && t.xi >= inf);
                        *p = t.xi;
                    }
                }
            }
            assert!(prev.iter().all(|&x| x > 0.05));
        }
    }

    /// SogCLR written out directly: ζ and ξ do not exist.
    fn sogclr_reference_step(
        m: &mut LinearCosine<f64>,
        u: &mut [f64],
        seen: &mut [bool],
        vel: &mut [f64],
        s: &PairedSample<f64>,
        batch: &[usize],
        cfg: &NuclrConfig,
    ) {
        let (n, b, tau) = (s.len(), batch.len(), cfg.tau);
        let ea: Vec<_> = batch.iter().map(|&i| m.embed_anchor(&s.anchors[i]).unwrap()).collect();
        let eb: Vec<_> = batch.iter().map(|&i| m.embed_target(&s.targets[i]).unwrap()).collect();
        let c = (n - 1) as f64 / (b - 1) as f64;
        let mut coef = vec![0.0; b * b];
        for p in 0..b {
            let pos = LinearCosine::score(&ea[p], &eb[p]);
            let e: Vec<f64> =
                (0..b).map(|q| if q == p { 0.0 } else { ((LinearCosine::score(&ea[p], &eb[q]) - pos - 0.0) / tau).exp() }).collect();
            let total: f64 = e.iter().sum();
            let i = batch[p];
            u[i] = if seen[i] { (1.0 - cfg.gamma) * u[i] + cfg.gamma * (c * total) } else { c * total };
            seen[i] = true;
            let a = c * (1.0 / b as f64) / (1.0 + u[i]);
            for q in 0..b {
                if q != p {
                    coef[p * b + q] += a * e[q];
                }
            }
            coef[p * b + p] -= a * total;
        }
        let xs: Vec<&[f64]> = batch.iter().map(|&i| s.anchors[i].as_slice()).collect();
        let ys: Vec<&[f64]> = batch.iter().map(|&i| s.targets[i].as_slice()).collect();
        let mut g = vec![0.0; m.params().len()];
        m.accumulate_block_grad(&xs, &ea, &ys, &eb, &coef, &mut g);
        for ((w, v), gk) in m.params_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
            *v = cfg.momentum_w * *v + gk;
            *w -= cfg.lr_w * *v;
        }
    }

    #[test]
    fn sogclr_configuration_matches_reference_bitwise() {
        let (s, m0) = toy(48, 10);
        let cfg = NuclrConfig { sogclr: true, schedule: Schedule::Constant, batch_size: 8, tau: TAU, ..NuclrConfig::default() };
        let mut model = m0.clone();
        let mut st = NuclrState::new(48, model.num_params(), &cfg);
        let mut reference = m0.as_linear_cosine().unwrap().clone();
        let (mut u, mut seen, mut vel) = (vec![0.0; 48], vec![false; 48], vec![0.0; reference.params().len()]);
        let mut rng = seeded(11);
        let mut order: Vec<usize> = (0..48).collect();
        let mut steps = 0;
        while steps < 50 {
            order.shuffle(&mut rng);
            for b in order.chunks_exact(8) {
                nuclr_step(&mut st, &mut model, &s, b, &cfg, 100).unwrap();
                sogclr_reference_step(&mut reference, &mut u, &mut seen, &mut vel, &s, b, &cfg);
                steps += 1;
                let ours = model.as_linear_cosine().unwrap().params();
                assert!(ours.iter().zip(reference.params()).all(|(a, b)| a.to_bits() == b.to_bits()), "step {steps}");
                assert!(st.tracks[0].u.iter().zip(&u).all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(st.tracks[0].zeta.iter().all(|&z| z == 0.0) && st.tracks[0].xi == 0.0);
            }
        }
    }

    #[test]
    fn full_batch_unit_gamma_is_alternating_gradient_descent() {
        let (s, m0) = toy(16, 12);
        let cfg = NuclrConfig {
            batch_size: 16,
            gamma: 1.0,
            momentum_w: 0.0,
            momentum_zeta: 0.0,
            freeze_epochs: 0,
            schedule: Schedule::Constant,
            xi_trick: false,
            lr_w: 0.3,
            lr_zeta: 2.0,
            zeta0: -0.05,
            tau: TAU,
            ..NuclrConfig::default()
        };
        let mut model = m0.clone();
        let mut st = NuclrState::new(16, model.num_params(), &cfg);
        let mut ref_model = m0;
        let mut ref_zeta = vec![-0.05; 16];
        let mut rng = seeded(13);
        let mut order: Vec<usize> = (0..16).collect();
        for _ in 0..20 {
            order.shuffle(&mut rng);
            nuclr_step(&mut st, &mut model, &s, &order, &cfg, 0).unwrap();
            let k = full_similarity(&ref_model, &s, TAU).unwrap();
            let gz = phi_gradient(&ref_zeta, &k).unwrap();
            let gw = psi_gradient(&ref_model, &s, &ref_zeta, TAU).unwrap();
            for (z, g) in ref_zeta.iter_mut().zip(gz) {
                *z -= cfg.lr_zeta * g;
            }
            for (w, g) in ref_model.as_linear_cosine_mut().unwrap().params_mut().iter_mut().zip(gw) {
                *w -= cfg.lr_w * g;
            }
        }
        let ours = model.as_linear_cosine().unwrap().params();
        let theirs = ref_model.as_linear_cosine().unwrap().params();
        assert!(ours.iter().zip(theirs).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(st.tracks[0].zeta.iter().zip(&ref_zeta).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let (s, m) = toy(40, 14);
        let cfg = small_config();
        let a = train(&s, Some(&s), m.clone(), &cfg, &mut seeded(1)).unwrap();
        let b = train(&s, Some(&s), m.clone(), &cfg, &mut seeded(1)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(format!("{:?}", a.metrics), format!("{:?}", b.metrics));
        assert_eq!(a.metrics.len(), 4);
        let z = train(&s, None, m.clone(), &NuclrConfig { epochs: 0, ..cfg }, &mut seeded(1)).unwrap();
        assert_eq!(z.model, m);
        assert!(z.metrics.is_empty());
    }

    #[test]
    fn small_step_full_batch_loss_decreases_monotonically() {
        let (s, m) = toy(96, 15);
        let cfg = NuclrConfig {
            batch_size: 96,
            gamma: 1.0,
            epochs: 25,
            sogclr: true,
            momentum_w: 0.0,
            lr_w: 1e-3,
            schedule: Schedule::Constant,
            tau: TAU,
            ..NuclrConfig::default()
        };
        let out = train(&s, None, m, &cfg, &mut seeded(2)).unwrap();
        for w in out.metrics.windows(2) {
            assert!(w[1].psi_full < w[0].psi_full, "{} then {}", w[0].psi_full, w[1].psi_full);
        }
    }

    #[test]
    fn adam_and_symmetric_modes_learn() {
        let (s, _) = toy(256, 16);
        let m = SimilarityModel::LinearCosine(LinearCosine::init(8, 8, 8, &mut seeded(16)).unwrap());
        for cfg in [
            NuclrConfig { optimizer: WeightOptimizer::Adam, lr_w: 0.01, ..NuclrConfig::default() },
            NuclrConfig { mode: Mode::Symmetric, ..NuclrConfig::default() },
        ] {
            let cfg = NuclrConfig { batch_size: 32, epochs: 20, ..cfg };
            let out = train(&s, Some(&s), m.clone(), &cfg, &mut seeded(3)).unwrap();
            assert!(out.metrics.last().unwrap().recall_at_1 > 20.0 / 256.0, "{:?}", out.metrics.last());
        }
    }

    #[test]
    fn classification_examples() {
        let gt = SimilarityModel::<f64>::GroundTruthBilinear;
        assert_eq!(zero_shot_classify(&gt, &[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0);
        assert_eq!(zero_shot_classify(&gt, &[0.1, 0.9], &[vec![0.3, 0.3]]).unwrap(), 0);
        assert_eq!(zero_shot_classify(&gt, &[1.0, 0.0], &[vec![0.5, 0.0], vec![0.5, 1.0]]).unwrap(), 0);
        assert!(matches!(zero_shot_classify(&gt, &[1.0, 0.0], &[]), Err(Error::EmptyPrototypes)));
    }

    #[test]
    fn classification_ignores_embedding_scale() {
        let (s, m) = toy(20, 17);
        let mut scaled = m.clone();
        scaled.as_linear_cosine_mut().unwrap().params_mut().iter_mut().for_each(|w| *w *= 3.5);
        let protos = &s.targets[..10];
        for x in &s.anchors {
            assert_eq!(zero_shot_classify(&m, x, protos).unwrap(), zero_shot_classify(&scaled, x, protos).unwrap());
        }
    }
}
