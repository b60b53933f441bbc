//! Multiple importance sampling estimators of the partition integral
//! `g(x_i) = ∫ exp(E(x_i, y)/τ) dy` and the empirical risks built on them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::SimilarityMatrix;
use crate::model::{Similarity, SimilarityModel};
use crate::rng::substream;
use crate::scalar::{log_sum_exp_iter, Scalar};
use crate::world::{self, check_tau, AnchorPoint, PairedSample, TargetPoint};

/// How a sample drawn from distribution `j` is weighted when several
/// distributions contribute to one estimate. Weights lie on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightingScheme {
    /// `ω_j(y) = p_j(y) / Σ_k p_k(y)`.
    BalanceHeuristic,
    /// `ω_j(y) = 1/n`.
    Uniform,
    /// All weight on one distribution.
    SingleDistribution(usize),
}

impl WeightingScheme {
    /// Weights `ω_1(y), ..., ω_n(y)` given the densities `p_j(y)` of every distribution at `y`.
    pub fn weights<T: Scalar>(&self, densities: &[T]) -> Result<Vec<T>> {
        let n = densities.len();
        if n == 0 {
            return Err(Error::Empty("density list"));
        }
        match *self {
            Self::BalanceHeuristic => {
                let total: T = densities.iter().copied().sum();
                if !(total > T::zero()) {
                    return Err(Error::ZeroDensity { index: 0 });
                }
                Ok(densities.iter().map(|&p| p / total).collect())
            }
            Self::Uniform => Ok(vec![T::one() / T::from_count(n); n]),
            Self::SingleDistribution(k) => {
                if k >= n {
                    return Err(Error::InvalidConfig(format!("single-distribution index {k} out of range for {n}")));
                }
                let mut w = vec![T::zero(); n];
                w[k] = T::one();
                Ok(w)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::BalanceHeuristic => "balance".into(),
            Self::Uniform => "uniform".into(),
            Self::SingleDistribution(k) => format!("single{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "balance" => Ok(Self::BalanceHeuristic),
            "uniform" => Ok(Self::Uniform),
            other => other
                .strip_prefix("single")
                .and_then(|k| k.parse().ok())
                .map(Self::SingleDistribution)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown weighting scheme `{other}`"))),
        }
    }
}

/// A strictly positive approximation `q̃` of the popularity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityApprox<T>(Vec<T>);

impl<T: Scalar> PopularityApprox<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("popularity vector"));
        }
        for (index, v) in values.iter().enumerate() {
            if !(*v > T::zero() && v.is_finite()) {
                return Err(Error::NonPositivePopularity { index, value: v.as_f64() });
            }
        }
        Ok(Self(values))
    }

    /// `q̃ = n·c·1`, the choice that turns the MIS risk into the global contrastive loss.
    pub fn uniform(n: usize, c: T) -> Result<Self> {
        Self::new(vec![T::from_count(n) * c; n])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.0.iter().map(|&v| v * c).collect())
    }

    fn logs(&self) -> Vec<T> {
        self.0.iter().map(|v| v.ln()).collect()
    }
}

/// `log Σ_j exp(K_ij/τ)/q̃_j` for one row of scores.
fn log_plugin_row<T: Scalar>(scores: &[T], log_q: &[T], tau: T) -> T {
    log_sum_exp_iter(scores.iter().zip(log_q).map(|(&k, &lq)| k / tau - lq))
}

/// `g̃(x_i) = Σ_j exp(E(x_i, y_j)/τ)/q̃_j`, evaluated in log space.
pub fn log_mis_estimate<T: Scalar, M: Similarity<T> + ?Sized>(
    model: &M,
    x_i: &[T],
    targets: &[Vec<T>],
    qtilde: &PopularityApprox<T>,
    tau: T,
) -> Result<T> {
    check_tau(tau)?;
    if targets.len() != qtilde.len() {
        return Err(Error::DimensionMismatch { expected: qtilde.len(), got: targets.len() });
    }
    let scores = targets.iter().map(|y| model.similarity(x_i, y)).collect::<Result<Vec<_>>>()?;
    Ok(log_plugin_row(&scores, &qtilde.logs(), tau))
}

pub fn mis_estimate<T: Scalar, M: Similarity<T> + ?Sized>(
    model: &M,
    x_i: &[T],
    targets: &[Vec<T>],
    qtilde: &PopularityApprox<T>,
    tau: T,
) -> Result<T> {
    log_mis_estimate(model, x_i, targets, qtilde, tau).map(T::exp)
}

/// The general MIS estimator with `m` draws from each of `n` distributions:
/// `ĝ = Σ_j (1/m) Σ_l ω_j(y_jl)/p_j(y_jl) · exp(E(x_i, y_jl)/τ)`.
///
/// `density(y, j)` must return `p_j(y)`.
pub fn mis_estimate_weighted<T, M, D>(
    model: &M,
    x_i: &[T],
    per_distribution: &[Vec<Vec<T>>],
    density: D,
    scheme: WeightingScheme,
    tau: T,
) -> Result<T>
where
    T: Scalar,
    M: Similarity<T> + ?Sized,
    D: Fn(&[T], usize) -> Result<T>,
{
    check_tau(tau)?;
    let n = per_distribution.len();
    if n == 0 {
        return Err(Error::Empty("distribution list"));
    }
    let mut total = T::zero();
    let mut dens = vec![T::zero(); n];
    for (j, draws) in per_distribution.iter().enumerate() {
        if draws.is_empty() {
            return Err(Error::Empty("per-distribution sample"));
        }
        let m = T::from_count(draws.len());
        let mut inner = T::zero();
        for y in draws {
            let w_j = match scheme {
                WeightingScheme::BalanceHeuristic => {
                    for (k, d) in dens.iter_mut().enumerate() {
                        *d = density(y, k)?;
                    }
                    scheme.weights(&dens)?[j]
                }
                _ => scheme.weights(&dens)?[j],
            };
            if w_j == T::zero() {
                continue;
            }
            let p_j = if scheme == WeightingScheme::BalanceHeuristic { dens[j] } else { density(y, j)? };
            if !(p_j > T::zero()) {
                return Err(Error::ZeroDensity { index: j });
            }
            inner += w_j / p_j * (model.similarity(x_i, y)? / tau).exp();
        }
        total += inner / m;
    }
    Ok(total)
}

/// `L̂(q̃) = (1/n) Σ_i [τ log g̃(x_i) − K_ii]`.
pub fn empirical_risk_from_matrix<T: Scalar>(k: &SimilarityMatrix<T>, qtilde: &PopularityApprox<T>) -> Result<T> {
    let n = k.require_square()?;
    if qtilde.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: qtilde.len() });
    }
    let tau = k.tau();
    let log_q = qtilde.logs();
    let total: T = (0..n).map(|i| tau * log_plugin_row(k.row(i), &log_q, tau) - k.get(i, i)).sum();
    Ok(total / T::from_count(n))
}

pub fn empirical_risk<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>, qtilde: &PopularityApprox<T>) -> Result<T> {
    empirical_risk_from_matrix(&SimilarityMatrix::from_sample(model, sample)?, qtilde)
}

/// Global contrastive loss; the softmax denominator runs over all `j`, including `j = i`.
pub fn gcl_risk_from_matrix<T: Scalar>(k: &SimilarityMatrix<T>) -> Result<T> {
    let n = k.require_square()?;
    let tau = k.tau();
    let total: T = (0..n)
        .map(|i| tau * log_sum_exp_iter(k.row(i).iter().map(|&v| v / tau)) - k.get(i, i))
        .sum();
    Ok(total / T::from_count(n))
}

pub fn gcl_risk<T: Scalar>(model: &SimilarityModel<T>, sample: &PairedSample<T>) -> Result<T> {
    gcl_risk_from_matrix(&SimilarityMatrix::from_sample(model, sample)?)
}

/// `(1/n) Σ_i Σ_j |1/q̃_j − 1/q_j| · exp((K_ii − 1)/τ)`.
pub fn approximation_error_term_from_matrix<T: Scalar>(
    k: &SimilarityMatrix<T>,
    qtilde: &PopularityApprox<T>,
    q_true: &[T],
) -> Result<T> {
    let n = k.require_square()?;
    if qtilde.len() != n || q_true.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: qtilde.len().min(q_true.len()) });
    }
    let tau = k.tau();
    let gap: T = qtilde.values().iter().zip(q_true).map(|(&a, &b)| (T::one() / a - T::one() / b).abs()).sum();
    let diag: T = (0..n).map(|i| ((k.get(i, i) - T::one()) / tau).exp()).sum();
    Ok(gap * diag / T::from_count(n))
}

pub fn approximation_error_term<T: Scalar>(
    model: &SimilarityModel<T>,
    sample: &PairedSample<T>,
    qtilde: &PopularityApprox<T>,
    q_true: &[T],
) -> Result<T> {
    approximation_error_term_from_matrix(&SimilarityMatrix::from_sample(model, sample)?, qtilde, q_true)
}

/// Configuration of a variance study of [`mis_estimate_weighted`] in the synthetic world.
#[derive(Debug, Clone)]
pub struct VarianceStudyConfig<T> {
    /// Pool of anchors; a cell with `n` distributions uses the first `n`.
    pub anchors: Vec<AnchorPoint<T>>,
    /// Index into `anchors` of the anchor whose partition function is estimated.
    pub target_index: usize,
    pub schemes: Vec<WeightingScheme>,
    /// `(n, m)` cells.
    pub grid: Vec<(usize, usize)>,
    pub repeats: usize,
    pub tau: T,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRecord<T> {
    pub scheme: WeightingScheme,
    pub n: usize,
    pub m: usize,
    pub repeats: usize,
    pub mean: T,
    /// Unbiased sample variance (divides by `repeats − 1`).
    pub variance: T,
    pub exact: T,
    pub abs_bias: T,
}

impl<T: Scalar> VarianceRecord<T> {
    pub fn std_error(&self) -> T {
        (self.variance / T::from_count(self.repeats)).sqrt()
    }
}

/// Draws `m` targets from each `p(·|x_j)`.
pub fn sample_per_distribution<T: Scalar, R: Rng + ?Sized>(
    anchors: &[AnchorPoint<T>],
    m: usize,
    tau: T,
    rng: &mut R,
) -> Result<Vec<Vec<Vec<T>>>> {
    anchors
        .iter()
        .map(|x| (0..m).map(|_| world::sample_conditional(x, tau, rng).map(|y| y.0.to_vec())).collect())
        .collect()
}

/// Empirical mean and variance of the weighted MIS estimator, per scheme and
/// `(n, m)` cell, against the exact partition function. Every cell draws from
/// its own random stream, so cells are reproducible independently.
pub fn estimator_variance_study<T: Scalar>(config: &VarianceStudyConfig<T>) -> Result<Vec<VarianceRecord<T>>> {
    check_tau(config.tau)?;
    if config.repeats < 2 {
        return Err(Error::InvalidConfig("variance study needs at least two repeats".into()));
    }
    let tau = config.tau;
    let target = *config
        .anchors
        .get(config.target_index)
        .ok_or_else(|| Error::InvalidConfig("target anchor index out of range".into()))?;
    let exact = world::partition_function(&target, tau)?;
    let model = SimilarityModel::<T>::GroundTruthBilinear;
    let mut out = Vec::new();
    let mut cell = 0u64;
    for &scheme in &config.schemes {
        for &(n, m) in &config.grid {
            cell += 1;
            if n == 0 || m == 0 || n > config.anchors.len() || config.target_index >= n {
                return Err(Error::InvalidConfig(format!("invalid variance-study cell n={n}, m={m}")));
            }
            let anchors = &config.anchors[..n];
            let log_z = anchors.iter().map(|x| world::log_partition_function(x, tau)).collect::<Result<Vec<_>>>()?;
            let density = |y: &[T], j: usize| -> Result<T> {
                let x = &anchors[j].0;
                Ok(((x[0] * y[0] + x[1] * y[1]) / tau - log_z[j]).exp())
            };
            let mut rng = substream(config.seed, cell);
            let mut values = Vec::with_capacity(config.repeats);
            for _ in 0..config.repeats {
                let draws = sample_per_distribution(anchors, m, tau, &mut rng)?;
                values.push(mis_estimate_weighted(&model, &target.0, &draws, density, scheme, tau)?.as_f64());
            }
            let r = values.len() as f64;
            let mean = values.iter().sum::<f64>() / r;
            let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0);
            out.push(VarianceRecord {
                scheme,
                n,
                m,
                repeats: config.repeats,
                mean: T::lit(mean),
                variance: T::lit(variance),
                exact,
                abs_bias: (T::lit(mean) - exact).abs(),
            });
        }
    }
    Ok(out)
}

/// Densities of every anchor's conditional at `y`.
pub fn densities_at<T: Scalar>(anchors: &[AnchorPoint<T>], y: &TargetPoint<T>, tau: T) -> Result<Vec<T>> {
    anchors.iter().map(|x| world::conditional_density(y, x, tau)).collect()
}
