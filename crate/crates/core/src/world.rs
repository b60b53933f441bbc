//! The analytically tractable 2-D synthetic world.
//!
//! Anchors live on the upper half of the unit disk, targets on the unit
//! square, and `p(y|x) ∝ exp(x·y/τ)`. The partition function factorizes over
//! coordinates, so every density in this module is exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Similarity;
use crate::quadrature::RectangleRule;
use crate::scalar::{dot, Scalar};

/// Proposal budget for a single rejection-sampled draw. The worst acceptance
/// rate of the conditional sampler is about `exp(-2/τ)` (≈ 4.5e-5 at τ = 0.2),
/// so the cap leaves a wide margin.
pub const PROPOSAL_CAP: usize = 1_000_000;

/// Below this `|a|` the factor `h(a, τ)` uses its first-order expansion.
const SMALL_ARG: f64 = 1e-12;

/// Rounding slack on the domain boundaries.
const DOMAIN_SLACK: f64 = 1e-12;

/// Gauss–Legendre order used when a model's partition function has no closed form.
pub const QUADRATURE_ORDER: usize = 48;

/// A point of the upper half unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint<T>(pub [T; 2]);

/// A point of the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPoint<T>(pub [T; 2]);

impl<T: Scalar> AnchorPoint<T> {
    pub fn new(x1: T, x2: T) -> Result<Self> {
        let p = Self([x1, x2]);
        if p.in_domain() {
            Ok(p)
        } else {
            Err(Error::OutsideDomain { space: "anchor", point: vec![x1.as_f64(), x2.as_f64()] })
        }
    }

    pub fn in_domain(&self) -> bool {
        let [a, b] = self.0.map(Scalar::as_f64);
        a * a + b * b <= 1.0 + DOMAIN_SLACK && (-1.0..=1.0).contains(&a) && (-DOMAIN_SLACK..=1.0).contains(&b)
    }
}

impl<T: Scalar> TargetPoint<T> {
    pub fn new(y1: T, y2: T) -> Result<Self> {
        let p = Self([y1, y2]);
        if p.in_domain() {
            Ok(p)
        } else {
            Err(Error::OutsideDomain { space: "target", point: vec![y1.as_f64(), y2.as_f64()] })
        }
    }

    pub fn in_domain(&self) -> bool {
        self.0.iter().all(|c| (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&c.as_f64()))
    }
}

/// A paired dataset `{(x_i, y_i)}` together with the temperature it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample<T> {
    pub anchors: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    pub tau: T,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(anchors: Vec<Vec<T>>, targets: Vec<Vec<T>>, tau: T) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Empty("paired sample"));
        }
        if anchors.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: anchors.len(), got: targets.len() });
        }
        check_tau(tau)?;
        let dx = anchors[0].len();
        let dy = targets[0].len();
        for a in &anchors {
            if a.len() != dx {
                return Err(Error::DimensionMismatch { expected: dx, got: a.len() });
            }
        }
        for t in &targets {
            if t.len() != dy {
                return Err(Error::DimensionMismatch { expected: dy, got: t.len() });
            }
        }
        Ok(Self { anchors, targets, tau })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// The anchors as synthetic-world points; fails if any lies outside the disk.
    pub fn world_anchors(&self) -> Result<Vec<AnchorPoint<T>>> {
        self.anchors
            .iter()
            .map(|a| match a.as_slice() {
                [x1, x2] => AnchorPoint::new(*x1, *x2),
                _ => Err(Error::DimensionMismatch { expected: 2, got: a.len() }),
            })
            .collect()
    }

    pub fn world_targets(&self) -> Result<Vec<TargetPoint<T>>> {
        self.targets
            .iter()
            .map(|t| match t.as_slice() {
                [y1, y2] => TargetPoint::new(*y1, *y2),
                _ => Err(Error::DimensionMismatch { expected: 2, got: t.len() }),
            })
            .collect()
    }
}

pub(crate) fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau.as_f64()))
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::lit(rng.gen_range(lo..hi))
}

/// Uniform draw from the half disk by rejection from `[-1,1]×[0,1]`;
/// also returns the number of proposals used.
pub fn sample_anchor_counted<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Result<(AnchorPoint<T>, usize)> {
    for proposals in 1..=PROPOSAL_CAP {
        let x1: f64 = rng.gen_range(-1.0..1.0);
        let x2: f64 = rng.gen_range(0.0..1.0);
        if x1 * x1 + x2 * x2 <= 1.0 {
            return Ok((AnchorPoint([T::lit(x1), T::lit(x2)]), proposals));
        }
    }
    Err(Error::ProposalCapExceeded { cap: PROPOSAL_CAP })
}

pub fn sample_anchor<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Result<AnchorPoint<T>> {
    sample_anchor_counted(rng).map(|(p, _)| p)
}

/// `log h(a, τ)` where `h(a, τ) = ∫_0^1 exp(a t/τ) dt = τ(e^{a/τ} − 1)/a`.
pub fn log_edge_factor<T: Scalar>(a: T, tau: T) -> T {
    if a.abs().as_f64() < SMALL_ARG {
        return (T::one() + a / (T::lit(2.0) * tau)).ln();
    }
    // h = e^{max(a,0)/τ} · τ(1 − e^{−|a|/τ})/|a|
    let abs = a.abs();
    a.max(T::zero()) / tau + (tau * -(-abs / tau).exp_m1() / abs).ln()
}

/// `h(a, τ)`; continuous at `a = 0` where it equals 1.
pub fn edge_factor<T: Scalar>(a: T, tau: T) -> T {
    log_edge_factor(a, tau).exp()
}

/// `log Z(x)` for the bilinear ground truth.
pub fn log_partition_function<T: Scalar>(x: &AnchorPoint<T>, tau: T) -> Result<T> {
    check_tau(tau)?;
    Ok(log_edge_factor(x.0[0], tau) + log_edge_factor(x.0[1], tau))
}

/// `Z(x) = ∫_{[0,1]²} exp(x·y/τ) dy = h(x1, τ)·h(x2, τ)`.
pub fn partition_function<T: Scalar>(x: &AnchorPoint<T>, tau: T) -> Result<T> {
    log_partition_function(x, tau).map(T::exp)
}

/// Exact `p(y|x)` of the synthetic world.
pub fn conditional_density<T: Scalar>(y: &TargetPoint<T>, x: &AnchorPoint<T>, tau: T) -> Result<T> {
    log_conditional_density(y, x, tau).map(T::exp)
}

pub fn log_conditional_density<T: Scalar>(y: &TargetPoint<T>, x: &AnchorPoint<T>, tau: T) -> Result<T> {
    check_tau(tau)?;
    if !x.in_domain() {
        return Err(Error::OutsideDomain { space: "anchor", point: x.0.map(Scalar::as_f64).to_vec() });
    }
    if !y.in_domain() {
        return Err(Error::OutsideDomain { space: "target", point: y.0.map(Scalar::as_f64).to_vec() });
    }
    Ok(dot(&x.0, &y.0) / tau - log_partition_function(x, tau)?)
}

/// `max_{y ∈ [0,1]²} x·y`, the envelope exponent of the rejection sampler.
pub fn envelope_max<T: Scalar>(x: &AnchorPoint<T>) -> T {
    x.0[0].max(T::zero()) + x.0[1].max(T::zero())
}

/// Exact draw from `p(·|x)`: uniform proposals on the square, accepted with
/// probability `exp((x·y − M(x))/τ)`. Returns the draw and the proposal count.
pub fn sample_conditional_counted<T: Scalar, R: Rng + ?Sized>(
    x: &AnchorPoint<T>,
    tau: T,
    rng: &mut R,
) -> Result<(TargetPoint<T>, usize)> {
    check_tau(tau)?;
    let m = envelope_max(x);
    for proposals in 1..=PROPOSAL_CAP {
        let y = [uniform::<T, _>(rng, 0.0, 1.0), uniform::<T, _>(rng, 0.0, 1.0)];
        let ratio = ((dot(&x.0, &y) - m) / tau).exp();
        debug_assert!(ratio <= T::one(), "envelope violated: ratio {ratio}");
        let u: T = uniform(rng, 0.0, 1.0);
        if u < ratio {
            return Ok((TargetPoint(y), proposals));
        }
    }
    Err(Error::ProposalCapExceeded { cap: PROPOSAL_CAP })
}

pub fn sample_conditional<T: Scalar, R: Rng + ?Sized>(x: &AnchorPoint<T>, tau: T, rng: &mut R) -> Result<TargetPoint<T>> {
    sample_conditional_counted(x, tau, rng).map(|(y, _)| y)
}

/// Draws `n` pairs: anchors uniform on the half disk, targets from `p(·|x)`.
pub fn generate_sample<T: Scalar, R: Rng + ?Sized>(n: usize, tau: T, rng: &mut R) -> Result<PairedSample<T>> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be at least 1".into()));
    }
    check_tau(tau)?;
    let mut anchors = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_anchor::<T, _>(rng)?;
        let y = sample_conditional(&x, tau, rng)?;
        anchors.push(x.0.to_vec());
        targets.push(y.0.to_vec());
    }
    PairedSample::new(anchors, targets, tau)
}

/// Popularity `q_j = Σ_{j'} p(y_j | x_{j'})` with exact partition functions.
pub fn true_popularity<T: Scalar>(sample: &PairedSample<T>) -> Result<Vec<T>> {
    let anchors = sample.world_anchors()?;
    let targets = sample.world_targets()?;
    let tau = sample.tau;
    let log_z: Vec<T> = anchors.iter().map(|x| log_partition_function(x, tau)).collect::<Result<_>>()?;
    targets
        .iter()
        .map(|y| {
            if !y.in_domain() {
                return Err(Error::OutsideDomain { space: "target", point: y.0.map(Scalar::as_f64).to_vec() });
            }
            Ok(anchors.iter().zip(&log_z).map(|(x, &lz)| (dot(&x.0, &y.0) / tau - lz).exp()).sum())
        })
        .collect()
}

/// Monte Carlo estimate of the true risk with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate<T> {
    pub mean: T,
    pub std_error: T,
    pub samples: usize,
}

/// `log ∫_{[0,1]²} exp(E(x, y)/τ) dy` by tensor Gauss–Legendre quadrature.
pub fn log_partition_by_quadrature<T: Scalar, M: Similarity<T> + ?Sized>(
    model: &M,
    x: &[T],
    tau: T,
    rule: &RectangleRule<T>,
) -> Result<T> {
    // Shift by the bound |E| ≤ max over nodes to keep the integrand in range.
    let scores: Vec<T> = rule.points().iter().map(|p| model.similarity(x, p)).collect::<Result<_>>()?;
    let shift = scores.iter().copied().fold(T::neg_infinity(), T::max) / tau;
    let mut it = scores.iter();
    let avg = rule.average(|_| (*it.next().expect("one score per node") / tau - shift).exp());
    Ok(shift + avg.ln() + rule.area().ln())
}

/// `−(1/N) Σ τ log p_w(y_k|x_k)` over `N` fresh pairs of the synthetic world.
///
/// The ground-truth model uses its exact partition function; any other model
/// is normalized by quadrature over the unit square.
pub fn estimate_true_risk<T: Scalar, M: Similarity<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    tau: T,
    n_pairs: usize,
    rng: &mut R,
) -> Result<RiskEstimate<T>> {
    check_tau(tau)?;
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("true-risk sample size must be at least 1".into()));
    }
    let rule = (!model.is_ground_truth()).then(|| RectangleRule::<T>::unit_square(QUADRATURE_ORDER));
    let mut sum = 0.0_f64;
    let mut sum_sq = 0.0_f64;
    for _ in 0..n_pairs {
        let x = sample_anchor::<T, _>(rng)?;
        let y = sample_conditional(&x, tau, rng)?;
        let log_z = match &rule {
            None => log_partition_function(&x, tau)?,
            Some(rule) => log_partition_by_quadrature(model, &x.0, tau, rule)?,
        };
        let loss = (-tau * (model.similarity(&x.0, &y.0)? / tau - log_z)).as_f64();
        sum += loss;
        sum_sq += loss * loss;
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = if n_pairs > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(RiskEstimate { mean: T::lit(mean), std_error: T::lit((var / n).sqrt()), samples: n_pairs })
}

/// `−(1/n) Σ_i τ log p(y_i|x_i)` of the ground-truth model on a world sample,
/// using the closed-form partition function.
pub fn mle_empirical_risk<T: Scalar>(sample: &PairedSample<T>) -> Result<T> {
    let tau = sample.tau;
    let anchors = sample.world_anchors()?;
    let targets = sample.world_targets()?;
    let mut total = T::zero();
    for (x, y) in anchors.iter().zip(&targets) {
        total -= tau * log_conditional_density(y, x, tau)?;
    }
    Ok(total / T::from_count(sample.len()))
}
