//! Non-parametric popularity approximation.
//!
//! Minimizes the convex objective
//!
//! ```text
//! Φ(ζ) = (1/n) Σ_i [ τ log Σ_j exp((K_ij − ζ_j)/τ) − K_ii ] + (1/n) Σ_j ζ_j
//! ```
//!
//! whose minimizers are unique up to an additive constant. At a minimizer
//! `q̄ = exp(ζ/τ)` solves the fixed-point equation
//! `q̄_j = Σ_{j'} exp(K_{j'j}/τ) / Σ_{i'} exp(K_{j'i'}/τ)/q̄_{i'}`,
//! which mirrors the MIS expression of the true popularity.

use crate::error::{Error, Result};
use crate::matrix::SimilarityMatrix;
use crate::scalar::{log_sum_exp_iter, mean, norm_inf, softmax_into, Scalar};

fn check_len<T>(zeta: &[T], n: usize) -> Result<()> {
    if zeta.len() == n {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: n, got: zeta.len() })
    }
}

/// `Φ(ζ)`, log-sum-exp stabilized row by row.
pub fn phi_objective<T: Scalar>(zeta: &[T], k: &SimilarityMatrix<T>) -> Result<T> {
    let n = k.require_square()?;
    check_len(zeta, n)?;
    let tau = k.tau();
    let rows: T = (0..n)
        .map(|i| tau * log_sum_exp_iter(k.row(i).iter().zip(zeta).map(|(&kij, &z)| (kij - z) / tau)) - k.get(i, i))
        .sum();
    Ok(rows / T::from_count(n) + mean(zeta))
}

/// `∂Φ/∂ζ_j = (1/n)(1 − Σ_i s_ij)` with `s_i = softmax((K_i· − ζ)/τ)`.
pub fn phi_gradient<T: Scalar>(zeta: &[T], k: &SimilarityMatrix<T>) -> Result<Vec<T>> {
    let n = k.require_square()?;
    check_len(zeta, n)?;
    let tau = k.tau();
    let mut logits = vec![T::zero(); n];
    let mut soft = vec![T::zero(); n];
    let mut col = vec![T::zero(); n];
    for i in 0..n {
        for ((l, &kij), &z) in logits.iter_mut().zip(k.row(i)).zip(zeta) {
            *l = (kij - z) / tau;
        }
        softmax_into(&logits, &mut soft);
        for (c, s) in col.iter_mut().zip(&soft) {
            *c += *s;
        }
    }
    let inv_n = T::one() / T::from_count(n);
    Ok(col.into_iter().map(|c| (T::one() - c) * inv_n).collect())
}

/// Factored form used inside the solver. With `A_ij = exp((K_ij − max_j K_ij)/τ)`
/// precomputed and `w_j = exp(−(ζ_j − min ζ)/τ)`, every row sum is `(A w)_i`
/// and the gradient needs one product with `Aᵀ`, so an evaluation costs two
/// matrix-vector products and `n` exponentials.
struct ExpKernel<T> {
    n: usize,
    a: Vec<T>,
    row_max: Vec<T>,
    diag_sum: T,
    tau: T,
}

impl<T: Scalar> ExpKernel<T> {
    fn new(k: &SimilarityMatrix<T>) -> Result<Self> {
        let n = k.require_square()?;
        let tau = k.tau();
        let mut a = Vec::with_capacity(n * n);
        let mut row_max = Vec::with_capacity(n);
        for i in 0..n {
            let row = k.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row_max.push(m);
            a.extend(row.iter().map(|&v| ((v - m) / tau).exp()));
        }
        let diag_sum = (0..n).map(|i| k.get(i, i)).sum();
        Ok(Self { n, a, row_max, diag_sum, tau })
    }

    fn eval(&self, zeta: &[T]) -> (T, Vec<T>) {
        let n = self.n;
        let tau = self.tau;
        let zmin = zeta.iter().copied().fold(T::infinity(), T::min);
        let w: Vec<T> = zeta.iter().map(|&z| (-(z - zmin) / tau).exp()).collect();
        let mut inv_rows = Vec::with_capacity(n);
        let mut acc = T::zero();
        for i in 0..n {
            let row = &self.a[i * n..(i + 1) * n];
            let r: T = row.iter().zip(&w).map(|(&a, &b)| a * b).sum();
            acc += self.row_max[i] + tau * r.ln();
            inv_rows.push(T::one() / r);
        }
        let inv_n = T::one() / T::from_count(n);
        let value = (acc - self.diag_sum) * inv_n - zmin + mean(zeta);
        let mut col = vec![T::zero(); n];
        for (i, &ir) in inv_rows.iter().enumerate() {
            let row = &self.a[i * n..(i + 1) * n];
            for (c, &a) in col.iter_mut().zip(row) {
                *c += a * ir;
            }
        }
        let grad = col.iter().zip(&w).map(|(&c, &wj)| (T::one() - wj * c) * inv_n).collect();
        (value, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    /// Stop once `‖∇Φ‖_∞ ≤ tol`.
    pub tol: T,
    pub max_iter: usize,
    /// First trial step of the line search.
    pub step: T,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-10), max_iter: 200_000, step: T::one() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopularitySolution<T> {
    /// Mean-centered minimizer.
    pub zeta: Vec<T>,
    /// `exp(ζ/τ)`.
    pub qprime: Vec<T>,
    /// Achieved `‖∇Φ‖_∞`.
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    pub objective: T,
    /// Objective after each accepted iteration, starting with the initial point.
    pub objective_trace: Vec<T>,
    pub tau: T,
}

/// Gradient descent from `ζ = 0`; see [`solve_popularity_from`].
pub fn solve_popularity<T: Scalar>(k: &SimilarityMatrix<T>, options: &SolverOptions<T>) -> Result<PopularitySolution<T>> {
    let n = k.require_square()?;
    solve_popularity_from(k, vec![T::zero(); n], options)
}

/// Gradient descent with Armijo backtracking (`c = 1e-4`, halving). The first
/// line search starts at `options.step`; later ones start from the previous
/// accepted step, doubled or halved according to how closely the achieved
/// decrease matched the linear prediction. The natural step grows like `nτ`,
/// so a fixed starting step would waste most evaluations on backtracking or
/// crawl with steps far too short.
///
/// Close to the optimum the predicted decrease falls below the rounding
/// level of `Φ`; there a step is accepted when the objective does not rise
/// beyond that level and the gradient norm shrinks.
///
/// A run that exhausts `max_iter` or stalls returns its last iterate with
/// `converged = false`.
pub fn solve_popularity_from<T: Scalar>(
    k: &SimilarityMatrix<T>,
    init: Vec<T>,
    options: &SolverOptions<T>,
) -> Result<PopularitySolution<T>> {
    let n = k.require_square()?;
    check_len(&init, n)?;
    if !(options.tol > T::zero()) || !(options.step > T::zero()) || options.max_iter == 0 {
        return Err(Error::InvalidConfig("solver needs tol > 0, step > 0 and max_iter >= 1".into()));
    }
    let kernel = ExpKernel::new(k)?;
    let armijo = T::lit(1e-4);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let resolution = T::lit(64.0) * T::epsilon();

    let mut zeta = init;
    let (mut f, mut g) = kernel.eval(&zeta);
    let mut trace = vec![f];
    let mut trial_start = options.step;
    let mut iterations = 0;
    let mut converged = false;
    let mut z_new = vec![T::zero(); n];

    loop {
        if norm_inf(&g) <= options.tol {
            converged = true;
            break;
        }
        if iterations == options.max_iter {
            break;
        }
        let g2: T = g.iter().map(|&v| v * v).sum();
        let noise = resolution * f.abs().max(T::one());
        let mut step = trial_start;
        let mut accepted = None;
        for _ in 0..200 {
            for ((zn, &z), &gj) in z_new.iter_mut().zip(&zeta).zip(&g) {
                *zn = z - step * gj;
            }
            let (f_new, g_new) = kernel.eval(&z_new);
            let predicted = armijo * step * g2;
            // An Armijo comparison within the rounding level of Φ is a coin
            // flip, so there the gradient norm decides instead.
            let ok = f_new <= f - predicted - noise
                || (f_new <= f + noise && g_new.iter().map(|&v| v * v).sum::<T>() < g2);
            if ok {
                accepted = Some((f_new, g_new));
                break;
            }
            step = step * half;
        }
        let Some((f_new, g_new)) = accepted else { break };
        // Next trial step from how well the linear model predicted the decrease:
        // a ratio near 1 means the curvature along -g is small relative to 1/step.
        let linear = step * g2;
        trial_start = if linear > T::lit(100.0) * noise {
            let ratio = (f - f_new) / linear;
            if ratio >= half {
                step * two
            } else if ratio < T::lit(0.25) {
                step * half
            } else {
                step
            }
        } else {
            step
        };
        std::mem::swap(&mut zeta, &mut z_new);
        f = f_new;
        g = g_new;
        trace.push(f);
        iterations += 1;
    }

    let shift = mean(&zeta);
    zeta.iter_mut().for_each(|z| *z -= shift);
    let tau = k.tau();
    Ok(PopularitySolution {
        qprime: zeta.iter().map(|&z| (z / tau).exp()).collect(),
        zeta,
        grad_norm: norm_inf(&g),
        iterations,
        converged,
        objective: f,
        objective_trace: trace,
        tau,
    })
}

/// `max_j |q̄_j − RHS_j(q̄)| / q̄_j` for the fixed-point equation, from `log q̄`.
pub fn fixed_point_residual_log<T: Scalar>(log_q: &[T], k: &SimilarityMatrix<T>) -> Result<T> {
    let n = k.require_square()?;
    check_len(log_q, n)?;
    let tau = k.tau();
    // log Σ_{i'} exp(K_{j'i'}/τ)/q̄_{i'}
    let log_den: Vec<T> = (0..n)
        .map(|r| log_sum_exp_iter(k.row(r).iter().zip(log_q).map(|(&v, &lq)| v / tau - lq)))
        .collect();
    let mut worst = T::zero();
    for j in 0..n {
        let log_rhs = log_sum_exp_iter((0..n).map(|r| k.get(r, j) / tau - log_den[r]));
        worst = worst.max((T::one() - (log_rhs - log_q[j]).exp()).abs());
    }
    Ok(worst)
}

pub fn fixed_point_residual<T: Scalar>(qbar: &[T], k: &SimilarityMatrix<T>) -> Result<T> {
    if let Some(index) = qbar.iter().position(|&q| !(q > T::zero())) {
        return Err(Error::NonPositivePopularity { index, value: qbar[index].as_f64() });
    }
    let logs: Vec<T> = qbar.iter().map(|q| q.ln()).collect();
    fixed_point_residual_log(&logs, k)
}

/// Fixed-point residual of a solver result (uses `ζ/τ` directly to avoid overflow).
pub fn verify_fixed_point<T: Scalar>(solution: &PopularitySolution<T>, k: &SimilarityMatrix<T>) -> Result<T> {
    let logs: Vec<T> = solution.zeta.iter().map(|&z| z / solution.tau).collect();
    fixed_point_residual_log(&logs, k)
}

/// Aligns `q̃′` to the scale of `q` by `Z = max q̃′ / max q`; returns `(Z, q̃′/Z)`.
pub fn normalize_scale<T: Scalar>(qprime: &[T], q_true: &[T]) -> Result<(T, Vec<T>)> {
    if qprime.len() != q_true.len() {
        return Err(Error::DimensionMismatch { expected: q_true.len(), got: qprime.len() });
    }
    if qprime.is_empty() {
        return Err(Error::Empty("popularity vector"));
    }
    for (index, &v) in qprime.iter().chain(q_true).enumerate() {
        if !(v > T::zero() && v.is_finite()) {
            return Err(Error::NonPositivePopularity { index: index % qprime.len(), value: v.as_f64() });
        }
    }
    let max = |v: &[T]| v.iter().copied().fold(T::zero(), T::max);
    let z = max(qprime) / max(q_true);
    Ok((z, qprime.iter().map(|&v| v / z).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_k(n: usize, seed: u64) -> SimilarityMatrix<f64> {
        let mut rng = seeded(seed);
        SimilarityMatrix::from_fn(n, 0.2, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Cosine similarities of random unit vectors, the shape produced by embedding models.
    fn cosine_k(n: usize, seed: u64) -> SimilarityMatrix<f64> {
        let mut rng = seeded(seed);
        let mut unit = || {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let a: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| unit()).collect();
        SimilarityMatrix::from_fn(n, 0.2, |i, j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum()).unwrap()
    }

    fn random_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn single_point_objective_and_gradient_vanish() {
        let k = SimilarityMatrix::new(1, 1, vec![0.37_f64], 0.2).unwrap();
        for z in [-3.0_f64, 0.0, 1.5] {
            assert!(phi_objective(&[z], &k).unwrap().abs() < 1e-15);
            assert!(phi_gradient(&[z], &k).unwrap()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn constant_matrix_objective() {
        let k = SimilarityMatrix::from_fn(9, 0.2, |_, _| -0.4).unwrap();
        assert!((phi_objective(&[0.0; 9], &k).unwrap() - 0.2 * 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut worst = 0.0_f64;
        for seed in 0..6 {
            let k = random_k(6, seed);
            let z = random_vec(6, seed + 100, 0.5);
            let g = phi_gradient(&z, &k).unwrap();
            let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for j in 0..6 {
                let mut zp = z.clone();
                zp[j] += 1e-6;
                let mut zm = z.clone();
                zm[j] -= 1e-6;
                let fd = (phi_objective(&zp, &k).unwrap() - phi_objective(&zm, &k).unwrap()) / 2e-6;
                worst = worst.max((fd - g[j]).abs() / scale);
            }
        }
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn factored_kernel_agrees_with_direct_evaluation() {
        let k = random_k(12, 4);
        let z = random_vec(12, 5, 2.0);
        let kernel = ExpKernel::new(&k).unwrap();
        let (f, g) = kernel.eval(&z);
        assert!((f - phi_objective(&z, &k).unwrap()).abs() < 1e-13);
        for (a, b) in g.iter().zip(phi_gradient(&z, &k).unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_matrix_solves_to_zero() {
        let k = SimilarityMatrix::from_fn(5, 0.2, |_, _| 0.25_f64).unwrap();
        let sol = solve_popularity(&k, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(norm_inf(&sol.zeta) < 1e-12);
        assert!(sol.qprime.iter().all(|&q| (q - 1.0).abs() < 1e-10));
        assert!(verify_fixed_point(&sol, &k).unwrap() < 1e-14);
    }

    #[test]
    fn solver_converges_and_is_monotone() {
        let k = cosine_k(40, 9);
        let sol = solve_popularity(&k, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "grad norm {}", sol.grad_norm);
        assert!(sol.grad_norm <= 1e-10);
        assert!(mean(&sol.zeta).abs() < 1e-12);
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 64.0 * f64::EPSILON * w[0].abs().max(1.0));
        }
        assert!(verify_fixed_point(&sol, &k).unwrap() <= 1e-6);
    }

    #[test]
    fn uniqueness_up_to_shift() {
        let k = cosine_k(25, 31);
        let opts = SolverOptions { tol: 1e-12, ..SolverOptions::default() };
        let a = solve_popularity(&k, &opts).unwrap();
        let b = solve_popularity_from(&k, random_vec(25, 77, 3.0), &opts).unwrap();
        let gap = a.zeta.iter().zip(&b.zeta).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(gap <= 1e-8, "gap {gap}");
    }

    #[test]
    fn perturbation_is_detected() {
        let k = cosine_k(30, 2);
        let sol = solve_popularity(&k, &SolverOptions::default()).unwrap();
        let mut logs: Vec<f64> = sol.zeta.iter().map(|z| z / 0.2).collect();
        logs[3] += 0.1 / 0.2;
        assert!(fixed_point_residual_log(&logs, &k).unwrap() > 1e-3);
    }

    #[test]
    fn solution_set_is_closed_under_scaling() {
        let k = cosine_k(20, 8);
        let sol = solve_popularity(&k, &SolverOptions::default()).unwrap();
        let r = fixed_point_residual(&sol.qprime, &k).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = sol.qprime.iter().map(|q| q * c).collect();
            let rc = fixed_point_residual(&scaled, &k).unwrap();
            assert!((rc - r).abs() < 1e-12, "{r} vs {rc}");
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let k = random_k(20, 1);
        let sol = solve_popularity(&k, &SolverOptions { max_iter: 2, ..SolverOptions::default() }).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn normalize_examples() {
        let (z, q) = normalize_scale(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(z, 2.0);
        assert_eq!(q, vec![1.0, 2.0]);
        let (z, _) = normalize_scale(&[3.0, 5.0], &[3.0, 5.0]).unwrap();
        assert_eq!(z, 1.0);
    }

    #[test]
    fn single_precision_solver_runs() {
        let k64 = cosine_k(10, 1);
        let k = SimilarityMatrix::<f32>::from_fn(10, 0.2, |i, j| k64.get(i, j) as f32).unwrap();
        let sol = solve_popularity(&k, &SolverOptions { tol: 1e-5, ..SolverOptions::default() }).unwrap();
        assert!(sol.converged);
    }

    proptest! {
        #[test]
        fn shift_invariance_and_lower_bound(seed in 0u64..5000, c in -5.0f64..5.0) {
            let k = random_k(7, seed);
            let z = random_vec(7, seed ^ 0xabc, 4.0);
            let zc: Vec<f64> = z.iter().map(|v| v + c).collect();
            let f = phi_objective(&z, &k).unwrap();
            prop_assert!((f - phi_objective(&zc, &k).unwrap()).abs() < 1e-10);
            prop_assert!(f >= -2.0);
            let g = phi_gradient(&z, &k).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn objective_is_convex(seed in 0u64..5000, lambda in 0.01f64..0.99) {
            let k = random_k(6, seed);
            let a = random_vec(6, seed + 1, 3.0);
            let b = random_vec(6, seed + 2, 3.0);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let lhs = phi_objective(&mix, &k).unwrap();
            let rhs = lambda * phi_objective(&a, &k).unwrap() + (1.0 - lambda) * phi_objective(&b, &k).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }
    }
}
