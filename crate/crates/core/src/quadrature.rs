//! Gauss–Legendre rules on intervals and tensor products on rectangles.

use crate::scalar::Scalar;

/// Nodes and weights of the `order`-point Gauss–Legendre rule on `[-1, 1]`,
/// computed in `f64` by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "quadrature order must be positive");
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess for the i-th root from the right.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        weights[i] = w;
        nodes[n - 1 - i] = -x;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product Gauss–Legendre rule on `[a1, b1] × [a2, b2]`.
#[derive(Debug, Clone)]
pub struct RectangleRule<T> {
    points: Vec<[T; 2]>,
    weights: Vec<T>,
    area: T,
}

impl<T: Scalar> RectangleRule<T> {
    pub fn new(order: usize, lo: [f64; 2], hi: [f64; 2]) -> Self {
        let (x, w) = gauss_legendre(order);
        let half = [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0];
        let mid = [(hi[0] + lo[0]) / 2.0, (hi[1] + lo[1]) / 2.0];
        let mut points = Vec::with_capacity(order * order);
        let mut weights = Vec::with_capacity(order * order);
        for (xi, wi) in x.iter().zip(&w) {
            for (xj, wj) in x.iter().zip(&w) {
                points.push([T::lit(mid[0] + half[0] * xi), T::lit(mid[1] + half[1] * xj)]);
                weights.push(T::lit(wi * wj * half[0] * half[1]));
            }
        }
        let area = T::lit((hi[0] - lo[0]) * (hi[1] - lo[1]));
        Self { points, weights, area }
    }

    /// The unit square `[0,1]²`.
    pub fn unit_square(order: usize) -> Self {
        Self::new(order, [0.0, 0.0], [1.0, 1.0])
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    pub fn area(&self) -> T {
        self.area
    }

    /// Weighted average of `f` over the rectangle; exact for constants.
    pub fn average<F: FnMut([T; 2]) -> T>(&self, f: F) -> T {
        let total: T = self.weights.iter().copied().sum();
        self.integrate(f) / total
    }

    pub fn integrate<F: FnMut([T; 2]) -> T>(&self, mut f: F) -> T {
        self.points.iter().zip(&self.weights).map(|(&p, &w)| w * f(p)).sum()
    }

    /// Integrate a function that may fail; the first error aborts.
    pub fn try_integrate<E, F>(&self, mut f: F) -> Result<T, E>
    where
        F: FnMut([T; 2]) -> Result<T, E>,
    {
        let mut total = T::zero();
        for (&p, &w) in self.points.iter().zip(&self.weights) {
            total += w * f(p)?;
        }
        Ok(total)
    }
}
