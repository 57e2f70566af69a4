//! Binary synthetic task with one label-correlated "robust" feature and
//! `d` weakly correlated Gaussian features, with closed forms for the
//! accuracy of the canonical classifiers on it.
//!
//! Labels are `±1`. Feature 0 equals `y` with probability `p` (else `−y`);
//! features `1..=d` are drawn from `N(α·y, 1)`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDistribution {
    pub p: f64,
    pub alpha: f64,
    pub d: usize,
}

impl SyntheticDistribution {
    pub fn new(p: f64, alpha: f64, d: usize) -> Result<Self> {
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("p must lie in (0.5, 1], got {p}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and nonnegative, got {alpha}")));
        }
        if d == 0 {
            return Err(Error::InvalidArgument("d must be positive".into()));
        }
        Ok(Self { p, alpha, d })
    }

    pub fn dim(&self) -> usize {
        self.d + 1
    }

    /// `n` i.i.d. samples as `(X [n, d+1], y [n])` with `y ∈ {−1, +1}`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Array1<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        let mut r = rng::stream(seed, "theory", &[]);
        let mut x = Array2::zeros((n, self.dim()));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let yi = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            y[i] = yi;
            x[[i, 0]] = if r.random_bool(self.p) { yi } else { -yi };
            for j in 1..=self.d {
                let z: f64 = StandardNormal.sample(&mut r);
                x[[i, j]] = self.alpha * yi + z;
            }
        }
        Ok((x, y))
    }
}

/// `sign(w·x + bias)`, with a zero score counted as incorrect.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub w: Array1<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn new(w: Array1<f64>, bias: f64) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::Numeric("classifier weights must be finite".into()));
        }
        Ok(Self { w, bias })
    }

    /// Uniform weight `1/d` on the weak features, none on feature 0.
    pub fn spurious(dist: &SyntheticDistribution) -> Self {
        let mut w = Array1::from_elem(dist.dim(), 1.0 / dist.d as f64);
        w[0] = 0.0;
        Self { w, bias: 0.0 }
    }

    /// `sign(x_0)`.
    pub fn oracle(dist: &SyntheticDistribution) -> Self {
        let mut w = Array1::zeros(dist.dim());
        w[0] = 1.0;
        Self { w, bias: 0.0 }
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array1<f64> {
        x.dot(&self.w) + self.bias
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let s = self.scores(x);
        s.iter().zip(y).filter(|(s, y)| **s * **y > 0.0).count() as f64 / y.len() as f64
    }

    /// Worst-case ℓ∞ perturbation of radius `eps`: `δ = −y·eps·sign(w)`.
    pub fn linf_attack(&self, y: &Array1<f64>, eps: f64) -> Array2<f64> {
        let dir = self.w.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        let mut delta = Array2::zeros((y.len(), self.w.len()));
        for (mut row, &yi) in delta.axis_iter_mut(Axis(0)).zip(y) {
            row.assign(&(&dir * (-yi * eps)));
        }
        delta
    }

    pub fn robust_accuracy(&self, x: &Array2<f64>, y: &Array1<f64>, eps: f64) -> f64 {
        let adv = x + &self.linf_attack(y, eps);
        self.accuracy(&adv, y)
    }
}

/// Accuracy of [`LinearClassifier::spurious`]: `Φ(α·√d)`.
pub fn spurious_classifier_accuracy(dist: &SyntheticDistribution) -> f64 {
    normal_cdf(dist.alpha * (dist.d as f64).sqrt())
}

/// ℓ∞ robust accuracy of [`LinearClassifier::spurious`]: `Φ((α − ε)·√d)`.
pub fn spurious_classifier_robust_accuracy(dist: &SyntheticDistribution, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be nonnegative, got {eps}")));
    }
    Ok(normal_cdf((dist.alpha - eps) * (dist.d as f64).sqrt()))
}

/// Accuracy of [`LinearClassifier::oracle`], which is `p`.
pub fn oracle_classifier_accuracy(dist: &SyntheticDistribution) -> f64 {
    dist.p
}

/// `|x_0| = 1`, so the oracle keeps accuracy `p` until the radius reaches 1,
/// where the score of every sample can be driven to zero or below.
pub fn oracle_classifier_robust_accuracy(dist: &SyntheticDistribution, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be nonnegative, got {eps}")));
    }
    Ok(if eps < 1.0 { dist.p } else { 0.0 })
}

/// Upper bound `p·γ/(1−p)` on the robust accuracy (at radius `≥ 2α`) of any
/// classifier with standard error `γ`.
pub fn tsipras_bound(p: f64, gamma: f64) -> Result<f64> {
    if p >= 1.0 {
        return Err(Error::Numeric("bound is undefined at p = 1".into()));
    }
    if !(p > 0.5) {
        return Err(Error::InvalidArgument(format!("p must lie in (0.5, 1), got {p}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(p * gamma / (1.0 - p))
}

#[derive(Clone, Copy, Debug)]
pub struct ErmConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the gradient's ℓ2 norm falls below this.
    pub tol: f64,
    pub l2: f64,
}

impl Default for ErmConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iters: 2000,
            tol: 1e-6,
            l2: 0.0,
        }
    }
}

/// Logistic regression fitted by full-batch gradient descent.
pub fn train_logistic(x: &Array2<f64>, y: &Array1<f64>, cfg: &ErmConfig) -> Result<LinearClassifier> {
    let (n, d) = x.dim();
    if n == 0 || n != y.len() {
        return Err(Error::Shape(format!("{n} samples but {} labels", y.len())));
    }
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    for _ in 0..cfg.max_iters {
        let margins = (x.dot(&w) + b) * y;
        // d/dm log(1 + e^{-m}) = −σ(−m)
        let coef: Array1<f64> = margins
            .iter()
            .zip(y)
            .map(|(&m, &yi)| -yi / (1.0 + m.exp()) / n as f64)
            .collect();
        let gw = x.t().dot(&coef) + &(&w * cfg.l2);
        let gb = coef.sum();
        let norm = (gw.dot(&gw) + gb * gb).sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("logistic regression diverged".into()));
        }
        if norm < cfg.tol {
            break;
        }
        w.scaled_add(-cfg.learning_rate, &gw);
        b -= cfg.learning_rate * gb;
    }
    LinearClassifier::new(w, b)
}

/// Fractions of the total ℓ1 mass of the ℓ∞ attack at radius `eps`, over
/// `n` fresh samples, on feature 0 and on the weak features.
pub fn perturbation_mass_profile(
    classifier: &LinearClassifier,
    dist: &SyntheticDistribution,
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if classifier.w.len() != dist.dim() {
        return Err(Error::Shape("classifier dimension does not match distribution".into()));
    }
    let (_, y) = dist.sample(n, seed)?;
    let delta = classifier.linf_attack(&y, eps);
    let first: f64 = delta.column(0).iter().map(|v| v.abs()).sum();
    let rest: f64 = delta.slice(s![.., 1..]).iter().map(|v| v.abs()).sum();
    let total = first + rest;
    if total == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((first / total, rest / total))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integral of the standard normal density from a far
    /// left tail to `z`.
    fn cdf_oracle(z: f64) -> f64 {
        let a = -12.0;
        let n = 20_000;
        let h = (z - a) / n as f64;
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = f(a) + f(z);
        for k in 1..n {
            acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for z in [-3.0, -1.0, 0.0, 0.3, 3.0] {
            assert!((normal_cdf(z) - cdf_oracle(z)).abs() < 1e-10, "z = {z}");
        }
    }

    #[test]
    fn degenerate_bernoulli_copies_the_label() {
        let dist = SyntheticDistribution::new(1.0, 0.5, 5).unwrap();
        let (x, y) = dist.sample(500, 1).unwrap();
        assert!(x.column(0).iter().zip(&y).all(|(a, b)| a == b));
    }

    #[test]
    fn empirical_moments() {
        let dist = SyntheticDistribution::new(0.9, 0.0, 3).unwrap();
        let (x, y) = dist.sample(100_000, 2).unwrap();
        let agree = x.column(0).iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / 1e5;
        assert!((agree - 0.9).abs() < 0.01);
        let corr = x.column(1).dot(&y) / 1e5;
        assert!(corr.abs() < 0.02);
    }

    #[test]
    fn closed_form_examples() {
        let d = 100;
        let alpha = 3.0 / (d as f64).sqrt();
        let dist = SyntheticDistribution::new(0.9, alpha, d).unwrap();
        let acc = spurious_classifier_accuracy(&dist);
        assert!((acc - cdf_oracle(3.0)).abs() < 1e-10 && acc > 0.99);
        let rob = spurious_classifier_robust_accuracy(&dist, 2.0 * alpha).unwrap();
        assert!((rob - cdf_oracle(-3.0)).abs() < 1e-10 && rob < 0.01);
        assert_eq!(spurious_classifier_robust_accuracy(&dist, 0.0).unwrap(), acc);
        let zero = SyntheticDistribution::new(0.9, 0.0, d).unwrap();
        assert_eq!(spurious_classifier_accuracy(&zero), 0.5);
        assert_eq!(oracle_classifier_accuracy(&dist), 0.9);
        assert!((tsipras_bound(0.9, 0.01).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(tsipras_bound(0.9, 0.0).unwrap(), 0.0);
        assert!(matches!(tsipras_bound(1.0, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn mass_profiles_of_the_canonical_classifiers() {
        let dist = SyntheticDistribution::new(0.9, 0.3, 100).unwrap();
        let (f, s) = perturbation_mass_profile(&LinearClassifier::spurious(&dist), &dist, 0.6, 100, 0).unwrap();
        assert_eq!((f, s), (0.0, 1.0));
        let (f, s) = perturbation_mass_profile(&LinearClassifier::oracle(&dist), &dist, 0.6, 100, 0).unwrap();
        assert_eq!((f, s), (1.0, 0.0));
    }

    #[test]
    fn oracle_robustness_holds_below_unit_radius() {
        let dist = SyntheticDistribution::new(0.8, 0.3, 10).unwrap();
        let (x, y) = dist.sample(4000, 3).unwrap();
        let o = LinearClassifier::oracle(&dist);
        for eps in [0.0, 0.5, 0.99, 1.0, 1.5] {
            let closed = oracle_classifier_robust_accuracy(&dist, eps).unwrap();
            let clean = o.accuracy(&x, &y);
            let mc = o.robust_accuracy(&x, &y, eps);
            assert_eq!(mc, if eps < 1.0 { clean } else { 0.0 });
            assert!((mc - closed).abs() < 0.03);
        }
    }

    #[test]
    fn robust_accuracy_is_non_increasing_in_eps() {
        let dist = SyntheticDistribution::new(0.9, 0.3, 100).unwrap();
        let mut prev = 1.0;
        for k in 0..=20 {
            let r = spurious_classifier_robust_accuracy(&dist, k as f64 * 0.05).unwrap();
            assert!(r <= prev);
            prev = r;
        }
    }
}
