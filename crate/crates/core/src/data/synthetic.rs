use ndarray::{Array3, Array4};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::Result;
use crate::rng;
use crate::scalar::Scalar;
use crate::theory::SyntheticDistribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Each class owns a smooth random colour pattern; images are the
    /// pattern plus brightness jitter and pixel noise.
    Templates { amplitude: f64, noise: f64 },
    /// The binary theory distribution laid out as an image: pixel `i` is
    /// `0.5 + scale·x_i` clamped to `[0, 1]`, with `d + 1 = C·H·W`.
    Tsipras { p: f64, alpha: f64, scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Templates {
                amplitude: 0.2,
                noise: 0.1,
            },
            n_classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            n_pool: 256,
            n_test: 128,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            v.push("data.synthetic image dimensions must be positive".into());
        }
        match self.kind {
            SyntheticKind::Templates { amplitude, noise } => {
                if self.n_classes < 2 {
                    v.push("data.synthetic.n_classes must be at least 2".into());
                }
                if !(amplitude >= 0.0 && noise >= 0.0) {
                    v.push("data.synthetic amplitude and noise must be nonnegative".into());
                }
            }
            SyntheticKind::Tsipras { p, alpha, .. } => {
                if self.n_classes != 2 {
                    v.push("data.synthetic.n_classes must be 2 for the tsipras layout".into());
                }
                if !(p > 0.5 && p <= 1.0 && alpha >= 0.0) {
                    v.push("data.synthetic tsipras needs p in (0.5, 1] and alpha >= 0".into());
                }
                if self.channels * self.height * self.width < 2 {
                    v.push("data.synthetic tsipras layout needs at least two pixels".into());
                }
            }
        }
        v
    }

    /// Returns `(pool, test)`.
    pub fn generate<T: Scalar>(&self) -> Result<(ImageSet<T>, ImageSet<T>)> {
        let pool = self.draw(self.n_pool, 0)?;
        let test = self.draw(self.n_test, 1)?;
        Ok((pool, test))
    }

    fn draw<T: Scalar>(&self, n: usize, split: u64) -> Result<ImageSet<T>> {
        let (c, h, w) = (self.channels, self.height, self.width);
        match self.kind {
            SyntheticKind::Templates { amplitude, noise } => {
                let templates = self.templates(amplitude);
                let mut r = rng::stream(self.seed, rng::DATA, &[split]);
                let mut labels = Vec::with_capacity(n);
                let mut px = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    let y = r.random_range(0..self.n_classes);
                    labels.push(y);
                    let jitter: f64 = r.random_range(-0.1..0.1);
                    for ((ci, yi, xi), &t) in templates[y].indexed_iter() {
                        let z: f64 = StandardNormal.sample(&mut r);
                        px[[i, ci, yi, xi]] = T::lit((0.5 + jitter + t + noise * z).clamp(0.0, 1.0));
                    }
                }
                ImageSet::new(px, labels, self.n_classes)
            }
            SyntheticKind::Tsipras { p, alpha, scale } => {
                let dist = SyntheticDistribution::new(p, alpha, c * h * w - 1)?;
                let (x, y) = dist.sample(n.max(1), rng::derive_seed(self.seed, rng::DATA, &[split]))?;
                let mut px = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for (j, v) in px.index_axis_mut(ndarray::Axis(0), i).iter_mut().enumerate() {
                        *v = T::lit((0.5 + scale * x[[i, j]]).clamp(0.0, 1.0));
                    }
                }
                let labels = y.iter().take(n).map(|&v| usize::from(v > 0.0)).collect();
                ImageSet::new(px, labels, 2)
            }
        }
    }

    fn templates(&self, amplitude: f64) -> Vec<Array3<f64>> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut r = rng::stream(self.seed, rng::DATA, &[u64::MAX - 1]);
        (0..self.n_classes)
            .map(|_| {
                let mut t = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for _ in 0..3 {
                        let fx = r.random_range(0.0..3.0);
                        let fy = r.random_range(0.0..3.0);
                        let phase = r.random_range(0.0..std::f64::consts::TAU);
                        let a: f64 = r.random_range(0.3..1.0);
                        for yi in 0..h {
                            for xi in 0..w {
                                let arg = std::f64::consts::TAU * (fx * xi as f64 / w as f64 + fy * yi as f64 / h as f64);
                                t[[ci, yi, xi]] += a * (arg + phase).sin();
                            }
                        }
                    }
                }
                let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                t.mapv(|v| amplitude * v / peak)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_deterministic_and_in_range() {
        let spec = SyntheticSpec::default();
        let (a, ta) = spec.generate::<f32>().unwrap();
        let (b, _) = spec.generate::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert_eq!(ta.len(), 128);
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(a.labels.iter().all(|&y| y < 4));
    }

    #[test]
    fn tsipras_layout_encodes_the_strong_feature_in_pixel_zero() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Tsipras {
                p: 1.0,
                alpha: 0.1,
                scale: 0.1,
            },
            n_classes: 2,
            channels: 1,
            height: 4,
            width: 4,
            n_pool: 50,
            n_test: 10,
            seed: 2,
        };
        let (pool, _) = spec.generate::<f64>().unwrap();
        for (i, &y) in pool.labels.iter().enumerate() {
            let expect = if y == 1 { 0.6 } else { 0.4 };
            assert!((pool.pixels[[i, 0, 0, 0]] - expect).abs() < 1e-12);
        }
    }
}
