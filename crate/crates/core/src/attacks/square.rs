use ndarray::{Array2, Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{clamp_to_pixels, project_inplace, Norm, Perturbation, ThreatModel};
use crate::data::ImageBatch;
use crate::error::Result;
use crate::nn::Differentiable;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareConfig {
    pub n_queries: usize,
    pub p_init: f64,
    pub seed: u64,
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            n_queries: 500,
            p_init: 0.8,
            seed: 0,
        }
    }
}

/// Fraction of pixels covered by a proposal at iteration `k`, halved at
/// fixed absolute iteration counts so that a run with budget `q` is a
/// prefix of any run with a larger budget.
fn patch_fraction(p_init: f64, k: usize) -> f64 {
    const HALVINGS: [usize; 9] = [10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000];
    let n = HALVINGS.iter().filter(|&&h| k > h).count();
    p_init / f64::powi(2.0, n as i32)
}

/// `z_y − max_{j≠y} z_j`; negative once the sample is misclassified.
fn margins<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Vec<T> {
    logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| {
            let other = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .fold(T::neg_infinity(), |m, (_, v)| m.max(*v));
            row[y] - other
        })
        .collect()
}

fn fooled<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Vec<bool> {
    crate::nn::loss::argmax_rows(logits)
        .into_iter()
        .zip(labels)
        .map(|(p, &y)| p != y)
        .collect()
}

/// Gradient-free random search on the margin loss. The first query is a
/// vertical-stripe initialisation at `±ε`; each later query proposes
/// re-drawing one square patch per sample and keeps it only if the margin
/// strictly decreases. Samples already misclassified are left alone.
pub fn square_attack<T: Scalar, M: Differentiable<T>>(
    model: &M,
    batch: &ImageBatch<T>,
    threat: &ThreatModel,
    cfg: &SquareConfig,
) -> Result<Perturbation<T>> {
    threat.validate()?;
    let x = &batch.pixels;
    let (b, c, h, w) = x.dim();
    let mut r = rng::stream(cfg.seed, "square", &[]);
    let eps = T::lit(threat.eps);
    let mut delta = Array4::zeros(x.dim());
    for i in 0..b {
        for ci in 0..c {
            for xi in 0..w {
                let v = if r.random_bool(0.5) { eps } else { -eps };
                delta.slice_mut(ndarray::s![i, ci, .., xi]).fill(v);
            }
        }
    }
    project_inplace(&mut delta, threat);
    clamp_to_pixels(&mut delta, x);
    if cfg.n_queries <= 1 {
        return Ok(Perturbation { delta });
    }
    let logits = model.logits(&(x + &delta))?;
    let mut best = margins(&logits, &batch.labels);
    let mut done = fooled(&logits, &batch.labels);
    for k in 1..cfg.n_queries {
        let frac = patch_fraction(cfg.p_init, k);
        let side = ((frac * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
        let mut proposal = delta.clone();
        // every sample consumes the same draws whether or not it is active
        for i in 0..b {
            let y0 = r.random_range(0..=h - side);
            let x0 = r.random_range(0..=w - side);
            let values: Vec<bool> = (0..c).map(|_| r.random_bool(0.5)).collect();
            if done[i] {
                continue;
            }
            for (ci, &up) in values.iter().enumerate() {
                let mag = match threat.norm {
                    Norm::Linf => eps,
                    Norm::L2 => eps / T::lit(((side * side * c) as f64).sqrt()),
                };
                let v = if up { mag } else { -mag };
                proposal
                    .slice_mut(ndarray::s![i, ci, y0..y0 + side, x0..x0 + side])
                    .fill(v);
            }
        }
        project_inplace(&mut proposal, threat);
        clamp_to_pixels(&mut proposal, x);
        let logits = model.logits(&(x + &proposal))?;
        let m = margins(&logits, &batch.labels);
        let f = fooled(&logits, &batch.labels);
        for i in 0..b {
            if !done[i] && m[i] < best[i] {
                best[i] = m[i];
                done[i] = f[i];
                delta.index_axis_mut(Axis(0), i).assign(&proposal.index_axis(Axis(0), i));
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(Perturbation { delta })
}
