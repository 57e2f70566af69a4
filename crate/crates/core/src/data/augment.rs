use ndarray::Array4;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ImageBatch;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding before the random crop.
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            flip_prob: 0.5,
        }
    }
}

/// Per-sample random horizontal flip followed by a random crop of the
/// zero-padded image back to the original size.
pub fn augment<T: Scalar>(batch: &ImageBatch<T>, seed: u64, cfg: &AugmentConfig) -> ImageBatch<T> {
    let (b, c, h, w) = batch.pixels.dim();
    let mut r = rng::stream(seed, rng::AUGMENT, &[]);
    let pad = cfg.pad as i64;
    let mut out = Array4::zeros((b, c, h, w));
    for i in 0..b {
        let flip = cfg.flip_prob > 0.0 && r.random_bool(cfg.flip_prob.min(1.0));
        let dy = if pad > 0 { r.random_range(-pad..=pad) as isize } else { 0 };
        let dx = if pad > 0 { r.random_range(-pad..=pad) as isize } else { 0 };
        for ci in 0..c {
            for yi in 0..h as isize {
                let sy = yi + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xi in 0..w as isize {
                    let sx = xi + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src_x = if flip { w as isize - 1 - sx } else { sx };
                    out[[i, ci, yi as usize, xi as usize]] = batch.pixels[[i, ci, sy as usize, src_x as usize]];
                }
            }
        }
    }
    ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> ImageBatch<f32> {
        let px = Array4::from_shape_fn((3, 3, 32, 32), |(b, c, y, x)| ((b * 7 + c * 3 + y * 32 + x) % 251) as f32 / 251.0);
        ImageBatch {
            pixels: px,
            labels: vec![0, 1, 2],
        }
    }

    #[test]
    fn identity_configuration() {
        let b = batch();
        let cfg = AugmentConfig { pad: 0, flip_prob: 0.0 };
        assert_eq!(augment(&b, 9, &cfg), b);
    }

    #[test]
    fn deterministic_under_seed() {
        let b = batch();
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&b, 4, &cfg), augment(&b, 4, &cfg));
        assert_ne!(augment(&b, 4, &cfg), augment(&b, 5, &cfg));
    }

    #[test]
    fn crop_is_an_index_shift_of_at_most_the_padding() {
        let b = batch();
        let cfg = AugmentConfig { pad: 4, flip_prob: 0.0 };
        let out = augment(&b, 11, &cfg);
        assert_eq!(out.pixels.dim(), b.pixels.dim());
        for i in 0..3 {
            // find the shift that reproduces the output from the input
            let mut found = false;
            'search: for dy in -4isize..=4 {
                for dx in -4isize..=4 {
                    let ok = (0..3).all(|c| {
                        (0..32isize).all(|y| {
                            (0..32isize).all(|x| {
                                let (sy, sx) = (y + dy, x + dx);
                                let expect = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                                    b.pixels[[i, c, sy as usize, sx as usize]]
                                } else {
                                    0.0
                                };
                                out.pixels[[i, c, y as usize, x as usize]] == expect
                            })
                        })
                    });
                    if ok {
                        found = true;
                        break 'search;
                    }
                }
            }
            assert!(found, "sample {i} is not a shift within the padding");
        }
        assert!(out.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
