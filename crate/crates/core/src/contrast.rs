//! Image contrast score and contrast-sorted dataset bins.
//!
//! The score looks at the 20% of pixels that deviate most from their
//! channel means and reports the intensity variance over those pixels.

use ndarray::{ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TOP_FRACTION: f64 = 0.2;

/// Contrast of one `[C, H, W]` image. With `pooled`, the variance is taken
/// over all selected values of all channels instead of per channel.
pub fn contrast_score<T: Scalar>(image: ArrayView3<T>, pooled: bool) -> Result<f64> {
    let (c, h, w) = image.dim();
    let n = h * w;
    if c == 0 || n == 0 {
        return Err(Error::InvalidArgument("contrast of an empty image".into()));
    }
    let planes: Vec<Vec<f64>> = image
        .axis_iter(Axis(0))
        .map(|p| p.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let means: Vec<f64> = planes.iter().map(|p| p.iter().sum::<f64>() / n as f64).collect();
    let deviation: Vec<f64> = (0..n)
        .map(|j| planes.iter().zip(&means).map(|(p, m)| (p[j] - m).abs()).sum::<f64>() / c as f64)
        .collect();
    let k = ((TOP_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // descending deviation, ties by pixel index
    order.sort_by(|&a, &b| deviation[b].total_cmp(&deviation[a]).then(a.cmp(&b)));
    let selected = &order[..k];
    // Welford's update keeps a run of identical values at exactly zero
    let variance = |vals: &mut dyn Iterator<Item = f64>| {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for x in vals {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        m2 / n
    };
    Ok(if pooled {
        variance(&mut planes.iter().flat_map(|p| selected.iter().map(move |&j| p[j])))
    } else {
        planes
            .iter()
            .map(|p| variance(&mut selected.iter().map(|&j| p[j])))
            .sum::<f64>()
            / c as f64
    })
}

pub fn contrast_scores<T: Scalar>(set: &ImageSet<T>, pooled: bool) -> Result<Vec<f64>> {
    set.pixels
        .axis_iter(Axis(0))
        .map(|img| contrast_score(img, pooled))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastBin {
    pub bin_index: usize,
    pub sample_indices: Vec<usize>,
    pub mean_contrast: f64,
}

/// Stable ascending sort by score, cut into `n_bins` contiguous bins whose
/// sizes differ by at most one (larger bins first).
pub fn bin_by_contrast(scores: &[f64], n_bins: usize) -> Result<Vec<ContrastBin>> {
    if n_bins < 1 {
        return Err(Error::InvalidArgument("at least one contrast bin is required".into()));
    }
    if scores.len() < n_bins {
        return Err(Error::InvalidArgument(format!(
            "{} images cannot fill {n_bins} bins",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let base = scores.len() / n_bins;
    let extra = scores.len() % n_bins;
    let mut start = 0;
    Ok((0..n_bins)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let sample_indices = order[start..start + len].to_vec();
            start += len;
            let mean_contrast = sample_indices.iter().map(|&i| scores[i]).sum::<f64>() / len as f64;
            ContrastBin {
                bin_index: b,
                sample_indices,
                mean_contrast,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn random_image(seed: u64) -> Array3<f64> {
        let mut r = crate::rng::stream(seed, "test", &[]);
        Array3::from_shape_simple_fn((3, 6, 5), || r.random_range(0.2..0.8))
    }

    #[test]
    fn constant_image_scores_zero() {
        let img = Array3::from_elem((3, 4, 4), 0.37f64);
        assert_eq!(contrast_score(img.view(), false).unwrap(), 0.0);
        assert_eq!(contrast_score(img.view(), true).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_hand_trace() {
        let img = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(contrast_score(img.view(), false).unwrap(), 0.0);
    }

    #[test]
    fn deviation_scaling_is_quadratic() {
        let img = random_image(1);
        let base = contrast_score(img.view(), false).unwrap();
        for c in [0.5, 2.0] {
            let mut scaled = img.clone();
            for mut plane in scaled.axis_iter_mut(Axis(0)) {
                let m = plane.mean().unwrap();
                plane.mapv_inplace(|v| m + c * (v - m));
            }
            let s = contrast_score(scaled.view(), false).unwrap();
            assert!((s - c * c * base).abs() < 1e-9, "c = {c}");
        }
    }

    #[test]
    fn even_split_and_ties() {
        let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let bins = bin_by_contrast(&scores, 10).unwrap();
        assert!(bins.iter().all(|b| b.sample_indices.len() == 10));
        let ties = bin_by_contrast(&[1.0; 7], 3).unwrap();
        assert_eq!(ties[0].sample_indices, vec![0, 1, 2]);
        assert_eq!(ties[2].sample_indices, vec![5, 6]);
        assert!(bin_by_contrast(&scores, 0).is_err());
        assert!(bin_by_contrast(&scores[..3], 4).is_err());
        assert!(contrast_score(Array3::<f64>::zeros((3, 0, 4)).view(), false).is_err());
    }

    proptest! {
        #[test]
        fn bins_partition_and_are_sorted(scores in proptest::collection::vec(0.0f64..1.0, 10..200), k in 1usize..10) {
            let bins = bin_by_contrast(&scores, k).unwrap();
            let mut all: Vec<usize> = bins.iter().flat_map(|b| b.sample_indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            for w in bins.windows(2) {
                let hi = w[0].sample_indices.iter().map(|&i| scores[i]).fold(f64::MIN, f64::max);
                let lo = w[1].sample_indices.iter().map(|&i| scores[i]).fold(f64::MAX, f64::min);
                prop_assert!(hi <= lo);
                prop_assert!(w[0].mean_contrast <= w[1].mean_contrast);
            }
        }

        #[test]
        fn permutation_and_shift_invariance(seed in 0u64..500, shift in -0.15f64..0.15) {
            let img = random_image(seed);
            let base = contrast_score(img.view(), false).unwrap();
            let shifted = img.mapv(|v| v + shift);
            prop_assert!((contrast_score(shifted.view(), false).unwrap() - base).abs() < 1e-12);
            // reverse the spatial order of every channel
            let flipped = img.slice(ndarray::s![.., ..;-1, ..;-1]).to_owned();
            prop_assert!((contrast_score(flipped.view(), false).unwrap() - base).abs() < 1e-12);
        }
    }
}
