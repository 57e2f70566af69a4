//! Dataset ingestion, splitting, augmentation and batching.
//!
//! Pixels are kept in raw `[0, 1]` units so that an ℓ∞ radius such as
//! `8/255` means the same thing in image space and in model-input space.

mod augment;
mod cifar;
mod folder;
mod synthetic;

use std::path::PathBuf;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use cifar::{read_cifar10_file, write_byte_records, write_cifar10_file, CIFAR10_CLASSES, CIFAR10_RECORD_BYTES};
pub use folder::read_image_folder;
pub use synthetic::{SyntheticKind, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// A batch of images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub pixels: Array4<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Array4<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if pixels.dim().0 == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one image".into()));
        }
        if pixels.dim().0 != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                pixels.dim().0,
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {y} >= class count {n_classes}")));
        }
        if pixels.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An in-memory labelled image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet<T> {
    pub pixels: Array4<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(pixels: Array4<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if pixels.dim().0 != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", pixels.dim().0, labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {y} >= class count {n_classes}")));
        }
        Ok(Self {
            pixels,
            labels,
            n_classes,
        })
    }

    pub fn empty_like(&self) -> Self {
        let (_, c, h, w) = self.pixels.dim();
        Self {
            pixels: Array4::zeros((0, c, h, w)),
            labels: Vec::new(),
            n_classes: self.n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_dim(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.pixels.dim();
        (c, h, w)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch<T>> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(ImageBatch {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Index groups of at most `batch_size`, in order or shuffled by `seed`.
    pub fn batch_indices(&self, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut rng::stream(seed, rng::DATA, &[]));
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batches(&self, batch_size: usize, shuffle: Option<u64>) -> impl Iterator<Item = ImageBatch<T>> + '_ {
        self.batch_indices(batch_size, shuffle)
            .into_iter()
            .map(move |idx| self.batch(&idx).expect("non-empty chunk"))
    }

    pub fn cast<U: Scalar>(&self) -> ImageSet<U> {
        ImageSet {
            pixels: self.pixels.mapv(|v| U::lit(v.to_f64_lossy())),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar10Binary,
    ImageFolder,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub root_path: PathBuf,
    /// Training images kept after the validation split; `None` keeps all.
    pub n_train: Option<usize>,
    pub n_val: usize,
    pub class_balanced_val: bool,
    /// Leading test images to keep; `None` keeps the full test set.
    pub n_test: Option<usize>,
    pub seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root_path: PathBuf::new(),
            n_train: None,
            n_val: 0,
            class_balanced_val: true,
            n_test: None,
            seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.source != DataSource::Synthetic && self.root_path.as_os_str().is_empty() {
            v.push("data.root_path is required for non-synthetic sources".into());
        }
        if self.source == DataSource::Synthetic {
            v.extend(self.synthetic.violations());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: ImageSet<T>,
    pub val: ImageSet<T>,
    pub test: ImageSet<T>,
}

/// Deterministic train/validation split of a labelled pool.
///
/// With `balanced`, `n_val` is divided evenly over classes (any remainder
/// goes to the lowest class indices). The remaining indices, in a seeded
/// random order, form the training pool truncated to `n_train`.
pub fn split_indices(
    labels: &[usize],
    n_classes: usize,
    n_train: Option<usize>,
    n_val: usize,
    balanced: bool,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_val > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "n_val = {n_val} exceeds pool of {} images",
            labels.len()
        )));
    }
    let mut r = rng::stream(seed, rng::DATA, &[u64::MAX]);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut r);
    let mut is_val = vec![false; labels.len()];
    if balanced && n_val > 0 {
        let base = n_val / n_classes;
        let extra = n_val % n_classes;
        for c in 0..n_classes {
            let want = base + usize::from(c < extra);
            let picked: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == c).take(want).collect();
            if picked.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has only {} images, {want} requested for validation",
                    picked.len()
                )));
            }
            for i in picked {
                is_val[i] = true;
            }
        }
    } else {
        for &i in order.iter().take(n_val) {
            is_val[i] = true;
        }
    }
    let mut val: Vec<usize> = (0..labels.len()).filter(|&i| is_val[i]).collect();
    val.sort_unstable();
    let rest: Vec<usize> = order.into_iter().filter(|&i| !is_val[i]).collect();
    let n = n_train.unwrap_or(rest.len()).min(rest.len());
    Ok((rest[..n].to_vec(), val))
}

pub fn load_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Splits<T>> {
    let (pool, test) = match spec.source {
        DataSource::Cifar10Binary => cifar::load_cifar10(&spec.root_path)?,
        DataSource::ImageFolder => folder::load_image_folder(&spec.root_path)?,
        DataSource::Synthetic => spec.synthetic.generate()?,
    };
    let (train_idx, val_idx) = split_indices(
        &pool.labels,
        pool.n_classes,
        spec.n_train,
        spec.n_val,
        spec.class_balanced_val,
        spec.seed,
    )?;
    let test = match spec.n_test {
        Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>()),
        _ => test,
    };
    Ok(Splits {
        train: pool.subset(&train_idx),
        val: pool.subset(&val_idx),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_validation_split() {
        let labels: Vec<usize> = (0..5000).map(|i| i % 10).collect();
        let (train, val) = split_indices(&labels, 10, None, 1000, true, 3).unwrap();
        let mut counts = [0; 10];
        for &i in &val {
            counts[labels[i]] += 1;
        }
        assert_eq!(counts, [100; 10]);
        assert_eq!(train.len(), 4000);
    }

    #[test]
    fn synthetic_with_no_training_images() {
        let spec = DatasetSpec {
            n_train: Some(0),
            ..DatasetSpec::default()
        };
        let splits = load_dataset::<f32>(&spec).unwrap();
        assert!(splits.train.is_empty());
        assert_eq!(splits.train.batches(32, Some(1)).count(), 0);
    }

    #[test]
    fn batch_rejects_out_of_range_pixels() {
        let px = Array4::from_elem((1, 1, 2, 2), 1.5f32);
        assert!(ImageBatch::new(px, vec![0], 2).is_err());
    }

    #[test]
    fn shuffled_batches_are_reproducible() {
        let set = SyntheticSpec::default().generate::<f32>().unwrap().0;
        let a: Vec<_> = set.batches(17, Some(5)).collect();
        let b: Vec<_> = set.batches(17, Some(5)).collect();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_covering(n in 20usize..300, k in 1usize..6, frac in 0.0f64..0.5, seed: u64) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % k).collect();
            let n_val = ((n as f64 * frac) as usize / k) * k;
            let (train, val) = split_indices(&labels, k, Some(n - n_val), n_val, true, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
