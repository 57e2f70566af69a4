use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::ImageSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One label byte followed by 32·32·3 pixel bytes as R, G, B planes.
pub const CIFAR10_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

pub fn read_cifar10_file<T: Scalar>(path: &Path) -> Result<ImageSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::data(
            path,
            format!("length {} is not a positive multiple of {CIFAR10_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3 * PLANE);
    let scale = T::lit(1.0 / 255.0);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let y = rec[0] as usize;
        if y >= CIFAR10_CLASSES.len() {
            return Err(Error::data(path, format!("record {i}: label {y} out of range")));
        }
        labels.push(y);
        pixels.extend(rec[1..].iter().map(|&b| T::lit(f64::from(b)) * scale));
    }
    let pixels = Array4::from_shape_vec((n, 3, SIDE, SIDE), pixels).expect("record layout");
    ImageSet::new(pixels, labels, CIFAR10_CLASSES.len())
}

/// Writes images in the same record format (pixels rounded to bytes).
pub fn write_cifar10_file<T: Scalar>(path: &Path, pixels: &Array4<T>, labels: &[usize]) -> Result<()> {
    let (_, c, h, w) = pixels.dim();
    if (c, h, w) != (3, SIDE, SIDE) {
        return Err(Error::Shape(format!("record format needs [N, 3, 32, 32], got {:?}", pixels.dim())));
    }
    write_byte_records(path, pixels, labels)
}

/// One label byte followed by the `C·H·W` pixel bytes of each image, planes
/// in channel order. For `[N, 3, 32, 32]` this is the CIFAR-10 layout.
pub fn write_byte_records<T: Scalar>(path: &Path, pixels: &Array4<T>, labels: &[usize]) -> Result<()> {
    let (n, c, h, w) = pixels.dim();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
    }
    let mut out = Vec::with_capacity(n * (1 + c * h * w));
    for (i, &y) in labels.iter().enumerate() {
        out.push(u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} does not fit a byte")))?);
        for v in pixels.index_axis(ndarray::Axis(0), i).iter() {
            let b = (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0);
            out.push(b as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn locate(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn concat<T: Scalar>(parts: Vec<ImageSet<T>>) -> ImageSet<T> {
    let views: Vec<_> = parts.iter().map(|p| p.pixels.view()).collect();
    let pixels = ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform record shape");
    let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
    ImageSet {
        pixels,
        labels,
        n_classes: CIFAR10_CLASSES.len(),
    }
}

/// Reads `data_batch_{1..5}.bin` as the training pool and `test_batch.bin`.
pub(super) fn load_cifar10<T: Scalar>(root: &Path) -> Result<(ImageSet<T>, ImageSet<T>)> {
    let dir = locate(root);
    let train = (1..=5)
        .map(|i| read_cifar10_file(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar10_file(&dir.join("test_batch.bin"))?;
    Ok((concat(train), test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_plane_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut px = Array4::<f32>::zeros((2, 3, 32, 32));
        px[[0, 0, 0, 1]] = 1.0; // red plane, row 0, column 1
        px[[1, 2, 31, 31]] = 128.0 / 255.0;
        write_cifar10_file(&path, &px, &[3, 9]).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(raw.len(), 2 * CIFAR10_RECORD_BYTES);
        assert_eq!(raw[0], 3);
        assert_eq!(raw[2], 255);
        assert_eq!(raw[CIFAR10_RECORD_BYTES + 3072], 128);
        let back = read_cifar10_file::<f32>(&path).unwrap();
        assert_eq!(back.labels, vec![3, 9]);
        assert_eq!(back.pixels, px);
    }

    #[test]
    fn bad_label_and_truncated_file_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut rec = vec![0u8; CIFAR10_RECORD_BYTES];
        rec[0] = 10;
        fs::write(&path, &rec).unwrap();
        assert!(matches!(read_cifar10_file::<f32>(&path), Err(Error::DataFormat { .. })));
        fs::write(&path, &rec[..100]).unwrap();
        assert!(matches!(read_cifar10_file::<f32>(&path), Err(Error::DataFormat { .. })));
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = load_cifar10::<f32>(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cifar"));
    }
}
