use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::ImageSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() == want_dirs)
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Reads `root/<class_name>/<image>`; classes are the sorted subdirectory
/// names. All images must share one size. Returns the set and class names.
pub fn read_image_folder<T: Scalar>(root: &Path) -> Result<(ImageSet<T>, Vec<String>)> {
    let classes = sorted_entries(root, true)?;
    if classes.is_empty() {
        return Err(Error::data(root, "no class subdirectories"));
    }
    let names: Vec<String> = classes
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut dims: Option<(u32, u32)> = None;
    let mut pixels: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let scale = T::lit(1.0 / 255.0);
    for (label, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir, false)? {
            let img = image::open(&file)
                .map_err(|e| Error::data(&file, e.to_string()))?
                .to_rgb8();
            let d = img.dimensions();
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::data(
                        &file,
                        format!("image is {}x{}, expected {}x{}", d.0, d.1, prev.0, prev.1),
                    ))
                }
                _ => {}
            }
            let (w, h) = (d.0 as usize, d.1 as usize);
            let raw = img.into_raw();
            for c in 0..3 {
                for i in 0..h * w {
                    pixels.push(T::lit(f64::from(raw[i * 3 + c])) * scale);
                }
            }
            labels.push(label);
        }
    }
    let (w, h) = dims.map_or((0, 0), |(w, h)| (w as usize, h as usize));
    let pixels = Array4::from_shape_vec((labels.len(), 3, h, w), pixels).expect("image layout");
    Ok((ImageSet::new(pixels, labels, names.len())?, names))
}

/// Uses `root/train` and `root/test` when both exist; otherwise the whole
/// folder is the training pool and the test set is empty.
pub(super) fn load_image_folder<T: Scalar>(root: &Path) -> Result<(ImageSet<T>, ImageSet<T>)> {
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    if train_dir.is_dir() && test_dir.is_dir() {
        let (train, names) = read_image_folder(&train_dir)?;
        let (test, test_names) = read_image_folder(&test_dir)?;
        if names != test_names {
            return Err(Error::data(root, "train and test class folders differ"));
        }
        Ok((train, test))
    } else {
        let (train, _) = read_image_folder(root)?;
        let test = train.empty_like();
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_classes_and_images() {
        let dir = tempfile::tempdir().unwrap();
        for c in 0..10 {
            let cdir = dir.path().join(format!("class_{c:02}"));
            fs::create_dir(&cdir).unwrap();
            for i in 0..50u32 {
                let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, (i * 5) as u8]));
                img.save(cdir.join(format!("{i:03}.png"))).unwrap();
            }
        }
        let (set, names) = read_image_folder::<f32>(dir.path()).unwrap();
        assert_eq!(set.n_classes, 10);
        assert_eq!(names.len(), 10);
        assert_eq!(set.len(), 500);
        assert_eq!(set.image_dim(), (3, 8, 8));
        // pixel (x=2, y=1) of the first image: R = 60, G = 30
        assert!((set.pixels[[0, 0, 1, 2]] - 60.0 / 255.0).abs() < 1e-6);
        assert!((set.pixels[[0, 1, 1, 2]] - 30.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn corrupt_image_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("a");
        fs::create_dir(&cdir).unwrap();
        fs::write(cdir.join("broken.png"), b"not a png").unwrap();
        let err = read_image_folder::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("broken.png"));
    }
}
