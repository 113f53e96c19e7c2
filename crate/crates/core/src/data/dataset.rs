//! On-disk datasets laid out as `<root>/<split>/<class_name>/<image files>`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use super::image::{ImageTensor, LabeledImage, Split};
use crate::error::{Error, Result};

/// A loaded split. Samples are ordered by file path; class indices follow
/// the sorted class directory names.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledImage>,
    /// Source file of each sample (empty for in-memory datasets).
    pub sources: Vec<PathBuf>,
    /// Files that failed to decode.
    pub skipped: Vec<PathBuf>,
}

impl Dataset {
    pub fn in_memory(class_names: Vec<String>, samples: Vec<LabeledImage>) -> Self {
        Self {
            class_names,
            samples,
            sources: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class labels of every sample; errors if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::config("dataset contains unlabeled samples")))
            .collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes an 8-bit image file into `[0, 1]` RGB.
pub fn decode_image(path: &Path) -> Result<ImageTensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let px = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    ImageTensor::new(px)
}

/// Encodes an image as 8-bit PNG, rounding to the nearest level.
pub fn encode_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.shape();
    let px = image.pixels();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let level = |ch: usize| (px[[ch.min(c - 1), y as usize, x as usize]] * 255.0).round() as u8;
        Rgb([level(0), level(1), level(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut dataset = Dataset::in_memory(Vec::new(), Vec::new());
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        dataset.class_names.push(name);
        for file in sorted_entries(class_dir)?.into_iter().filter(|p| p.is_file()) {
            match decode_image(&file) {
                Ok(image) => {
                    dataset.samples.push(LabeledImage::new(image, Some(label)));
                    dataset.sources.push(file);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    dataset.skipped.push(file);
                }
            }
        }
    }
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    Ok(dataset)
}

/// Writes labeled samples under `<root>/<split>/<class_name>/`.
pub fn write_dataset(root: &Path, split: Split, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.as_str());
    for name in &dataset.class_names {
        fs::create_dir_all(dir.join(name))?;
    }
    let mut counters = vec![0usize; dataset.class_count()];
    let mut written = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let label = sample
            .label
            .filter(|l| *l < dataset.class_count())
            .ok_or_else(|| Error::invalid("every written sample needs a valid label"))?;
        let name = &dataset.class_names[label];
        let path = dir.join(name).join(format!("{name}_{:05}.png", counters[label]));
        counters[label] += 1;
        encode_png(&sample.image, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// SHA-256 over every file below `root`, in sorted relative-path order.
pub fn content_hash(root: &Path) -> Result<String> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in sorted_entries(dir)? {
            if entry.is_dir() {
                walk(&entry, out)?;
            } else {
                out.push(entry);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut hasher = Sha256::new();
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&file)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f64, label: usize) -> LabeledImage {
        LabeledImage::new(ImageTensor::filled(3, 8, 8, v).unwrap(), Some(label))
    }

    #[test]
    fn labels_follow_sorted_class_names() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::in_memory(
            vec!["a".into(), "b".into()],
            vec![sample(0.1, 1), sample(0.2, 0), sample(0.3, 1), sample(0.4, 0)],
        );
        write_dataset(dir.path(), Split::Train, &ds).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.class_names, vec!["a", "b"]);
        assert_eq!(loaded.labels().unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn corrupt_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::in_memory(
            vec!["a".into(), "b".into()],
            vec![sample(0.1, 0), sample(0.2, 0), sample(0.3, 1), sample(0.4, 1)],
        );
        let written = write_dataset(dir.path(), Split::Train, &ds).unwrap();
        fs::write(&written[1], b"definitely not a png").unwrap();
        let loaded = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.skipped, vec![written[1].clone()]);
    }

    #[test]
    fn missing_and_empty_splits() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Val),
            Err(Error::DatasetNotFound(_))
        ));
        fs::create_dir_all(dir.path().join("val/a")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Split::Val),
            Err(Error::EmptyDataset(_))
        ));
    }
}
