//! Labeled aligned-crop datasets for training.

use std::collections::BTreeMap;
use std::path::Path;

use crate::align::{Image, ALIGNED_SIZE};
use crate::error::{Error, Result};

/// Indexable set of aligned 112x112 `[0, 1]` crops with dense labels.
pub trait FaceDataset: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn image(&self, index: usize) -> Result<Image>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Crops held as 8-bit RGB to keep memory at a quarter of `f32`.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pixels: Vec<Vec<u8>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl InMemoryDataset {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            pixels: Vec::new(),
            labels: Vec::new(),
            class_names,
        }
    }

    pub fn push(&mut self, image: &Image, label: usize) -> Result<()> {
        if image.width() != ALIGNED_SIZE || image.height() != ALIGNED_SIZE {
            return Err(Error::validation(format!(
                "training crops must be {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if label >= self.class_names.len() {
            return Err(Error::validation(format!(
                "label {label} outside [0, {})",
                self.class_names.len()
            )));
        }
        self.pixels.push(image.to_rgb8().into_raw());
        self.labels.push(label);
        Ok(())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Loads an identity-per-folder tree of aligned crops. Folders are sorted
    /// by name and mapped to labels `0..C`; `max_classes` keeps the first ones.
    pub fn from_folders(root: &Path, max_classes: Option<usize>) -> Result<Self> {
        let mut classes: BTreeMap<String, Vec<std::path::PathBuf>> = BTreeMap::new();
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            let mut files = Vec::new();
            for f in std::fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
                let f = f.map_err(|e| Error::io(&path, e))?.path();
                let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
                if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
                    files.push(f);
                }
            }
            if !files.is_empty() {
                files.sort();
                classes.insert(entry.file_name().to_string_lossy().into_owned(), files);
            }
        }
        if classes.is_empty() {
            return Err(Error::Missing(format!(
                "no identity folders with images under {}",
                root.display()
            )));
        }
        let take = max_classes.unwrap_or(classes.len());
        if take > classes.len() {
            return Err(Error::validation(format!(
                "requested {take} identities, only {} available in {}",
                classes.len(),
                root.display()
            )));
        }
        let chosen: Vec<_> = classes.into_iter().take(take).collect();
        let mut ds = Self::new(chosen.iter().map(|(n, _)| n.clone()).collect());
        for (label, (_, files)) in chosen.iter().enumerate() {
            for f in files {
                ds.push(&Image::load(f)?, label)?;
            }
        }
        Ok(ds)
    }

    /// Subset with the given classes relabeled densely in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut out = Self::new(
            classes
                .iter()
                .map(|c| {
                    self.class_names
                        .get(*c)
                        .cloned()
                        .ok_or_else(|| Error::validation(format!("class {c} out of range")))
                })
                .collect::<Result<_>>()?,
        );
        let remap: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        for (px, l) in self.pixels.iter().zip(&self.labels) {
            if let Some(n) = remap.get(l) {
                out.pixels.push(px.clone());
                out.labels.push(*n);
            }
        }
        Ok(out)
    }
}

impl FaceDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Image> {
        let raw = self.pixels[index].iter().map(|v| f32::from(*v) / 255.0).collect();
        Image::from_vec(ALIGNED_SIZE, ALIGNED_SIZE, raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folders_map_to_sorted_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("bob", 0.2f32), ("alice", 0.8)] {
            std::fs::create_dir(dir.path().join(name)).unwrap();
            for i in 0..2 {
                Image::filled(ALIGNED_SIZE, ALIGNED_SIZE, v)
                    .save_png(&dir.path().join(name).join(format!("{i}.png")))
                    .unwrap();
            }
        }
        let ds = InMemoryDataset::from_folders(dir.path(), None).unwrap();
        assert_eq!(ds.class_names(), ["alice", "bob"]);
        assert_eq!(ds.labels(), [0, 0, 1, 1]);
        assert!((ds.image(0).unwrap().get(3, 3, 1) - 0.8).abs() < 1.0 / 255.0);
        assert!(InMemoryDataset::from_folders(dir.path(), Some(3)).is_err());
        let sub = ds.select_classes(&[1]).unwrap();
        assert_eq!(sub.labels(), [0, 0]);
    }

    #[test]
    fn rejects_wrong_size_and_label() {
        let mut ds = InMemoryDataset::new(vec!["a".into()]);
        assert!(ds.push(&Image::new(10, 10), 0).is_err());
        assert!(ds.push(&Image::new(112, 112), 1).is_err());
    }
}
