use std::path::Path;

use crate::dataset::{DatasetManifest, Image, Split};
use crate::error::{Error, Result};

/// Decoded images of one manifest selection, with dense class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<Image>,
    /// Dense class index (position in the class table) per image.
    pub labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
}

impl Corpus {
    /// Loads the records of `split`, or every record when `split` is `None`.
    pub fn load(manifest_path: &Path, manifest: &DatasetManifest, split: Option<Split>) -> Result<Self> {
        let index = manifest.class_index();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for rec in manifest
            .records
            .iter()
            .filter(|r| split.is_none() || r.split == split)
        {
            let path = DatasetManifest::resolve(manifest_path, rec);
            images.push(Image::load(&path)?);
            let label = match rec.class_id {
                Some(c) => Some(*index.get(&c).ok_or_else(|| {
                    Error::invalid(format!("{}: class {c} is not in the class table", rec.path))
                })?),
                None => None,
            };
            labels.push(label);
        }
        Self::new(images, labels, manifest.class_names())
    }

    pub fn new(images: Vec<Image>, labels: Vec<Option<usize>>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!("{} images with {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!("label {bad} outside the class table")));
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// True when every image carries a label.
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(Option::is_some)
    }

    /// Labels of a fully labeled corpus.
    pub fn dense_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::invalid(format!("image {i} has no label"))))
            .collect()
    }
}
