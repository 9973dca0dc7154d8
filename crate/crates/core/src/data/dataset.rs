//! Dataset indexing: `root/<class>/<images>` or `root/manifest.csv`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image_io::{decode_image, has_image_extension, probe_image};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class_index: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted, unique class names; a sample's class index is its position here.
    pub classes: Vec<String>,
    /// Samples in lexicographic path order.
    pub samples: Vec<Sample>,
}

/// Decoded images with their labels, in index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_index).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Decodes every sample in parallel; results keep index order.
    pub fn load_images(&self) -> Result<LabeledSet> {
        let images = self
            .samples
            .par_iter()
            .map(|s| decode_image(&s.path))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledSet {
            images,
            labels: self.labels(),
        })
    }
}

fn build_index(root: &Path, mut entries: Vec<(PathBuf, String)>) -> Result<DatasetIndex> {
    let classes: Vec<String> = entries
        .iter()
        .map(|(_, c)| c.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    entries.sort();
    for (path, _) in &entries {
        probe_image(path)?;
    }
    let samples = entries
        .into_iter()
        .map(|(path, class_name)| Sample {
            class_index: classes.binary_search(&class_name).expect("class collected above"),
            path,
            class_name,
        })
        .collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        samples,
    })
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
}

fn load_manifest(root: &Path, manifest: &Path) -> Result<DatasetIndex> {
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", manifest.display()))
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Dataset(format!(
            "{}: header must be `path,label`",
            manifest.display()
        )));
    }
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::Dataset(format!("{}: {e}", manifest.display())))?;
        let path = PathBuf::from(&row.path);
        let path = if path.is_absolute() { path } else { root.join(path) };
        if !path.is_file() {
            return Err(Error::Dataset(format!(
                "manifest entry {} does not exist",
                path.display()
            )));
        }
        if row.label.is_empty() {
            return Err(Error::Dataset(format!("empty label for {}", path.display())));
        }
        entries.push((path, row.label));
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} lists no images", manifest.display())));
    }
    build_index(root, entries)
}

/// Indexes a dataset; a `manifest.csv` in `root` takes precedence over the
/// directory layout.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        return load_manifest(root, &manifest);
    }

    let mut entries = Vec::new();
    let mut class_dirs = 0;
    for dir in sorted_dir(root)? {
        if !dir.is_dir() || is_hidden(&dir) {
            continue;
        }
        class_dirs += 1;
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non UTF-8 class directory {}", dir.display())))?
            .to_string();
        let files: Vec<_> = sorted_dir(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no images",
                dir.display()
            )));
        }
        entries.extend(files.into_iter().map(|p| (p, class.clone())));
    }
    if class_dirs == 0 {
        return Err(Error::Dataset(format!(
            "dataset root {} has no class directories",
            root.display()
        )));
    }
    build_index(root, entries)
}
