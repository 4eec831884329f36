//! Dataset index files.
//!
//! UTF-8 CSV. The first line names the classes in label order, the second is
//! the column header, then one row per image. Paths are relative to the
//! index file's directory.
//!
//! ```text
//! # classes: normal,tb,cancer
//! path,label
//! images/normal_0000.sftr,normal
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::raster::{self, Encoding};
use super::{resize_bilinear, Dataset, Sample};
use crate::error::{Error, Result};

const CLASSES_PREFIX: &str = "# classes:";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    /// `(path as written in the index, label name)`
    pub entries: Vec<(PathBuf, String)>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let classes = first
            .trim_end_matches('\r')
            .strip_prefix(CLASSES_PREFIX)
            .ok_or_else(|| Error::format(path, format!("line 1 must start with {CLASSES_PREFIX:?}")))?;
        let class_names: Vec<String> = classes.split(',').map(|c| c.trim().to_string()).collect();
        if class_names.iter().any(String::is_empty) || class_names.len() < 2 {
            return Err(Error::format(path, "line 1 must name at least two non-empty classes"));
        }
        if class_names.iter().collect::<HashSet<_>>().len() != class_names.len() {
            return Err(Error::format(path, "duplicate class name on line 1"));
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
        let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
            return Err(Error::format(path, format!("line 2 must be the header \"path,label\", got {headers:?}")));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 3;
            let record = record.map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
            if record.len() != 2 {
                return Err(Error::format(path, format!("line {line}: expected 2 fields, got {}", record.len())));
            }
            let (file, label) = (record[0].trim(), record[1].trim());
            if file.is_empty() {
                return Err(Error::format(path, format!("line {line}: empty path")));
            }
            if !class_names.iter().any(|c| c == label) {
                return Err(Error::format(path, format!("line {line}: unknown class {label:?}")));
            }
            if !seen.insert(file.to_string()) {
                return Err(Error::format(path, format!("line {line}: duplicate path {file:?}")));
            }
            entries.push((PathBuf::from(file), label.to_string()));
        }
        Ok(DatasetIndex { entries, class_names })
    }

    pub fn render(&self) -> String {
        let mut out = format!("{CLASSES_PREFIX} {}\npath,label\n", self.class_names.join(","));
        for (p, label) in &self.entries {
            out.push_str(&format!("{},{label}\n", p.display()));
        }
        out
    }
}

/// Reads an index and its rasters. When `target_size` is given, images of a
/// different size are bilinearly resized to it.
pub fn load_dataset(index_path: &Path, target_size: Option<(usize, usize)>) -> Result<Dataset> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index = DatasetIndex::parse(&text, index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(index.entries.len());
    let mut channels = None;
    for (file, label) in &index.entries {
        let full = base.join(file);
        let mut image = raster::read_raster(&full)?;
        if let Some((h, w)) = target_size {
            image = resize_bilinear(&image, h, w)?;
        }
        let c = image.shape()[0];
        if *channels.get_or_insert(c) != c {
            return Err(Error::format(&full, format!("{c} channels, other images have {}", channels.unwrap())));
        }
        if let Some(first) = samples.first().map(|s: &Sample| s.image.shape().to_vec()) {
            if first != image.shape() {
                return Err(Error::format(
                    &full,
                    format!("image is {:?} but earlier images are {first:?}; pass a target size", image.shape()),
                ));
            }
        }
        let label = index.class_names.iter().position(|c| c == label).expect("validated");
        samples.push(Sample { image, label, id: file.display().to_string() });
    }
    Dataset::new(index.class_names, samples)
}

/// Writes every sample as an f64 raster under `dir/images/` plus
/// `dir/index.csv`, returning the index path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:05}.sftr"));
        raster::write_raster(&dir.join(&rel), &s.image, Encoding::F64)?;
        entries.push((rel, dataset.class_names[s.label].clone()));
    }
    let index = DatasetIndex { entries, class_names: dataset.class_names.clone() };
    let path = dir.join("index.csv");
    fs::write(&path, index.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
