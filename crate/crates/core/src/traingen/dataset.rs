//! Datasets on disk: one pattern file per garment with its `.xyz` cloud
//! alongside, listed by an `index.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pattern::io::{parse_pattern, read_xyz, serialize_pattern, sibling_xyz, write_xyz};
use crate::pattern::{GarmentSample, PatternError};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Pattern {
        path: PathBuf,
        #[source]
        source: PatternError,
    },
    #[error("{path}: {message}")]
    Index { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    family: String,
    pattern: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    samples: Vec<Entry>,
}

pub fn write_dataset(dir: &Path, samples: &[GarmentSample]) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut index = Index { samples: Vec::new() };
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}_{}.json", s.garment_class);
        let path = dir.join(&name);
        let wrap = |source| DatasetError::Pattern { path: path.clone(), source };
        serialize_pattern(&s.pattern, &path).map_err(wrap)?;
        write_xyz(&s.points, &sibling_xyz(&path)).map_err(wrap)?;
        index.samples.push(Entry {
            family: s.garment_class.clone(),
            pattern: name,
        });
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text).map_err(|source| DatasetError::Io { path, source })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<GarmentSample>, DatasetError> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| DatasetError::Io { path: path.clone(), source })?;
    let index: Index = serde_json::from_str(&text).map_err(|e| DatasetError::Index {
        path: path.clone(),
        message: e.to_string(),
    })?;
    index
        .samples
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.pattern);
            let wrap = |source| DatasetError::Pattern { path: path.clone(), source };
            let pattern = parse_pattern(&path).map_err(wrap)?;
            let points = read_xyz(&sibling_xyz(&path)).map_err(wrap)?;
            let sample = GarmentSample {
                points,
                panel_class_set: pattern.class_set(),
                pattern,
                garment_class: e.family,
            };
            sample.validate().map_err(wrap)?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traingen::synth::{generate_dataset, Family};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&[Family::Tee, Family::Skirt4p], 3, 512, 5);
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.points, b.points);
            assert_eq!(a.garment_class, b.garment_class);
            assert_eq!(a.pattern.stitches, b.pattern.stitches);
            assert_eq!(a.pattern.panels.len(), b.pattern.panels.len());
        }
    }

    #[test]
    fn missing_index_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(INDEX_FILE), "{err}");
    }
}
