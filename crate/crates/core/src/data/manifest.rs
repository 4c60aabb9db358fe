//! Published datasets on disk: an IDX pair plus `manifest.jsonl`, one JSON
//! object per sample in dataset order.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::{load_idx, save_idx};
use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const IMAGES_FILE: &str = "images.idx3-ubyte";
pub const LABELS_FILE: &str = "labels.idx1-ubyte";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub label: u8,
    /// RBF center used as the geodesic endpoint; absent for baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_star: Option<usize>,
    /// Estimated curvature at every path sample.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curvature: Vec<f64>,
    /// For baselines: the source sample this row was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
    /// For k-anonymity: the cluster member whose image and label replaced
    /// the source sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representative: Option<usize>,
}

impl ManifestRecord {
    pub fn plain(index: usize, label: u8, source: usize) -> Self {
        ManifestRecord {
            index,
            label,
            endpoint: None,
            i_max: None,
            i_star: None,
            curvature: Vec::new(),
            source: Some(source),
            representative: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PublishedDataset {
    pub dataset: LabeledDataset,
    pub records: Vec<ManifestRecord>,
    /// Run notes, written to `notes.txt`.
    pub notes: Vec<String>,
}

pub fn paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(IMAGES_FILE), dir.join(LABELS_FILE), dir.join(MANIFEST_FILE))
}

pub fn write_published(dir: &Path, published: &PublishedDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (img, lab, man) = paths(dir);
    save_idx(&published.dataset, &img, &lab)?;
    let mut out = Vec::new();
    for r in &published.records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(&man)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&man, e))?;
    let notes = dir.join("notes.txt");
    std::fs::write(&notes, published.notes.join("\n") + "\n").map_err(|e| Error::io(&notes, e))?;
    Ok(())
}

pub fn read_published(dir: &Path) -> Result<PublishedDataset> {
    let (img, lab, man) = paths(dir);
    if !img.exists() {
        return Err(Error::MissingArtifact(img));
    }
    let dataset = load_idx(&img, &lab, Split::Train)?;
    let file = std::fs::File::open(&man).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(man.clone())
        } else {
            Error::io(&man, e)
        }
    })?;
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&man, e))?;
        if !line.trim().is_empty() {
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                reason: format!("{}: {e}", man.display()),
            })?;
            records.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    if records.len() != dataset.len() {
        return Err(Error::Data(format!(
            "manifest has {} records for {} images",
            records.len(),
            dataset.len()
        )));
    }
    Ok(PublishedDataset {
        dataset,
        records,
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::Tensor;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = LabeledDataset::new(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.2, 0.4]).unwrap(), 1, 2, vec![0, 1], Split::Train)
            .unwrap();
        let records = vec![
            ManifestRecord {
                index: 0,
                label: 0,
                endpoint: Some(3),
                i_max: Some(4),
                i_star: Some(2),
                curvature: vec![0.5, 0.25],
                source: None,
                representative: None,
            },
            ManifestRecord {
                representative: Some(2),
                ..ManifestRecord::plain(1, 1, 7)
            },
        ];
        let p = PublishedDataset {
            dataset: ds,
            records: records.clone(),
            notes: vec!["x".into()],
        };
        write_published(dir.path(), &p).unwrap();
        let back = read_published(dir.path()).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.dataset.labels, vec![0, 1]);
        assert!(matches!(read_published(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
