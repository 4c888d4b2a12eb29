//! Reference point correspondences between the two images of a pair.
//!
//! Records look like `{"pair_id": "a.png|b.png", "points": [[x, y, x', y'], …]}`
//! with coordinates in pixels of the original (unresized) images. A source may
//! be a single JSON object, a JSON array of objects, JSON-lines, or a directory
//! of such files (`*.json` / `*.jsonl`, read in name order).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Correspondence;

pub const PAIR_SEPARATOR: char = '|';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceRecord {
    pub pair_id: String,
    pub points: Vec<[f64; 4]>,
}

impl CorrespondenceRecord {
    pub fn new(image_a: &str, image_b: &str, points: Vec<[f64; 4]>) -> Self {
        CorrespondenceRecord {
            pair_id: pair_id(image_a, image_b),
            points,
        }
    }
}

pub fn pair_id(image_a: &str, image_b: &str) -> String {
    format!("{image_a}{PAIR_SEPARATOR}{image_b}")
}

fn file_name(path: &str) -> &str {
    Path::new(path)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(path)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceIndex {
    by_path: BTreeMap<(String, String), Vec<[f64; 4]>>,
    by_name: BTreeMap<(String, String), Vec<[f64; 4]>>,
}

impl CorrespondenceIndex {
    pub fn insert(&mut self, record: CorrespondenceRecord) -> Result<()> {
        let (a, b) = record.pair_id.split_once(PAIR_SEPARATOR).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "pair_id {:?} is not of the form \"imageA{PAIR_SEPARATOR}imageB\"",
                record.pair_id
            ))
        })?;
        if record.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pair {:?} has non-finite points",
                record.pair_id
            )));
        }
        self.by_name.insert(
            (file_name(a).to_string(), file_name(b).to_string()),
            record.points.clone(),
        );
        self.by_path.insert((a.to_string(), b.to_string()), record.points);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.by_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_path.is_empty()
    }

    /// Parses one document: a JSON object, a JSON array, or JSON-lines.
    pub fn parse_into(&mut self, text: &str) -> Result<()> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            let records: Vec<CorrespondenceRecord> = serde_json::from_str(text)
                .map_err(|e| Error::InvalidArgument(format!("correspondences: {e}")))?;
            for r in records {
                self.insert(r)?;
            }
            return Ok(());
        }
        if let Ok(record) = serde_json::from_str::<CorrespondenceRecord>(text) {
            return self.insert(record);
        }
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: CorrespondenceRecord = serde_json::from_str(line).map_err(|e| {
                Error::InvalidArgument(format!("correspondences line {}: {e}", lineno + 1))
            })?;
            self.insert(r)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut index = CorrespondenceIndex::default();
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl"))
                })
                .collect();
            files.sort();
            for f in files {
                let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
                index.parse_into(&text)?;
            }
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            index.parse_into(&text)?;
        }
        Ok(index)
    }

    /// Correspondences from image `a` to image `b`, looked up by exact path and
    /// then by file name; a record stored for `(b, a)` is returned swapped.
    pub fn lookup(&self, a: &str, b: &str) -> Option<Vec<Correspondence>> {
        let forward = |p: &Vec<[f64; 4]>| p.iter().map(|q| ((q[0], q[1]), (q[2], q[3]))).collect();
        let backward = |p: &Vec<[f64; 4]>| p.iter().map(|q| ((q[2], q[3]), (q[0], q[1]))).collect();
        let key = |x: &str, y: &str| (x.to_string(), y.to_string());
        let (na, nb) = (file_name(a), file_name(b));
        self.by_path
            .get(&key(a, b))
            .map(forward)
            .or_else(|| self.by_path.get(&key(b, a)).map(backward))
            .or_else(|| self.by_name.get(&key(na, nb)).map(forward))
            .or_else(|| self.by_name.get(&key(nb, na)).map(backward))
    }
}

/// Rescales correspondences from original-image pixels to model-input pixels.
/// Sizes are `(width, height)`.
pub fn rescale(
    points: &[Correspondence],
    size_a: (usize, usize),
    size_b: (usize, usize),
    input: (usize, usize),
) -> Vec<Correspondence> {
    let f = |size: (usize, usize)| (input.0 as f64 / size.0 as f64, input.1 as f64 / size.1 as f64);
    let (fa, fb) = (f(size_a), f(size_b));
    points
        .iter()
        .map(|(p, q)| ((p.0 * fa.0, p.1 * fa.1), (q.0 * fb.0, q.1 * fb.1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_object_array_and_lines() {
        let mut idx = CorrespondenceIndex::default();
        idx.parse_into(r#"{"pair_id": "x/a.png|x/b.png", "points": [[1, 2, 3, 4]]}"#).unwrap();
        idx.parse_into(r#"[{"pair_id": "c|d", "points": []}]"#).unwrap();
        idx.parse_into("{\"pair_id\": \"e|f\", \"points\": [[0,0,1,1]]}\n{\"pair_id\": \"g|h\", \"points\": []}\n").unwrap();
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.lookup("x/a.png", "x/b.png").unwrap(), vec![((1.0, 2.0), (3.0, 4.0))]);
        assert_eq!(idx.lookup("x/b.png", "x/a.png").unwrap(), vec![((3.0, 4.0), (1.0, 2.0))]);
        assert_eq!(idx.lookup("other/a.png", "b.png").unwrap().len(), 1);
        assert!(idx.lookup("a", "z").is_none());
        assert!(idx.parse_into(r#"{"pair_id": "nobar", "points": []}"#).is_err());
    }

    #[test]
    fn loads_directories_and_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("1.json"), r#"{"pair_id": "a|b", "points": []}"#).unwrap();
        std::fs::write(dir.path().join("2.jsonl"), "{\"pair_id\": \"c|d\", \"points\": []}\n").unwrap();
        std::fs::write(dir.path().join("ignored.txt"), "garbage").unwrap();
        assert_eq!(CorrespondenceIndex::load(dir.path()).unwrap().len(), 2);
        let err = CorrespondenceIndex::load(&dir.path().join("none.json")).unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Io);
    }

    #[test]
    fn rescales_each_image_independently() {
        let pts = vec![((100.0, 50.0), (20.0, 40.0))];
        let out = rescale(&pts, (200, 100), (40, 80), (128, 64));
        assert_eq!(out, vec![((64.0, 32.0), (64.0, 32.0))]);
    }
}
