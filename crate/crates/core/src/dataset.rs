//! Labeled image folders.
//!
//! A dataset folder holds PNG images, optional 8-bit grayscale PNG maps of the
//! same size, and `index.ndjson` with one `{"image_path", "map_path"?, "label"}`
//! record per line. Paths are relative to the folder.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;

pub const INDEX_FILE: &str = "index.ndjson";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub map: Option<Image>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_path: Option<String>,
    pub label: usize,
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRecord>> {
    let file = fs::File::open(dir.join(INDEX_FILE))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{INDEX_FILE} line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_folder(dir: &Path) -> Result<Vec<Sample>> {
    let index = read_index(dir)?;
    let mut samples = Vec::with_capacity(index.len());
    for rec in index {
        let image = Image::load_png(&dir.join(&rec.image_path))?;
        let map = match &rec.map_path {
            Some(p) => {
                let m = Image::load_png(&dir.join(p))?;
                if m.channels != 1 || (m.height, m.width) != (image.height, image.width) {
                    return Err(Error::Data(format!(
                        "map {p} must be grayscale {}x{}",
                        image.height, image.width
                    )));
                }
                Some(m)
            }
            None => None,
        };
        samples.push(Sample {
            id: rec.image_path.clone(),
            image,
            label: rec.label,
            map,
        });
    }
    Ok(samples)
}

/// Write samples as `images/<n>.png`, `maps/<n>.png` and the index.
pub fn save_folder(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("maps"))?;
    let mut index = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/{i:06}.png");
        s.image.save_png(&dir.join(&image_path))?;
        let map_path = match &s.map {
            Some(m) => {
                let p = format!("maps/{i:06}.png");
                m.max_normalized().save_png(&dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let rec = IndexRecord {
            image_path,
            map_path,
            label: s.label,
        };
        writeln!(index, "{}", serde_json::to_string(&rec)?)?;
    }
    index.flush()?;
    Ok(())
}

/// Deterministic split into `(train, validation, test)` by counts.
pub fn split(samples: Vec<Sample>, val: usize, test: usize) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if val + test >= samples.len() {
        return Err(Error::Data(format!(
            "cannot hold out {val}+{test} of {} samples",
            samples.len()
        )));
    }
    let mut rest = samples;
    let test_set = rest.split_off(rest.len() - test);
    let val_set = rest.split_off(rest.len() - val);
    Ok((rest, val_set, test_set))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = Image::zeros(4, 4, 1);
        *map.at_mut(1, 2, 0) = 1.0;
        let samples = vec![
            Sample {
                id: "a".into(),
                image: Image::filled(4, 4, 3, 0.2),
                label: 3,
                map: Some(map.clone()),
            },
            Sample {
                id: "b".into(),
                image: Image::filled(4, 4, 3, 0.8),
                label: 1,
                map: None,
            },
        ];
        save_folder(dir.path(), &samples).unwrap();
        let back = load_folder(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].label, 3);
        assert_eq!(back[0].map.as_ref().unwrap().data, map.data);
        assert!(back[1].map.is_none());
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert!(!index.lines().nth(1).unwrap().contains("map_path"));
    }

    #[test]
    fn bad_index_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INDEX_FILE), "{\"label\": 1}\n").unwrap();
        let err = load_folder(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
