//! Image directories with an optional `labels.txt` (`<file> <class id>` per
//! line).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use perco_nn::Tensor;

use crate::error::{Error, Result};
use crate::image_io::Image;

pub const LABELS_FILE: &str = "labels.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub image: Image,
    pub label: Option<usize>,
}

/// Images of a directory in file-name order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm"))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Dataset(format!("{}:{}: expected `<file> <class id>`", path.display(), i + 1));
        let mut parts = line.split_whitespace();
        let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let id = id.parse().map_err(|_| bad())?;
        if out.insert(name.to_string(), id).is_some() {
            return Err(Error::Dataset(format!(
                "{}: duplicate label for {name}",
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let text: String = labels.iter().map(|(n, id)| format!("{n} {id}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

impl Dataset {
    /// Loads every `.ppm`/`.pgm` in `dir`. Fails on an empty directory or a
    /// labels file naming a missing image.
    pub fn load(dir: &Path) -> Result<Self> {
        let listing = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let mut paths = Vec::new();
        for entry in listing {
            let p = entry
                .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
                .path();
            if p.is_file() && is_image(&p) {
                paths.push(p);
            }
        }
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "{} contains no .ppm or .pgm images",
                dir.display()
            )));
        }
        paths.sort();
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() {
            read_labels(&labels_path)?
        } else {
            BTreeMap::new()
        };
        let mut entries = Vec::with_capacity(paths.len());
        for p in &paths {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            entries.push(Entry {
                image: Image::read(p)?,
                label: labels.get(&name).copied(),
                name,
            });
        }
        if let Some(missing) = labels.keys().find(|k| !entries.iter().any(|e| &e.name == *k)) {
            return Err(Error::Dataset(format!("{LABELS_FILE} names missing image {missing}")));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every image is `channels x height x width`.
    pub fn check_geometry(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        for e in &self.entries {
            let got = (e.image.channels, e.image.height, e.image.width);
            if got != (channels, height, width) {
                return Err(Error::Geometry(format!(
                    "{} is {}x{}x{}, model expects {channels}x{height}x{width}",
                    e.name, got.0, got.1, got.2
                )));
            }
        }
        Ok(())
    }

    /// Tensors and labels for training; every image must be labelled with a
    /// class below `classes`.
    pub fn training_tensors(&self, classes: usize) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
        let mut labels = Vec::with_capacity(self.len());
        for e in &self.entries {
            match e.label {
                Some(l) if l < classes => labels.push(l),
                Some(l) => return Err(Error::Dataset(format!("{}: class {l} >= {classes}", e.name))),
                None => return Err(Error::Dataset(format!("{} has no label", e.name))),
            }
        }
        Ok((self.entries.iter().map(|e| e.image.to_tensor()).collect(), labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn loads_sorted_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.ppm", 9u8), ("a.ppm", 3)] {
            Image::new(3, 2, 2, vec![v; 12])
                .unwrap()
                .write(&dir.path().join(name))
                .unwrap();
        }
        write_labels(&dir.path().join(LABELS_FILE), &[("b.ppm".into(), 1)]).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let names: Vec<_> = ds.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a.ppm", "b.ppm"]);
        assert_eq!(ds.entries[1].label, Some(1));
        assert_eq!(ds.entries[0].label, None);
        assert!(ds.training_tensors(4).is_err());
        assert!(ds.check_geometry(3, 2, 2).is_ok());
        assert!(ds.check_geometry(3, 4, 4).is_err());
    }

    #[test]
    fn malformed_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LABELS_FILE);
        std::fs::write(&p, "a.ppm x\n").unwrap();
        assert!(read_labels(&p).is_err());
        std::fs::write(&p, "a.ppm 1\na.ppm 2\n").unwrap();
        assert!(read_labels(&p).is_err());
    }
}
