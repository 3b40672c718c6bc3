//! Image/annotation collections and their JSON manifest.
//!
//! A manifest is a JSON list of `{"image": path, "annotation": path, "split": ...}`
//! entries; relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::groundtruth::Annotation;
use crate::pgm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub split: Split,
}

/// One image with its annotation, if the annotation could be read.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid<f64>,
    pub annotation: Option<Annotation>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub id: String,
    pub samples: Vec<Sample>,
    /// Problems met while loading (e.g. unreadable annotation files).
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    /// Load every entry of a manifest. Images must exist; a missing or
    /// malformed annotation leaves `annotation = None` and records a warning.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: manifest.to_path_buf(),
            source,
        })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut corpus = Corpus {
            id: manifest
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| manifest.display().to_string()),
            ..Corpus::default()
        };
        for e in entries {
            let image_path = base.join(&e.image);
            let image = pgm::read(&image_path)?;
            let ann_path = base.join(&e.annotation);
            let annotation = match Annotation::load(&ann_path) {
                Ok(a) if a.width == image.width() && a.height == image.height() => Some(a),
                Ok(a) => {
                    corpus.warnings.push(format!(
                        "{}: annotation is {}x{} but image is {}x{}; skipped",
                        ann_path.display(),
                        a.width,
                        a.height,
                        image.width(),
                        image.height()
                    ));
                    None
                }
                Err(err) => {
                    corpus.warnings.push(format!("{}: {err}; skipped", ann_path.display()));
                    None
                }
            };
            let id = e
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.image.display().to_string());
            corpus.samples.push(Sample {
                id,
                image,
                annotation,
                split: e.split,
            });
        }
        Ok(corpus)
    }

    /// Write images as PGM, annotations as JSON and a `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        let anns = dir.join("annotations");
        for d in [&images, &anns] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = PathBuf::from("images").join(format!("{}.pgm", s.id));
            let annotation = PathBuf::from("annotations").join(format!("{}.json", s.id));
            pgm::write(&dir.join(&image), &s.image)?;
            if let Some(a) = &s.annotation {
                a.save(&dir.join(&annotation))?;
            }
            entries.push(ManifestEntry {
                image,
                annotation,
                split: s.split,
            });
        }
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&entries).expect("manifest serialises");
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}
