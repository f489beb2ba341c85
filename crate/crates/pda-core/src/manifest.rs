//! Dataset manifests: a small text file naming the class list, the source
//! and target embedding files, and how to interpret their rows.
//!
//! The training loader never touches target ground truth; those labels live
//! in the evaluation-only file section and load through a separate call.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Rows are flattened `n_patches x d_in` patch inputs for the image
    /// encoder (the default).
    RawPatches,
    /// Rows are precomputed `d_in`-wide image embeddings; the image encoder
    /// and its visual prompts are bypassed.
    Embeddings,
}

impl FeatureKind {
    fn as_str(self) -> &'static str {
        match self {
            FeatureKind::RawPatches => "raw_patches",
            FeatureKind::Embeddings => "embeddings",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_patches" => Ok(FeatureKind::RawPatches),
            "embeddings" => Ok(FeatureKind::Embeddings),
            other => Err(Error::Data(format!("unknown feature_kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub feature_kind: FeatureKind,
    pub n_patches: usize,
    pub d_in: usize,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
}

/// In-memory dataset as the trainer sees it: labeled source, unlabeled
/// target. Target ground truth is deliberately absent.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub kind: FeatureKind,
    /// Per-sample `n_patches x d_in` inputs (raw) or unit `1 x d_in` rows.
    pub source: Vec<Tensor>,
    pub source_labels: Vec<usize>,
    pub target: Vec<Tensor>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        format!(
            "format_version = {}\nclasses = {}\nfeature_kind = {}\nn_patches = {}\nd_in = {}\nsource = {}\ntarget = {}\n",
            self.format_version,
            self.class_names.join(","),
            self.feature_kind.as_str(),
            self.n_patches,
            self.d_in,
            self.source_path.display(),
            self.target_path.display(),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut version = None;
        let mut classes = None;
        let mut kind = None;
        let mut n_patches = None;
        let mut d_in = None;
        let mut source = None;
        let mut target = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "format_version" => {
                    version = Some(value.parse::<u32>().map_err(|_| {
                        Error::Data(format!("bad format_version {value:?}"))
                    })?)
                }
                "classes" => {
                    classes = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect::<Vec<_>>(),
                    )
                }
                "feature_kind" => kind = Some(FeatureKind::parse(value)?),
                "n_patches" => {
                    n_patches = Some(value.parse::<usize>().map_err(|_| {
                        Error::Data(format!("bad n_patches {value:?}"))
                    })?)
                }
                "d_in" => {
                    d_in = Some(value.parse::<usize>().map_err(|_| {
                        Error::Data(format!("bad d_in {value:?}"))
                    })?)
                }
                "source" => source = Some(PathBuf::from(value)),
                "target" => target = Some(PathBuf::from(value)),
                other => return Err(Error::Data(format!("unknown manifest key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Data(format!("manifest is missing {what}"));
        let manifest = DatasetManifest {
            format_version: version.ok_or_else(|| missing("format_version"))?,
            class_names: classes.ok_or_else(|| missing("classes"))?,
            feature_kind: kind.ok_or_else(|| missing("feature_kind"))?,
            n_patches: n_patches.ok_or_else(|| missing("n_patches"))?,
            d_in: d_in.ok_or_else(|| missing("d_in"))?,
            source_path: source.ok_or_else(|| missing("source"))?,
            target_path: target.ok_or_else(|| missing("target"))?,
        };
        if manifest.format_version != io::FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        if manifest.class_names.len() < 2 {
            return Err(Error::Data("manifest needs at least two classes".into()));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Load and resolve relative data paths against the manifest location.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut manifest = Self::from_text(&text)?;
        if let Some(dir) = path.parent() {
            if manifest.source_path.is_relative() {
                manifest.source_path = dir.join(&manifest.source_path);
            }
            if manifest.target_path.is_relative() {
                manifest.target_path = dir.join(&manifest.target_path);
            }
        }
        Ok(manifest)
    }

    fn sample_width(&self) -> usize {
        match self.feature_kind {
            FeatureKind::RawPatches => self.n_patches * self.d_in,
            FeatureKind::Embeddings => self.d_in,
        }
    }

    fn rows_to_samples(&self, matrix: &Tensor) -> Result<Vec<Tensor>> {
        let width = self.sample_width();
        if matrix.cols() != width {
            return Err(Error::Data(format!(
                "expected {width} columns per sample, file has {}",
                matrix.cols()
            )));
        }
        (0..matrix.rows())
            .map(|i| {
                let row = matrix.row_slice(i).to_vec();
                match self.feature_kind {
                    FeatureKind::RawPatches => Tensor::new(self.n_patches, self.d_in, row),
                    FeatureKind::Embeddings => {
                        let normed = kernels::l2_normalize_rows(&row, 1, self.d_in)?;
                        Tensor::new(1, self.d_in, normed)
                    }
                }
            })
            .collect()
    }

    /// Training view: labeled source, unlabeled target.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let k = self.class_names.len();

        let (source_matrix, source_labels) = io::read_embeddings(&self.source_path)?;
        let source_labels: Vec<usize> = source_labels
            .ok_or_else(|| {
                Error::Data(format!(
                    "source file {} has no labels section",
                    self.source_path.display()
                ))
            })?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        if source_labels.len() != source_matrix.rows() {
            return Err(Error::Data(format!(
                "source labels ({}) disagree with rows ({})",
                source_labels.len(),
                source_matrix.rows()
            )));
        }
        if let Some(&bad) = source_labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "source label {bad} out of range for {k} classes"
            )));
        }

        let (target_matrix, target_labels) = io::read_embeddings(&self.target_path)?;
        if target_labels.is_some() {
            return Err(Error::Data(format!(
                "target file {} carries a training-labels section; targets must be unlabeled",
                self.target_path.display()
            )));
        }

        Ok(Dataset {
            class_names: self.class_names.clone(),
            kind: self.feature_kind,
            source: self.rows_to_samples(&source_matrix)?,
            source_labels,
            target: self.rows_to_samples(&target_matrix)?,
        })
    }

    /// Evaluation view of target ground truth.
    pub fn load_target_eval_labels(&self) -> Result<Vec<usize>> {
        let labels = io::read_eval_labels(&self.target_path)?;
        let k = self.class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= k) {
            return Err(Error::Data(format!(
                "target eval label {bad} out of range for {k} classes"
            )));
        }
        Ok(labels.into_iter().map(|l| l as usize).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_roundtrip() {
        let m = DatasetManifest {
            format_version: 1,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            feature_kind: FeatureKind::RawPatches,
            n_patches: 4,
            d_in: 8,
            source_path: "source.pdae".into(),
            target_path: "target.pdae".into(),
        };
        let back = DatasetManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn missing_keys_and_unknown_keys_fail() {
        assert!(DatasetManifest::from_text("format_version = 1\n").is_err());
        let m = DatasetManifest {
            format_version: 1,
            class_names: vec!["a".into(), "b".into()],
            feature_kind: FeatureKind::Embeddings,
            n_patches: 1,
            d_in: 8,
            source_path: "s.pdae".into(),
            target_path: "t.pdae".into(),
        };
        let text = format!("{}bogus = 1\n", m.to_text());
        assert!(DatasetManifest::from_text(&text).is_err());
    }
}
