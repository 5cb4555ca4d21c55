//! JSON dataset manifest shared by every pipeline command.
//!
//! Paths inside a manifest are relative to the directory holding the
//! manifest file unless they are absolute.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{read_band_image, read_label_mask, read_probability_map};
use crate::imgcore::{Band, LabelMask, MultispectralFrame, ProbabilityMap};

pub const SCHEMA_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotType {
    Crop,
    Weed,
    Mixed,
}

impl PlotType {
    pub fn name(self) -> &'static str {
        match self {
            PlotType::Crop => "crop",
            PlotType::Weed => "weed",
            PlotType::Mixed => "mixed",
        }
    }
}

impl fmt::Display for PlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    /// Band name to image path.
    pub bands: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<PathBuf>,
    pub split: Split,
    pub plot_type: PlotType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

fn check_schema(version: &str) -> Result<()> {
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::Manifest(format!("unreadable schema_version {version:?}")))?;
    if major != SUPPORTED_MAJOR {
        return Err(Error::Manifest(format!(
            "unsupported schema major version {major} (supported: {SUPPORTED_MAJOR})"
        )));
    }
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|d| d.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

impl DatasetManifest {
    /// Empty manifest whose relative paths resolve against `root`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION.to_string(),
            entries: Vec::new(),
            root: absolute(&root.into()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Manifest("missing schema_version".into()))?;
        check_schema(version)?;
        let mut m: DatasetManifest =
            serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = absolute(&root.into());
        m.validate()?;
        Ok(m)
    }

    /// Reads and validates a manifest; every band and mask file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let m = Self::from_json(&text, root)?;
        for e in &m.entries {
            for p in e.bands.values().chain(&e.mask) {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(&self.schema_version)?;
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.frame_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate frame_id {:?}", e.frame_id)));
            }
            if e.bands.is_empty() {
                return Err(Error::Manifest(format!("frame {:?} lists no bands", e.frame_id)));
            }
            if e.split == Split::Train && e.mask.is_none() {
                return Err(Error::Manifest(format!(
                    "train frame {:?} has no mask",
                    e.frame_id
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest to `path`, re-expressing paths relative to its
    /// new directory where possible and absolute otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        let dir = absolute(path.parent().unwrap_or(Path::new(".")));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = self.clone();
        let rebase = |p: &PathBuf| {
            let full = self.resolve(p);
            full.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(full)
        };
        for e in &mut out.entries {
            for p in e.bands.values_mut() {
                *p = rebase(p);
            }
            e.mask = e.mask.as_ref().map(rebase);
            e.prediction = e.prediction.as_ref().map(rebase);
            e.probabilities = e.probabilities.as_ref().map(rebase);
        }
        out.root = dir;
        let mut text = serde_json::to_string_pretty(&out)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, frame_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.frame_id == frame_id)
    }

    pub fn load_frame(&self, e: &ManifestEntry) -> Result<MultispectralFrame> {
        let bands = e
            .bands
            .iter()
            .map(|(name, p)| read_band_image(self.resolve(p), Band::from_name(name)))
            .collect::<Result<Vec<_>>>()?;
        MultispectralFrame::new(e.frame_id.clone(), bands)
    }

    pub fn load_mask(&self, e: &ManifestEntry) -> Result<Option<LabelMask>> {
        e.mask
            .as_ref()
            .map(|p| read_label_mask(self.resolve(p)))
            .transpose()
    }

    pub fn load_prediction(&self, e: &ManifestEntry) -> Result<Option<LabelMask>> {
        e.prediction
            .as_ref()
            .map(|p| read_label_mask(self.resolve(p)))
            .transpose()
    }

    pub fn load_probabilities(&self, e: &ManifestEntry) -> Result<Option<ProbabilityMap>> {
        e.probabilities
            .as_ref()
            .map(|p| read_probability_map(self.resolve(p)))
            .transpose()
    }
}
