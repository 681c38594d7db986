//! Split manifests: one entry per line, `<tag>\t<image>\t[label]`.
//!
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::format::{read_image, read_labels};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Labeled,
    Unlabeled,
    Val,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Labeled => "labeled",
            SplitTag::Unlabeled => "unlabeled",
            SplitTag::Val => "val",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(SplitTag::Labeled),
            "unlabeled" => Ok(SplitTag::Unlabeled),
            "val" => Ok(SplitTag::Val),
            other => Err(Error::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub tag: SplitTag,
    pub image: PathBuf,
    /// Required for labeled and val entries; ignored for unlabeled ones.
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl SplitManifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::invalid(format!("manifest line {}: expected 2 or 3 tab-separated fields", n + 1)));
            }
            let tag = fields[0]
                .parse()
                .map_err(|e| Error::invalid(format!("manifest line {}: {e}", n + 1)))?;
            let label = fields.get(2).filter(|s| !s.is_empty()).map(PathBuf::from);
            entries.push(ManifestEntry {
                tag,
                image: PathBuf::from(fields[1]),
                label,
            });
        }
        let m = SplitManifest {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        SplitManifest::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}", e.tag, e.image.display()));
            if let Some(l) = &e.label {
                out.push_str(&format!("\t{}", l.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut val_images = HashSet::new();
        for e in &self.entries {
            if matches!(e.tag, SplitTag::Labeled | SplitTag::Val) && e.label.is_none() {
                return Err(Error::invalid(format!("{} entry {} has no label", e.tag, e.image.display())));
            }
            if e.tag == SplitTag::Val {
                val_images.insert(&e.image);
            }
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.tag != SplitTag::Val && val_images.contains(&e.image))
        {
            return Err(Error::invalid(format!(
                "{} is used both for training and validation",
                e.image.display()
            )));
        }
        Ok(())
    }

    pub fn with_tag(&self, tag: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.tag == tag)
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.with_tag(tag).count()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Re-tag the training entries (labeled ∪ unlabeled): `⌊fraction · N⌋` chosen
/// by a seeded shuffle become labeled, the rest unlabeled. Val is untouched.
pub fn split_dataset(manifest: &SplitManifest, labeled_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "labeled fraction must be in (0,1), got {labeled_fraction}"
        )));
    }
    let train: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].tag != SplitTag::Val)
        .collect();
    let n_labeled = (labeled_fraction * train.len() as f64).floor() as usize;
    if n_labeled == 0 {
        return Err(Error::invalid(format!(
            "labeled fraction {labeled_fraction} of {} training volumes selects none",
            train.len()
        )));
    }
    if let Some(i) = train.iter().find(|&&i| manifest.entries[i].label.is_none()) {
        return Err(Error::invalid(format!(
            "training entry {} has no label and cannot be re-split",
            manifest.entries[*i].image.display()
        )));
    }
    let mut order = train.clone();
    order.shuffle(&mut rng::stream(seed, Stream::Split, &[]));
    let chosen: HashSet<usize> = order[..n_labeled].iter().copied().collect();
    let mut out = manifest.clone();
    for &i in &train {
        out.entries[i].tag = if chosen.contains(&i) {
            SplitTag::Labeled
        } else {
            SplitTag::Unlabeled
        };
    }
    Ok(out)
}

/// All volumes referenced by a manifest, loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
    pub val: Vec<(Volume, LabelMap)>,
}

impl Dataset {
    pub fn load(manifest: &SplitManifest, num_classes: usize) -> Result<Self> {
        manifest.validate()?;
        let mut ds = Dataset {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            val: Vec::new(),
        };
        for e in &manifest.entries {
            let x = read_image(&manifest.resolve(&e.image))?;
            let pair = |x: Volume| -> Result<(Volume, LabelMap)> {
                let lp = manifest.resolve(e.label.as_ref().expect("validated"));
                let y = read_labels(&lp, num_classes)?;
                if y.dims() != x.dims() {
                    return Err(Error::shape(format!(
                        "{}: label dims {:?} differ from image dims {:?}",
                        lp.display(),
                        y.dims(),
                        x.dims()
                    )));
                }
                Ok((x, y))
            };
            match e.tag {
                SplitTag::Labeled => ds.labeled.push(pair(x)?),
                SplitTag::Val => ds.val.push(pair(x)?),
                SplitTag::Unlabeled => ds.unlabeled.push(x),
            }
        }
        Ok(ds)
    }

    /// Voxel count per class over the labeled split.
    pub fn labeled_class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for (_, y) in &self.labeled {
            for (c, n) in y.class_counts().into_iter().enumerate() {
                counts[c] += n;
            }
        }
        counts
    }
}
