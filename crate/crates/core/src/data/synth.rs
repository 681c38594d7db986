//! Synthetic imbalanced 3D segmentation data.
//!
//! Each volume holds one random axis-aligned ellipsoid per foreground class.
//! Target sizes decay geometrically with the class index, so class 1 is the
//! most common foreground class and class `C - 1` the rarest. Rarer classes
//! are painted last and stay fully visible. Each class has its own intensity
//! level (background 0), plus i.i.d. Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::format::{write_image, write_labels};
use crate::data::manifest::{split_dataset, ManifestEntry, SplitManifest, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{Dims, LabelMap, Spacing, Volume};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Training volumes (labeled + unlabeled).
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub dims: Dims,
    pub num_classes: usize,
    /// Ratio between the target sizes of consecutive foreground classes.
    pub decay: f64,
    /// Target fraction of the volume covered by class 1.
    pub largest_fraction: f64,
    pub noise_sigma: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_volumes: 12,
            val_volumes: 4,
            dims: Dims::cube(32),
            num_classes: 5,
            decay: 0.35,
            largest_fraction: 0.15,
            noise_sigma: 0.3,
            labeled_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::invalid(format!("num_classes must be in 2..=256, got {}", self.num_classes)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid(format!("decay must be in (0,1), got {}", self.decay)));
        }
        if !(self.largest_fraction > 0.0 && self.largest_fraction < 1.0) {
            return Err(Error::invalid("largest_fraction must be in (0,1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.dims.as_array().iter().any(|&d| d < 4) {
            return Err(Error::invalid(format!("dims {:?} too small, need >= 4 per axis", self.dims.as_array())));
        }
        let rarest = self.target_radius(self.num_classes - 1);
        if rarest < 1.0 {
            return Err(Error::invalid(format!(
                "dims {:?} too small to place {} ellipsoids (rarest radius {rarest:.2} voxels)",
                self.dims.as_array(),
                self.num_classes - 1
            )));
        }
        Ok(())
    }

    /// Target voxel count of foreground class `k ≥ 1`.
    pub fn target_voxels(&self, k: usize) -> f64 {
        self.largest_fraction * self.decay.powi(k as i32 - 1) * self.dims.voxels() as f64
    }

    fn target_radius(&self, k: usize) -> f64 {
        (3.0 * self.target_voxels(k) / (4.0 * std::f64::consts::PI)).cbrt()
    }

    /// Noise-free intensity of class `c`.
    pub fn level(&self, c: usize) -> f32 {
        if c == 0 {
            0.0
        } else {
            1.0 + 0.5 * (c - 1) as f32
        }
    }
}

fn split_key(tag: SplitTag) -> u64 {
    match tag {
        SplitTag::Val => 1,
        _ => 0,
    }
}

/// One image/label pair; deterministic in `(spec, tag, index)`.
pub fn synth_volume(spec: &SynthSpec, tag: SplitTag, index: usize) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synth, &[split_key(tag), index as u64]);
    let dims = spec.dims;
    let mut labels = vec![0u8; dims.voxels()];
    let extent = dims.as_array().map(|d| d as f64);
    for k in 1..spec.num_classes {
        let r = spec.target_radius(k);
        let e1: f64 = rng.gen_range(0.85..1.18);
        let e2: f64 = rng.gen_range(0.85..1.18);
        let mut axes = [r * e1, r * e2, r / (e1 * e2)];
        let mut center = [0.0; 3];
        for i in 0..3 {
            let half = (extent[i] - 1.0) / 2.0;
            axes[i] = axes[i].min(half);
            center[i] = if axes[i] >= half {
                half
            } else {
                rng.gen_range(axes[i]..=extent[i] - 1.0 - axes[i])
            };
        }
        let lo = |i: usize| (center[i] - axes[i]).floor().max(0.0) as usize;
        let hi = |i: usize| ((center[i] + axes[i]).ceil() as usize).min(dims.as_array()[i] - 1);
        for z in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for x in lo(2)..=hi(2) {
                    let q = [z as f64, y as f64, x as f64];
                    let s: f64 = (0..3).map(|i| ((q[i] - center[i]) / axes[i]).powi(2)).sum();
                    if s <= 1.0 {
                        labels[dims.index(z, y, x)] = k as u8;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let data = labels
        .iter()
        .map(|&c| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            spec.level(c as usize) + n as f32
        })
        .collect();
    let x = Volume::new(dims, Spacing::default(), data)?;
    let y = LabelMap::new(dims, spec.num_classes, labels)?;
    Ok((x, y))
}

/// Write the dataset to `out_dir` and return its split manifest (also
/// written as `manifest.tsv`).
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SplitManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for (tag, prefix, count) in [
        (SplitTag::Unlabeled, "train", spec.train_volumes),
        (SplitTag::Val, "val", spec.val_volumes),
    ] {
        for i in 0..count {
            let (x, y) = synth_volume(spec, tag, i)?;
            let image = PathBuf::from(format!("{prefix}_{i:03}_img.mvol"));
            let label = PathBuf::from(format!("{prefix}_{i:03}_lbl.mvol"));
            write_image(&out_dir.join(&image), &x)?;
            write_labels(&out_dir.join(&label), &y, x.spacing())?;
            entries.push(ManifestEntry {
                tag,
                image,
                label: Some(label),
            });
        }
    }
    let all = SplitManifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    let split = split_dataset(&all, spec.labeled_fraction, spec.seed)?;
    split.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(split)
}
