//! Random cubic patch masking: `x_m = M(r, s) ⊙ x`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of patches to zero, in `[0, 1]`.
    pub ratio: f64,
    /// Edge length of the cubic patches, in voxels.
    pub patch_edge: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 0.4,
            patch_edge: 3,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("mask ratio must be in [0,1], got {}", self.ratio)));
        }
        if self.patch_edge == 0 {
            return Err(Error::invalid("mask patch edge must be >= 1"));
        }
        Ok(())
    }

    /// Patch-grid extent `(⌈D/s⌉, ⌈H/s⌉, ⌈W/s⌉)`.
    pub fn grid(&self, dims: Dims) -> [usize; 3] {
        let s = self.patch_edge;
        [dims.d.div_ceil(s), dims.h.div_ceil(s), dims.w.div_ceil(s)]
    }

    pub fn patch_count(&self, dims: Dims) -> usize {
        self.grid(dims).iter().product()
    }

    /// Number of patches that get masked: `round(r · P)`, halves rounded up.
    pub fn masked_patches(&self, dims: Dims) -> usize {
        let p = self.patch_count(dims);
        ((self.ratio * p as f64) + 0.5).floor().min(p as f64) as usize
    }

    /// The spec used for one (image, iteration) draw.
    pub fn for_draw(&self, image_id: u64, iteration: u64) -> MaskSpec {
        MaskSpec {
            seed: rng::derive_seed(self.seed, &[image_id, iteration]),
            ..*self
        }
    }
}

/// A realized 0/1 mask; 0 marks a masked voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn ones(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![1; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn masked_voxels(&self) -> usize {
        self.data.iter().filter(|&&m| m == 0).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_voxels() as f64 / self.data.len() as f64
    }
}

pub fn generate_mask(spec: &MaskSpec, dims: Dims) -> Result<BinaryMask> {
    spec.validate()?;
    if !dims.is_positive() {
        return Err(Error::invalid(format!("mask dims must be positive, got {dims:?}")));
    }
    let s = spec.patch_edge;
    let [gd, gh, gw] = spec.grid(dims);
    let total = gd * gh * gw;
    let k = spec.masked_patches(dims);

    let mut patch_masked = vec![false; total];
    let mut rng = rng::stream(spec.seed, Stream::Mask, &[]);
    for p in sample(&mut rng, total, k) {
        patch_masked[p] = true;
    }

    let mut data = vec![1u8; dims.voxels()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            let row = dims.index(z, y, 0);
            let prow = ((z / s) * gh + y / s) * gw;
            for x in 0..dims.w {
                if patch_masked[prow + x / s] {
                    data[row + x] = 0;
                }
            }
        }
    }
    Ok(BinaryMask { dims, data })
}

pub fn apply_mask(x: &Volume, m: &BinaryMask) -> Result<Volume> {
    if x.dims() != m.dims {
        return Err(Error::shape(format!(
            "mask dims {:?} do not match volume dims {:?}",
            m.dims,
            x.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(&m.data)
        .map(|(&v, &keep)| if keep == 1 { v } else { 0.0 })
        .collect();
    Volume::new(x.dims(), x.spacing(), data)
}
