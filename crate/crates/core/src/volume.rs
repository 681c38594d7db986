//! Grid types shared by every stage of the pipeline, plus the softmax,
//! argmax and one-hot primitives that turn logits into probabilities and
//! probabilities into (pseudo-)labels.
//!
//! All grids are row-major with `x` fastest: voxel `(z, y, x)` lives at
//! `(z * h + y) * w + x`. Multi-channel maps are stored channel-planar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Tolerance on the per-voxel probability sum.
pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { d: n, h: n, w: n }
    }

    pub const fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_positive(&self) -> bool {
        self.d > 0 && self.h > 0 && self.w > 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.w;
        let y = (index / self.w) % self.h;
        let z = index / (self.w * self.h);
        (z, y, x)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    /// Dims after one stride-2 downsampling.
    pub fn halved(&self) -> Dims {
        Dims::new(self.d / 2, self.h / 2, self.w / 2)
    }

    pub fn doubled(&self) -> Dims {
        Dims::new(self.d * 2, self.h * 2, self.w * 2)
    }
}

/// Voxel spacing in millimetres, ordered `(sz, sy, sx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f32; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

impl Spacing {
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// A scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if !dims.is_positive() {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if !spacing.is_valid() {
            return Err(Error::invalid(format!("spacing must be positive, got {:?}", spacing.0)));
        }
        if data.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                dims.voxels()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (z, y, x) = dims.coords(i);
            return Err(Error::NonFinite {
                value: data[i] as f64,
                z,
                y,
                x,
                channel: 0,
            });
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![0.0; dims.voxels()],
        }
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![value; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-voxel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::invalid(format!("num_classes must be in 2..=256, got {num_classes}")));
        }
        if data.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "label data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                dims.voxels()
            )));
        }
        if let Some(i) = data.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: data[i] as usize,
                index: i,
                num_classes,
            });
        }
        Ok(LabelMap {
            dims,
            num_classes,
            data,
        })
    }

    pub fn zeros(dims: Dims, num_classes: usize) -> Result<Self> {
        LabelMap::new(dims, num_classes, vec![0; dims.voxels()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn label(&self, index: usize) -> usize {
        self.data[index] as usize
    }

    /// Re-tag with a different class count, validating every label.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        LabelMap::new(self.dims, num_classes, self.data)
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.data {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Multi-channel map over a grid: network logits and decoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    /// Decoder stage this map was tapped from (1..=4), or 0 for logits.
    pub stage: usize,
    dims: Dims,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(stage: usize, dims: Dims, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != channels * dims.voxels() {
            return Err(Error::shape(format!(
                "feature map has {} values, expected {} channels x {:?}",
                data.len(),
                channels,
                dims
            )));
        }
        Ok(FeatureMap {
            stage,
            dims,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.dims.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn same_shape(&self, other: &FeatureMap<T>) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }
}

/// Per-voxel probability simplex over `num_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T = f32> {
    dims: Dims,
    num_classes: usize,
    data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    /// Build from channel-planar data, checking the simplex invariant.
    pub fn new(dims: Dims, num_classes: usize, data: Vec<T>) -> Result<Self> {
        if num_classes < 2 || data.len() != num_classes * dims.voxels() {
            return Err(Error::shape(format!(
                "prob map has {} values, expected {} classes x {:?}",
                data.len(),
                num_classes,
                dims
            )));
        }
        let n = dims.voxels();
        for v in 0..n {
            let mut sum = 0.0f64;
            for c in 0..num_classes {
                let p = data[c * n + v].as_f64();
                if !(p >= 0.0) {
                    let (z, y, x) = dims.coords(v);
                    return Err(Error::invalid(format!(
                        "probability {p} < 0 at voxel ({z},{y},{x}) class {c}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                let (z, y, x) = dims.coords(v);
                return Err(Error::invalid(format!(
                    "probabilities sum to {sum} at voxel ({z},{y},{x})"
                )));
            }
        }
        Ok(ProbMap {
            dims,
            num_classes,
            data,
        })
    }

    /// Same value at every voxel.
    pub fn uniform(dims: Dims, num_classes: usize) -> Self {
        let p = T::from_f64(1.0 / num_classes as f64);
        ProbMap {
            dims,
            num_classes,
            data: vec![p; num_classes * dims.voxels()],
        }
    }

    pub(crate) fn from_raw(dims: Dims, num_classes: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), num_classes * dims.voxels());
        ProbMap {
            dims,
            num_classes,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn prob(&self, class: usize, index: usize) -> T {
        self.data[class * self.dims.voxels() + index]
    }

    pub fn class_plane(&self, class: usize) -> &[T] {
        let n = self.dims.voxels();
        &self.data[class * n..(class + 1) * n]
    }

    /// Voxel-wise average of several maps with identical shape.
    pub fn average(maps: &[&ProbMap<T>]) -> Result<ProbMap<T>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("cannot average zero probability maps"))?;
        if maps
            .iter()
            .any(|m| m.dims != first.dims || m.num_classes != first.num_classes)
        {
            return Err(Error::shape("averaged probability maps differ in shape"));
        }
        let scale = T::from_f64(1.0 / maps.len() as f64);
        let mut data = vec![T::zero(); first.data.len()];
        for m in maps {
            for (d, &p) in data.iter_mut().zip(&m.data) {
                *d += p;
            }
        }
        data.iter_mut().for_each(|d| *d *= scale);
        Ok(ProbMap::from_raw(first.dims, first.num_classes, data))
    }
}

/// Channel-wise softmax of a logit map; one simplex per voxel.
pub fn softmax_over_classes<T: Real>(logits: &FeatureMap<T>) -> Result<ProbMap<T>> {
    let n = logits.dims.voxels();
    let c = logits.channels;
    if c < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    if let Some(i) = logits.data.iter().position(|v| !v.is_finite()) {
        let (z, y, x) = logits.dims.coords(i % n);
        return Err(Error::NonFinite {
            value: logits.data[i].as_f64(),
            z,
            y,
            x,
            channel: i / n,
        });
    }
    let mut out = vec![T::zero(); c * n];
    softmax_planar(&logits.data, c, n, &mut out);
    Ok(ProbMap::from_raw(logits.dims, c, out))
}

/// Softmax over `channels` planes of length `n`; inputs assumed finite.
pub(crate) fn softmax_planar<T: Real>(input: &[T], channels: usize, n: usize, out: &mut [T]) {
    for v in 0..n {
        let mut max = input[v];
        for k in 1..channels {
            max = max.max(input[k * n + v]);
        }
        let mut sum = 0.0f64;
        for k in 0..channels {
            let e = (input[k * n + v] - max).exp();
            out[k * n + v] = e;
            sum += e.as_f64();
        }
        let inv = T::from_f64(1.0 / sum);
        for k in 0..channels {
            out[k * n + v] *= inv;
        }
    }
}

/// Per-voxel log-softmax, computed in `f64`.
pub(crate) fn log_softmax_planar<T: Real>(input: &[T], channels: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; channels * n];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..channels {
            max = max.max(input[k * n + v].as_f64());
        }
        let mut sum = 0.0f64;
        for k in 0..channels {
            sum += (input[k * n + v].as_f64() - max).exp();
        }
        let lse = max + sum.ln();
        for k in 0..channels {
            out[k * n + v] = input[k * n + v].as_f64() - lse;
        }
    }
    out
}

/// Hard labels from probabilities. Ties resolve to the lowest class index.
pub fn argmax_label<T: Real>(p: &ProbMap<T>) -> LabelMap {
    let n = p.dims.voxels();
    let mut data = vec![0u8; n];
    for (v, out) in data.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_p = p.data[v];
        for c in 1..p.num_classes {
            let q = p.data[c * n + v];
            if q > best_p {
                best = c;
                best_p = q;
            }
        }
        *out = best as u8;
    }
    LabelMap {
        dims: p.dims,
        num_classes: p.num_classes,
        data,
    }
}

pub fn one_hot<T: Real>(y: &LabelMap, num_classes: usize) -> Result<ProbMap<T>> {
    if num_classes < 2 {
        return Err(Error::invalid("one_hot needs at least 2 classes"));
    }
    let n = y.dims.voxels();
    let mut data = vec![T::zero(); num_classes * n];
    for (v, &l) in y.data.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                index: v,
                num_classes,
            });
        }
        data[l * n + v] = T::one();
    }
    Ok(ProbMap::from_raw(y.dims, num_classes, data))
}
