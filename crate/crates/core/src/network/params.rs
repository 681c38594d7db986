use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Name and shape of one tensor, without data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T = f32> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamVector<T> {
    pub fn new(tensors: Vec<ParamTensor<T>>) -> Result<Self> {
        for t in &tensors {
            let want: usize = t.shape.iter().product();
            if want != t.data.len() {
                return Err(Error::shape(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
        }
        Ok(ParamVector { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn at(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub(crate) fn at_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.tensors[idx].data
    }

    pub fn manifest(&self) -> Vec<TensorInfo> {
        self.tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect()
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout<U: Real>(&self, other: &ParamVector<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout<U: Real>(&self, other: &ParamVector<U>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter vectors differ in names or shapes"))
        }
    }

    /// Value at a flat position across all tensors (in manifest order).
    pub fn get_flat(&self, mut idx: usize) -> T {
        for t in &self.tensors {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: T) {
        for t in &mut self.tensors {
            if idx < t.data.len() {
                t.data[idx] = value;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Name of the tensor holding a flat position.
    pub fn flat_owner(&self, mut idx: usize) -> &str {
        for t in &self.tensors {
            if idx < t.data.len() {
                return &t.name;
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Element-wise update `self[i] = f(self[i], other[i])`; layouts must match.
    pub fn zip_apply(&mut self, other: &ParamVector<T>, mut f: impl FnMut(&mut T, T)) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                f(x, y);
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamVector<T>) -> Result<()> {
        self.zip_apply(other, |a, b| *a += b)
    }

    /// Euclidean distance, accumulated in `f64`.
    pub fn distance(&self, other: &ParamVector<T>) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .iter_values()
            .zip(other.iter_values())
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }
}
