//! Dense row-major tensors and named parameter sets.
//!
//! Values are held as `f64` for arithmetic. A tensor tagged [`DType::F32`]
//! keeps every element exactly representable in 32 bits: all constructors and
//! mutators round through `f32`. This makes f32 checkpoints bit-exact while
//! letting gradient checks run the same code path at full 64-bit precision.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let mut t = Tensor { shape, data, dtype };
        t.requantize();
        Ok(t)
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect(), DType::F32)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], dtype).expect("zeros: shape has a zero dimension")
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n], dtype).expect("full: shape has a zero dimension")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mutate values in place; the dtype rounding is re-applied afterwards.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.data);
        self.requantize();
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = self.clone();
        out.update(|d| d.iter_mut().for_each(|v| *v = f(*v)));
        out
    }

    pub fn with_dtype(&self, dtype: DType) -> Tensor {
        let mut out = self.clone();
        out.dtype = dtype;
        out.requantize();
        out
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn requantize(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Layer part of a parameter entry name: `conv1.weight` belongs to `conv1`.
pub fn layer_of(entry: &str) -> &str {
    entry.split('.').next().unwrap_or(entry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    arch_id: String,
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new(arch_id: impl Into<String>) -> Self {
        ParameterSet {
            arch_id: arch_id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.insert(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}` in `{}`", self.arch_id)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Distinct layer names (entry prefixes before the first `.`).
    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.entries.keys() {
            let layer = layer_of(name);
            if out.last().map(String::as_str) != Some(layer) && !out.iter().any(|l| l == layer) {
                out.push(layer.to_string());
            }
        }
        out
    }

    pub fn is_aligned(&self, other: &ParameterSet) -> bool {
        self.check_aligned(other).is_ok()
    }

    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.arch_id != other.arch_id {
            return Err(Error::Misaligned(format!(
                "arch `{}` vs `{}`",
                self.arch_id, other.arch_id
            )));
        }
        if self.entries.len() != other.entries.len() {
            return Err(Error::Misaligned(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Misaligned(format!("entry `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Misaligned(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn with_dtype(&self, dtype: DType) -> ParameterSet {
        ParameterSet {
            arch_id: self.arch_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), t.with_dtype(dtype)))
                .collect(),
        }
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); dtype rounding applies.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.update(|d| d.copy_from_slice(&flat[offset..offset + n]));
            offset += n;
        }
        Ok(())
    }

    pub fn find_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }
}
