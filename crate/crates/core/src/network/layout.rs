//! Named-tensor index over a flat parameter vector.

use crate::error::{Error, Result};

/// Handle to one named tensor inside a [`ParamLayout`].
pub type TensorId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered registry of (name, shape, offset) entries; the parameter vector of
/// a model is the concatenation of all tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> TensorId {
        let len: usize = shape.iter().product();
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
        };
        self.total += len;
        self.tensors.push(spec);
        self.tensors.len() - 1
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor containing flat parameter index `idx`.
    pub fn name_of_index(&self, idx: usize) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| idx >= t.offset && idx < t.offset + t.len)
            .map(|t| t.name.as_str())
    }

    pub fn slice<'a>(&self, id: TensorId, flat: &'a [f64]) -> &'a [f64] {
        let s = &self.tensors[id];
        &flat[s.offset..s.offset + s.len]
    }

    pub fn slice_mut<'a>(&self, id: TensorId, flat: &'a mut [f64]) -> &'a mut [f64] {
        let s = &self.tensors[id];
        &mut flat[s.offset..s.offset + s.len]
    }

    /// Check a flat vector against the layout's total size.
    pub fn check_flat(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layout expects {}",
                flat.len(),
                self.total
            )));
        }
        Ok(())
    }
}
