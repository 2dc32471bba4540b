use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, uniquely named set of parameter tensors. Shapes are fixed once
/// an entry is inserted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateParameter(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ModelParams::set",
                expected: slot.1.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.len()])))
                .collect(),
        }
    }

    /// Returns a copy with one scalar coordinate shifted by `delta`.
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> Result<Self> {
        let mut out = self.clone();
        let t = out.require(name)?;
        if index >= t.len() {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for `{name}` ({} entries)",
                t.len()
            )));
        }
        let mut data = t.data().to_vec();
        data[index] += delta;
        let shape = t.shape().to_vec();
        out.set(name, Tensor::new(shape, data)?)?;
        Ok(out)
    }

    fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: {} vs {} parameter tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::UnknownParameter(nb.clone()));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    expected: ta.shape().to_vec(),
                    got: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self += a * other`, entry by entry.
    pub fn add_scaled(&mut self, a: f64, other: &Self) -> Result<()> {
        self.check_layout(other, "ModelParams::add_scaled")?;
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            let data: Vec<f64> = t.data().iter().zip(o.data()).map(|(x, y)| x + a * y).collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("ModelParams::add_scaled"));
            }
            *t = Tensor::from_parts(t.shape().to_vec(), data);
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for (_, t) in &mut self.entries {
            let data = t.data().iter().map(|v| a * v).collect();
            *t = Tensor::from_parts(t.shape().to_vec(), data);
        }
    }
}
