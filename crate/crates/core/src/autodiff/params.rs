use serde::{Deserialize, Serialize};

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.clone()).expect("checked on construction")
    }
}

/// Ordered, named collection of parameter tensors with a flat view.
///
/// Used for classifier weights and, through
/// [`PolicyParams::to_param_set`](crate::policy::PolicyParams::to_param_set),
/// for augmentation-policy parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

/// Classifier weights.
pub type ModelParams = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BufferLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        self.push(name, shape, data)?;
        Ok(self)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total_dim(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// A copy of this layout holding `flat` instead of the current values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_dim() {
            return Err(Error::Dimension {
                expected: self.total_dim(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Overwrites the values from tensors in the same order and shapes.
    pub fn set_from_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Dimension {
                expected: self.tensors.len(),
                got: values.len(),
            });
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if v.shape() != t.shape.as_slice() {
                return Err(Error::shape("set_from_tensors", &[&t.shape, v.shape()]));
            }
            t.data.copy_from_slice(v.data());
        }
        Ok(())
    }

    /// Constant tensors holding the current values.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors.iter().map(NamedTensor::tensor).collect()
    }

    /// Differentiable leaves on `tape` holding the current values.
    pub fn leaves(&self, tape: &Tape) -> Vec<Tensor> {
        tape.leaves(&self.to_tensors())
    }
}

/// Concatenated values of `tensors`.
pub fn flatten_tensors(tensors: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::numel).sum());
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

/// Splits `flat` into constant tensors with the given shapes.
pub fn split_flat(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.len() {
        return Err(Error::Dimension {
            expected: total,
            got: flat.len(),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> ParamSet {
        ParamSet::new()
            .with("w", &[2, 3], vec![0.0; 6])
            .unwrap()
            .with("b", &[3], vec![0.0; 3])
            .unwrap()
            .with("s", &[], vec![0.0])
            .unwrap()
    }

    #[test]
    fn total_dim_counts_every_element() {
        assert_eq!(layout().total_dim(), 10);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(matches!(
            layout().unflatten(&[1.0; 9]),
            Err(Error::Dimension { expected: 10, got: 9 })
        ));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips_bit_exactly(
            values in prop::collection::vec(prop::num::f64::ANY, 10)
        ) {
            let p = layout().unflatten(&values).unwrap();
            let back = p.flatten();
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let again = layout().unflatten(&back).unwrap();
            prop_assert_eq!(
                again.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
