use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One trainable array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely named collection of every trainable array of a model.
/// Gradients and optimizer moments reuse the same type and layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    arrays: Vec<NamedArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "parameter `{name}`: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{name}`")));
        }
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(self.arrays.len() - 1))
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.arrays[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.arrays[id.0].data
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [NamedArray] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: vec![0.0; a.data.len()],
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.data.len();
            a.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += scale * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            a.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn from_arrays(arrays: Vec<NamedArray>) -> Self {
        Self { arrays }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_checked() {
        let mut s = ParamStore::new();
        s.add("a", &[2, 2], vec![0.0; 4]).unwrap();
        assert!(s.add("a", &[1], vec![0.0]).is_err());
        assert!(matches!(s.add("b", &[3], vec![0.0; 2]), Err(Error::Shape(_))));
        assert_eq!(s.num_scalars(), 4);
    }

    #[test]
    fn flat_round_trip() {
        let mut s = ParamStore::new();
        s.add("a", &[2], vec![1.0, 2.0]).unwrap();
        s.add("b", &[1], vec![3.0]).unwrap();
        let f = s.flat();
        assert_eq!(f, vec![1.0, 2.0, 3.0]);
        let mut t = s.zeros_like();
        t.set_flat(&f).unwrap();
        assert_eq!(s, t);
        assert!(t.set_flat(&[1.0]).is_err());
    }
}
