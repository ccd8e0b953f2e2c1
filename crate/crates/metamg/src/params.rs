//! Named model parameters: an ordered set of shaped f64 arrays, shared by the
//! trainable smoothers, the optimizer, and the checkpoint format.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Param> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "param data length {} != shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        })
    }
}

/// An ordered, name-addressable parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param) -> Result<usize> {
        if self.index_of(&p.name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name '{}'",
                p.name
            )));
        }
        self.params.push(p);
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named '{}'", name)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zero-filled clone with the same names and shapes (gradient buffers).
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    /// Check two sets are structurally identical (names, order, shapes).
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_lookup() {
        let mut s = ParamSet::new();
        s.push(Param::new("w", &[2, 3], vec![0.0; 6]).unwrap()).unwrap();
        s.push(Param::new("b", &[3], vec![1.0; 3]).unwrap()).unwrap();
        assert_eq!(s.index_of("b"), Some(1));
        assert_eq!(s.get("w").unwrap().shape, vec![2, 3]);
        assert_eq!(s.total_values(), 9);
        assert!(s.push(Param::new("w", &[1], vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn shape_validation() {
        assert!(Param::new("x", &[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn zeros_like_preserves_structure() {
        let mut s = ParamSet::new();
        s.push(Param::new("w", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let z = s.zeros_like();
        assert!(s.same_structure(&z));
        assert!(z.params[0].data.iter().all(|&x| x == 0.0));
    }
}
