//! Ordered, named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named tensors in insertion order.
///
/// Each entry carries a `decay` flag: weight matrices, embeddings and
/// positional tables are decayed and L2-penalized; biases and normalization
/// gains are not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: BTreeMap<String, usize>,
}

/// Summary of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub tensors: usize,
    pub scalars: usize,
    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub checksum: u64,
}

/// Parameters recorded on a tape, one [`Var`] per stored tensor.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Var of the tensor at `index`. Panics if that tensor was not bound.
    pub fn var(&self, index: usize) -> Var {
        self.vars[index].expect("parameter not bound on this tape")
    }

    pub fn get(&self, index: usize) -> Option<Var> {
        self.vars[index]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Panics on duplicate names, which indicates a
    /// layout bug rather than bad input.
    pub fn insert(&mut self, name: &str, tensor: Tensor, decay: bool) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.decay.push(decay);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a tensor, requiring the shape to stay the same.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Dimension {
                op: "set_parameter",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| Some(tape.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but leaves the tensors in `skip` off the tape.
    pub fn bind_except(&self, tape: &mut Tape, trainable: bool, skip: &[usize]) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (!skip.contains(&i)).then(|| tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All values flattened in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn census(&self) -> Census {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        Census {
            tensors: self.len(),
            scalars: self.scalar_count(),
            checksum: h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::ones(&[2, 3]), true);
        a.insert("b", Tensor::zeros(&[3]), false);
        let c = a.census();
        assert_eq!((c.tensors, c.scalars), (2, 9));
        let mut b = a.clone();
        assert_eq!(b.census(), c);
        b.get_mut("b").unwrap().data_mut()[0] = -0.0;
        assert_ne!(b.census().checksum, c.checksum);
    }

    #[test]
    fn set_checks_shape() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::ones(&[2, 3]), true);
        assert!(a.set("w", Tensor::ones(&[3, 2])).is_err());
        assert!(a.set("missing", Tensor::ones(&[1])).is_err());
        a.set("w", Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(a.get("w").unwrap().sum(), 0.0);
    }
}
