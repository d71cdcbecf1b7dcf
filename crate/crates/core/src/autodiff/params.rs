use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter path {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter path {0:?}")]
    Unknown(String),
    #[error("parameter {path:?}: expected shape {expected:?}, found {found:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, path: impl Into<String>, value: Tensor) -> Result<ParamId, ParamError> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(ParamError::Duplicate(path));
        }
        let id = ParamId(self.values.len());
        self.index.insert(path.clone(), id);
        self.names.push(path);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values by path. Every path of `self` must be present in
    /// `other` with the same shape.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other.by_path(name).ok_or_else(|| ParamError::Unknown(name.clone()))?;
            if src.shape() != value.shape() {
                return Err(ParamError::Shape {
                    path: name.clone(),
                    expected: value.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// How freshly registered weights are filled.
pub enum Init<'a> {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(&'a mut dyn rand::RngCore),
    Zeros,
}

impl Init<'_> {
    pub fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let Init::FanIn(rng) = self {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        t
    }
}

/// One gradient tensor per parameter, aligned with the store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.grads[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParamStore::new();
        s.register("a/w", Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(
            s.register("a/w", Tensor::zeros(&[1])),
            Err(ParamError::Duplicate("a/w".into()))
        );
    }

    #[test]
    fn grads_mirror_shapes() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::zeros(&[3, 4])).unwrap();
        s.register("b", Tensor::zeros(&[4])).unwrap();
        let g = ParamGrads::zeros_like(&s);
        for (id, gt) in s.ids().zip(g.iter()) {
            assert_eq!(s.get(id).shape(), gt.shape());
        }
    }

    #[test]
    fn assign_checks_shapes() {
        let mut a = ParamStore::new();
        a.register("w", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::new();
        b.register("w", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(a.assign_from(&b), Err(ParamError::Shape { .. })));
    }
}
