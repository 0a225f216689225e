//! Named parameter arrays shared by the connector and the language model.
//!
//! Values are kept in f64 for the numerics but rounded to f32 after every
//! update, so a checkpoint (which stores f32) reloads to exactly the same
//! model.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::Rng64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    /// Logical shape: rank 1 for biases and gains, rank 2 otherwise.
    pub shape: Vec<usize>,
    /// Storage; rank-1 parameters are held as a single row.
    pub value: Array2<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Array2<f64>, frozen: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "shape {shape:?} does not match storage for `{name}`"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: value.mapv(round_f32),
            frozen,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Matrix initialized from N(0, std^2).
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, frozen: bool, rng: &mut Rng64) -> ParamId {
        let value = Array2::from_shape_simple_fn((rows, cols), || std * rng.normal());
        self.insert(name, &[rows, cols], value, frozen)
    }

    /// Rank-1 parameter filled with a constant.
    pub fn constant(&mut self, name: &str, len: usize, value: f64, frozen: bool) -> ParamId {
        self.insert(name, &[len], Array2::from_elem((1, len), value), frozen)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, frozen: bool) -> ParamId {
        self.insert(name, &[rows, cols], Array2::zeros((rows, cols)), frozen)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn names(&self, frozen: bool) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.frozen == frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn count(&self, frozen: bool) -> usize {
        self.params.iter().filter(|p| p.frozen == frozen).map(Param::len).sum()
    }

    /// Overwrites a parameter's value, keeping the f32-representable invariant.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        let param = &mut self.params[id.0];
        if param.value.dim() != value.dim() {
            return Err(Error::shape(format!(
                "`{}` expects {:?}, got {:?}",
                param.name,
                param.value.dim(),
                value.dim()
            )));
        }
        param.value = value.mapv(round_f32);
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(round_f32);
        }
    }
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(1);
        let w = store.normal("w", 3, 2, 0.02, false, &mut rng);
        let b = store.constant("b", 2, 1.0, true);
        assert_eq!(store.id("w"), Some(w));
        assert_eq!(store.get(b).shape, vec![2]);
        assert_eq!(store.count(false), 6);
        assert_eq!(store.count(true), 2);
        assert_eq!(store.trainable_ids(), vec![w]);
        assert_eq!(store.names(true), vec!["b".to_string()]);
    }

    #[test]
    fn values_are_f32_representable() {
        let mut store = ParamStore::new();
        let id = store.insert("x", &[1, 1], Array2::from_elem((1, 1), 0.1), false);
        let v = store.value(id)[[0, 0]];
        assert_eq!(v, 0.1f32 as f64);
        assert!(store.set(id, Array2::zeros((2, 1))).is_err());
    }
}
