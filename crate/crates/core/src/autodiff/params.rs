use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named registry of trainable tensors. Each model owns exactly one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Overwrites a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                format!("`{}` is {:?}, got {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value.clone();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn assign_checks_shape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.assign(id, &Tensor::zeros(&[4])).is_err());
        store.assign(id, &Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert_eq!(store.get(id).data(), &[1.0; 4]);
    }
}
