use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::DetRng;

/// Which learning rate a parameter trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Vec<f64>,
}

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: ParamGroup,
        value: Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "parameter {name} has the wrong length"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            shape,
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: ParamGroup,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, group, vec![0.0; n])
    }

    pub fn filled(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: ParamGroup,
        v: f64,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, group, vec![v; n])
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        group: ParamGroup,
        rng: &mut DetRng,
    ) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, shape, group, value)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut DetRng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound, group, rng)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
