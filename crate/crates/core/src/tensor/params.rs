use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::array::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer treatment of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Default,
    /// Convolutional backbone weights (reduced learning rate).
    Backbone,
    /// Sampling-offset projections of deformable attention (reduced learning rate).
    SamplingProjection,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Rc<Array>,
    group: ParamGroup,
    decay: bool,
    trainable: bool,
}

/// Named model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Glorot uniform over (fan_in, fan_out).
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Uniform(f64, f64),
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        // Biases and normalization affine terms are 1-D; they are not decayed.
        let decay = shape.len() > 1;
        self.insert(name.into(), Array::from_vec(shape, data), group, decay)
    }

    /// Adds a parameter with an explicit value.
    pub fn add_value(&mut self, name: impl Into<String>, value: Array, group: ParamGroup) -> ParamId {
        let decay = value.ndim() > 1;
        self.insert(name.into(), value, group, decay)
    }

    fn insert(&mut self, name: String, value: Array, group: ParamGroup, decay: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Rc::new(value),
            group,
            decay,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub(crate) fn value_rc(&self, id: ParamId) -> Rc<Array> {
        self.entries[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Array) {
        assert_eq!(
            value.shape(),
            self.value(id).shape(),
            "shape change for {}",
            self.name(id)
        );
        self.entries[id.0].value = Rc::new(value);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Snapshot of all values keyed by name.
    pub fn to_named(&self) -> BTreeMap<String, Array> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }

    /// Overwrites values from a named snapshot. Every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Array>) -> Result<(), String> {
        if named.len() != self.entries.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                named.len()
            ));
        }
        for e in &mut self.entries {
            let v = named
                .get(&e.name)
                .ok_or_else(|| format!("missing parameter {}", e.name))?;
            if v.shape() != e.value.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                ));
            }
            e.value = Rc::new(v.clone());
        }
        Ok(())
    }
}
