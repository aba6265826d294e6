use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::{AdError, DenseArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<DenseArray>,
    /// Adam first and second moments.
    pub m: DenseArray,
    pub v: DenseArray,
}

/// Named parameters in registration order, plus the optimizer step count.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Param { name: name.clone(), value: Arc::new(value), m: DenseArray::zeros(&shape), v: DenseArray::zeros(&shape) });
        self.index.insert(name, id);
        id
    }

    /// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), using the
    /// first axis as fan-in and the rest as fan-out.
    pub fn add_glorot(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let fan_in = shape[0] as f64;
        let fan_out = shape[1..].iter().product::<usize>().max(1) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, DenseArray::new(shape, data).expect("sized from shape"))
    }

    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(name, DenseArray::new(shape, data).expect("sized from shape"))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, DenseArray::filled(shape, v))
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

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<DenseArray> {
        &self.params[id.0].value
    }

    /// Copy-on-write access to a parameter's values.
    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names, order and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<(), AdError> {
        if self.params.len() != other.params.len() {
            return Err(AdError::Checkpoint(format!("expected {} parameters, found {}", self.params.len(), other.params.len())));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(AdError::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, p: Param) {
        let id = ParamId(self.params.len());
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
    }
}

/// Per-parameter gradient accumulator. Missing entries are zero.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    grads: Vec<Option<DenseArray>>,
}

impl GradStore {
    pub fn new(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &DenseArray) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(DenseArray::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(DenseArray::all_finite)
    }
}
