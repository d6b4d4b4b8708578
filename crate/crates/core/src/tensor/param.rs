use std::collections::HashMap;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Non-learned state carried with the model (normalization running stats).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub grad: Vec<T>,
}

/// Named parameter table of a model. Names are unique.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            kind,
            trainable: kind == ParamKind::Weight,
            grad: vec![T::zero(); n],
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of learned scalars (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = p.kind == ParamKind::Weight && pred(&p.name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Places every weight on `graph` as a leaf; trainable ones record
    /// gradients. Buffers are not bound.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(match p.kind {
                ParamKind::Weight => Some(graph.leaf(p.value.clone(), p.trainable)?),
                ParamKind::Buffer => None,
            });
        }
        Ok(Bound { vars })
    }

    /// Adds the graph's leaf gradients into the parameter accumulators.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let (Some(v), true) = (v, p.trainable) {
                if let Some(g) = graph.grad(*v) {
                    p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                    grad: p.grad.iter().map(|&g| U::of(g.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are never bound")
    }
}
