use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sum of squared gradient entries over every tensor.
    pub fn grad_sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(name, tensor)| NamedTensor {
                name: name.to_string(),
                tensor: tensor.clone(),
            })
            .collect()
    }

    /// Overwrite every registered tensor from `named`, checking names and shapes.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                named.len()
            )));
        }
        for entry in named {
            let target = self
                .by_name_mut(&entry.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{}`", entry.name)))?;
            if target.shape() != entry.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(entry.tensor.data());
        }
        Ok(())
    }

    /// Adds gradients harvested from a graph via [`Bound::gradients`].
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<f64>)>) {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g);
        }
    }
}

/// Lazily binds parameters of one [`Params`] store into a [`Graph`].
///
/// Each parameter enters the graph at most once, so gradients of a
/// parameter used at many time steps accumulate on a single leaf.
pub struct Bound<'p> {
    params: &'p Params,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Bound<'p> {
    pub fn trainable(params: &'p Params) -> Self {
        Bound {
            params,
            vars: vec![None; params.len()],
            trainable: true,
        }
    }

    /// Binds parameters as constants: nothing upstream of them is differentiated.
    pub fn frozen(params: &'p Params) -> Self {
        Bound {
            params,
            vars: vec![None; params.len()],
            trainable: false,
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn get(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = g.input(t.shape().to_vec(), t.data().to_vec(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    pub fn gradients(&self, g: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                g.grad(v).map(|gr| (ParamId(i), gr.to_vec()))
            })
            .collect()
    }
}
