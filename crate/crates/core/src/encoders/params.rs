use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layers::AttentionRecord;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to, derived from its name
/// prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Language encoder: `text.*`.
    Text,
    /// Vision encoder: `vision.*`.
    Vision,
    /// Fusion encoder: `fusion.*`.
    Fusion,
    /// Projection, matching, box and token heads: `heads.*`.
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Text, Self::Vision, Self::Fusion, Self::Heads];

    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("text") => Self::Text,
            Some("vision") => Self::Vision,
            Some("fusion") => Self::Fusion,
            _ => Self::Heads,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Text => "text",
            Self::Vision => "vision",
            Self::Fusion => "fusion",
            Self::Heads => "heads",
        };
        f.write_str(s)
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(&self.names[id.0])
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Places every parameter on `graph`, as trainable leaves or as
    /// constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Result<Bound<'g>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            graph,
            vars,
            recorder: None,
        })
    }
}

/// Parameters placed on one graph for one forward pass.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
    recorder: Option<RefCell<Vec<AttentionRecord>>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Collect attention probabilities of every subsequent forward pass.
    pub fn record_attention(&mut self) {
        self.recorder = Some(RefCell::new(Vec::new()));
    }

    pub fn attention_records(&self) -> Vec<AttentionRecord> {
        self.recorder
            .as_ref()
            .map(|r| r.borrow().clone())
            .unwrap_or_default()
    }

    pub(crate) fn record(&self, rec: impl FnOnce() -> AttentionRecord) {
        if let Some(r) = &self.recorder {
            r.borrow_mut().push(rec());
        }
    }

    /// Gradients of every parameter after `backward`, zeros where unreached.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| self.graph.grad_or_zeros(*v)).collect()
    }
}
