//! Named, ordered parameter storage and its snapshot format.

use super::{DiffTensor, Result, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// One `(name, shape, values)` record of a weight snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named tensors holding learned weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<DiffTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Appends a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: DiffTensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DiffTensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(DiffTensor::len).sum()
    }

    /// Puts every tensor on the tape, in store order.
    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad(requires_grad)))
            .collect()
    }

    /// Collects `d root / d param` for each loaded var, zero where absent.
    pub fn gradients(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter()
            .map(|(_, name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self> {
        let mut store = Self::new();
        for r in records {
            if store.find(&r.name).is_some() {
                return Err(TensorError::InvalidArgument {
                    op: "from_records",
                    msg: format!("duplicate tensor name {}", r.name),
                });
            }
            let t = DiffTensor::new(r.shape, r.values)?;
            store.insert(r.name, t);
        }
        Ok(store)
    }
}
