use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::tensor::{ParamId, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter declarations. Ids are positions in the list,
/// so a layout can be built, counted and matched against a checkpoint
/// without allocating any weights.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.specs.iter().filter(|s| s.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }
}

/// Named parameter tensors, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    /// Allocates every declared parameter. Weights are drawn in declaration
    /// order from one seeded generator.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs()
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let data = (0..spec.numel()).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::new(spec.shape.clone(), data).expect("shape")
                }
            })
            .collect();
        let names = layout.specs().iter().map(|s| s.name.clone()).collect();
        Self::from_parts(names, tensors).expect("layout names are unique")
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        if names.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if index.insert(name.clone(), id).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.tensors[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Errors unless names and shapes agree entry by entry with `layout`.
    pub fn check_layout(&self, layout: &ParamLayout) -> Result<(), ModelError> {
        if self.len() != layout.specs().len() {
            return Err(ModelError::Checkpoint(format!(
                "store has {} tensors, layout declares {}",
                self.len(),
                layout.specs().len()
            )));
        }
        for (spec, (_, name, tensor)) in layout.specs().iter().zip(self.iter()) {
            if spec.name != name || spec.shape != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies every tensor whose name also exists in `source`. Returns the
    /// number copied.
    pub fn copy_matching(&mut self, source: &ParamStore) -> Result<usize, ModelError> {
        let mut copied = 0;
        for id in 0..self.len() {
            if let Some(src) = source.by_name(&self.names[id]) {
                if src.shape() != self.tensors[id].shape() {
                    return Err(ModelError::Checkpoint(format!("shape mismatch for {}", self.names[id])));
                }
                self.tensors[id] = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
